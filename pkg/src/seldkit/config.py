"""Pipeline configuration: defaults, YAML file, then command-line overrides."""
from __future__ import annotations

import copy
import difflib
import hashlib
import json
from pathlib import Path
from typing import Any, Iterable

import yaml

from seldkit.augment import FEATURE_KINDS, AugmentRanges
from seldkit.features import FeatureConfig
from seldkit.sim import SimConfig

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "features": {
        "sample_rate": 24000,
        "n_fft": 1024,
        "hop": 400,
        "n_mels": 128,
        "f_min": 20.0,
        "f_max": 12000.0,
        "segment_seconds": 5.0,
    },
    "codec": {
        "tracks": 3,
        "classes": 13,
        "lambda": 0.5,
        "threshold": 0.5,
        "class_names": [],
        "label_frame_s": 0.1,
    },
    "augment": {
        "chains": 3,
        "alpha": 1.0,
        "depth": [1, 3],
        "pool": list(FEATURE_KINDS),
        "max_rects": 5,
        "rect_max_frac": 0.25,
        "max_time_masks": 2,
        "max_freq_masks": 2,
        "stripe_max_frac": 0.1,
        "shift_max": 10,
        "mixup_alpha": 1.0,
    },
    "sim": {
        "variant": "A",
        "clip_count": 1,
        "duration": 60.0,
        "snr_db": [6.0, 30.0],
        "max_polyphony": 3,
        "gain_db": [0.0, 0.0],
        "event_density": 20.0,
        "interference_density": 0.0,
        "moving_prob": 0.0,
        "max_event_s": 10.0,
        "classes": None,
    },
    "metrics": {
        "threshold_deg": 20.0,
        "segment_seconds": 1.0,
        "average": "macro",
    },
}


class ConfigError(ValueError):
    pass


def _suggest(key: str, options: Iterable[str]) -> str:
    close = difflib.get_close_matches(key, list(options), n=1)
    return f"; did you mean {close[0]!r}?" if close else ""


def _coerce(path: str, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}{_suggest(key, base)}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a mapping")
            _merge(base[key], value, path + ".")
        else:
            base[key] = _coerce(path, value, DEFAULTS_FLAT.get(path, base[key]))


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


DEFAULTS_FLAT = _flatten(DEFAULTS)


def _resolve_key(key: str) -> str:
    if key in DEFAULTS_FLAT:
        return key
    if "." not in key:
        hits = [k for k in DEFAULTS_FLAT if k.rsplit(".", 1)[-1] == key]
        if len(hits) == 1:
            return hits[0]
        if len(hits) > 1:
            raise ConfigError(f"ambiguous key {key!r}: qualify it as one of {hits}")
    leaves = {k.rsplit(".", 1)[-1] for k in DEFAULTS_FLAT}
    raise ConfigError(f"unknown config key {key!r}{_suggest(key.rsplit('.', 1)[-1], leaves | set(DEFAULTS_FLAT))}")


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    return _resolve_key(key.strip()), yaml.safe_load(raw)


class PipelineConfig:
    """Nested settings with typed views for each stage."""

    def __init__(self, data: dict):
        self.data = data

    def __getitem__(self, key: str):
        return self.data[key]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def hash(self) -> str:
        blob = json.dumps(self.data, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def features(self) -> FeatureConfig:
        f = self.data["features"]
        return FeatureConfig(f["sample_rate"], f["n_fft"], f["hop"], f["n_mels"], f["f_min"], f["f_max"])

    def augment_ranges(self) -> AugmentRanges:
        a = self.data["augment"]
        return AugmentRanges(a["max_rects"], a["rect_max_frac"], a["max_time_masks"], a["max_freq_masks"],
                             a["stripe_max_frac"], a["shift_max"], a["mixup_alpha"])

    def sim(self) -> SimConfig:
        s = self.data["sim"]
        return SimConfig(
            variant=s["variant"], clip_count=s["clip_count"], duration=s["duration"],
            sample_rate=self.data["features"]["sample_rate"], frame_s=self.data["codec"]["label_frame_s"],
            event_density=s["event_density"], interference_density=s["interference_density"],
            max_polyphony=s["max_polyphony"], gain_db=tuple(s["gain_db"]), snr_db=tuple(s["snr_db"]),
            moving_prob=s["moving_prob"], max_event_s=s["max_event_s"],
            classes=None if s["classes"] is None else tuple(s["classes"]), seed=self.seed)

    @property
    def frames_per_segment(self) -> int:
        return int(round(self.data["metrics"]["segment_seconds"] / self.data["codec"]["label_frame_s"]))

    @property
    def class_names(self) -> list[str] | None:
        return self.data["codec"]["class_names"] or None


def load_config(path=None, overrides: Iterable[str] | dict | None = None) -> PipelineConfig:
    """Defaults, updated by the YAML file at ``path``, updated by ``overrides``.

    Overrides are ``section.key=value`` strings (a bare key works when it is
    unique) or a ``{dotted_key: value}`` dict.
    """
    data = copy.deepcopy(DEFAULTS)
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is not None:
            if not isinstance(loaded, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
            _merge(data, loaded)
    if overrides:
        items = overrides.items() if isinstance(overrides, dict) else (parse_override(o) for o in overrides)
        for key, value in items:
            key = _resolve_key(key)
            node = data
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = _coerce(key, value, DEFAULTS_FLAT[key])
    _validate(data)
    return PipelineConfig(data)


def _validate(data: dict) -> None:
    c = data["codec"]
    if not 0.0 <= c["lambda"] <= 1.0:
        raise ConfigError(f"codec.lambda must be in [0, 1], got {c['lambda']}")
    if not 0.0 < c["threshold"] < 1.0:
        raise ConfigError(f"codec.threshold must be in (0, 1), got {c['threshold']}")
    if c["tracks"] < 1 or c["classes"] < 1:
        raise ConfigError("codec.tracks and codec.classes must be >= 1")
    if data["metrics"]["average"] not in ("macro", "micro"):
        raise ConfigError("metrics.average must be 'macro' or 'micro'")
    lo, hi = data["sim"]["snr_db"]
    if lo > hi:
        raise ConfigError("sim.snr_db must be [low, high]")
    if data["augment"]["chains"] < 1:
        raise ConfigError("augment.chains must be >= 1")
