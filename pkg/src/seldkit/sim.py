"""FOA scene synthesis from dry samples, measured SRIRs and room ambience.

Room layout on disk (one folder per room)::

    <root>/<room>/room.json
    <root>/<room>/*.wav           4-channel IRs and ambience recordings

``room.json`` holds ``{"room", "sample_rate", "irs": [{"id", "file", "azimuth",
"elevation", "distance"}], "trajectories": [{"id", "points": [ir ids]}],
"ambience": [files]}``.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from seldkit.events import Event, make_event, sort_events, sph_to_cart
from seldkit.features import FoaClip
from seldkit.io import (ManifestEntry, dump_json, read_foa_wav, read_mono_wav, read_wav, write_foa_wav,
                        write_manifest, write_metadata_csv)

log = logging.getLogger(__name__)

BLOCK = 2048
MAX_RETRIES = 100
LOOP_FADE = 2400


class SceneError(RuntimeError):
    pass


@dataclass
class BankEntry:
    class_id: int
    sample_id: str
    path: str = ""
    gain_lo: float = 0.0
    gain_hi: float = 0.0
    trim_start: float = 0.0
    trim_end: float | None = None
    interference: bool = False
    waveform: np.ndarray | None = field(default=None, repr=False)
    sample_rate: int = 24000

    def load(self) -> np.ndarray:
        if self.waveform is None:
            x, rate = read_mono_wav(self.path)
            self.waveform, self.sample_rate = x, rate
        start = int(round(self.trim_start * self.sample_rate))
        stop = None if self.trim_end is None else int(round(self.trim_end * self.sample_rate))
        return self.waveform[start:stop]


@dataclass
class SampleBank:
    entries: list[BankEntry]

    @classmethod
    def from_csv(cls, path) -> "SampleBank":
        """Manifest CSV with header ``class,id,path,gain_lo,gain_hi``.

        Optional columns: ``trim_start``, ``trim_end`` (seconds), ``interference`` (0/1).
        """
        path = Path(path)
        entries = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"class", "id", "path", "gain_lo", "gain_hi"} - set(reader.fieldnames or [])
            if missing:
                raise ValueError(f"{path}: sample bank is missing columns {sorted(missing)}")
            for lineno, row in enumerate(reader, start=2):
                try:
                    lo, hi = float(row["gain_lo"]), float(row["gain_hi"])
                    if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                        raise ValueError(f"bad gain range [{lo}, {hi}]")
                    trim_end = row.get("trim_end") or ""
                    entries.append(BankEntry(
                        class_id=int(row["class"]), sample_id=row["id"],
                        path=str(path.parent / row["path"]), gain_lo=lo, gain_hi=hi,
                        trim_start=float(row.get("trim_start") or 0.0),
                        trim_end=float(trim_end) if trim_end.strip() else None,
                        interference=(row.get("interference") or "0").strip() in ("1", "true", "yes")))
                except (ValueError, KeyError) as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from None
        return cls(entries)

    def targets(self, n_classes: int | None = None) -> list[BankEntry]:
        out = [e for e in self.entries if not e.interference]
        if n_classes is not None:
            for e in out:
                if not 0 <= e.class_id < n_classes:
                    raise ValueError(f"sample {e.sample_id}: class {e.class_id} outside [0, {n_classes})")
        return out

    def interferers(self) -> list[BankEntry]:
        return [e for e in self.entries if e.interference]


@dataclass
class Srir:
    ir: np.ndarray  # 4 x L
    azimuth: float = 0.0
    elevation: float = 0.0
    distance: float = 1.0
    room: str = ""
    srir_id: str = ""
    sample_rate: int = 24000
    trajectory: tuple["Srir", ...] = ()

    def __post_init__(self):
        self.ir = np.asarray(self.ir, dtype=float)
        if self.ir.ndim != 2 or self.ir.shape[0] != 4:
            raise ValueError(f"SRIR needs shape (4, L), got {self.ir.shape}")
        if not np.all(np.isfinite(self.ir)):
            raise ValueError("SRIR contains non-finite values")
        if not (-180 <= self.azimuth <= 180 and -90 <= self.elevation <= 90):
            raise ValueError(f"SRIR position out of range: ({self.azimuth}, {self.elevation})")

    @property
    def doa(self) -> np.ndarray:
        return sph_to_cart(self.azimuth, self.elevation)

    @property
    def moving(self) -> bool:
        return len(self.trajectory) > 1


def trajectory_srir(points: Sequence[Srir], traj_id: str = "") -> Srir:
    first = points[0]
    return Srir(first.ir, first.azimuth, first.elevation, first.distance, first.room,
                traj_id or first.srir_id, first.sample_rate, tuple(points))


@dataclass
class Room:
    name: str
    irs: list[Srir]
    trajectories: list[Srir] = field(default_factory=list)
    ambience: list[FoaClip] = field(default_factory=list)


def load_room(folder) -> Room:
    folder = Path(folder)
    spec = json.loads((folder / "room.json").read_text())
    name = spec.get("room", folder.name)
    rate = int(spec.get("sample_rate", 24000))
    by_id = {}
    for item in spec.get("irs", []):
        ir, ir_rate, _ = read_wav(folder / item["file"])
        if ir_rate != rate:
            raise ValueError(f"{folder / item['file']}: IR sample rate {ir_rate} != room rate {rate}")
        by_id[item["id"]] = Srir(ir, float(item["azimuth"]), float(item["elevation"]),
                                 float(item.get("distance", 1.0)), name, item["id"], rate)
    trajs = [trajectory_srir([by_id[p] for p in t["points"]], t["id"]) for t in spec.get("trajectories", [])]
    amb = [read_foa_wav(folder / f, rate) for f in spec.get("ambience", [])]
    return Room(name, list(by_id.values()), trajs, amb)


def load_rooms(root) -> list[Room]:
    root = Path(root)
    rooms = [load_room(p) for p in sorted(root.iterdir()) if (p / "room.json").is_file()]
    if not rooms:
        raise ValueError(f"{root}: no room folders with room.json")
    return rooms


def write_room(folder, room: Room) -> None:
    """Inverse of ``load_room`` (16-bit IRs are not bit-exact; write 24-bit)."""
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    irs = []
    for s in room.irs:
        fname = f"{s.srir_id}.wav"
        write_foa_wav(FoaClip(s.ir, s.sample_rate), folder / fname, bits=24)
        irs.append({"id": s.srir_id, "file": fname, "azimuth": s.azimuth, "elevation": s.elevation,
                    "distance": s.distance})
    amb = []
    for i, clip in enumerate(room.ambience):
        fname = f"ambience{i}.wav"
        write_foa_wav(clip, folder / fname, bits=24)
        amb.append(fname)
    rate = room.irs[0].sample_rate if room.irs else 24000
    spec = {"room": room.name, "sample_rate": rate, "irs": irs, "ambience": amb,
            "trajectories": [{"id": t.srir_id, "points": [p.srir_id for p in t.trajectory]}
                             for t in room.trajectories]}
    dump_json(spec, folder / "room.json")


# --- convolution -----------------------------------------------------------

def fft_convolve(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Full linear convolution of mono ``x`` with each row of ``h``."""
    x = np.asarray(x, dtype=float)
    h = np.atleast_2d(np.asarray(h, dtype=float))
    n = x.shape[-1] + h.shape[-1] - 1
    nfft = 1 << max(0, (n - 1).bit_length())
    y = np.fft.irfft(np.fft.rfft(x, nfft)[None, :] * np.fft.rfft(h, nfft, axis=-1), nfft, axis=-1)
    return y[:, :n]


def crossfade_gains(n_samples: int, n_points: int, block: int = BLOCK) -> np.ndarray:
    """Per-trajectory-point input gains, shape n_points x n_samples, summing to one.

    Blocks of ``block`` samples overlap by half; each block is a raised-cosine
    bump owned by the trajectory point active at its centre.
    """
    hop = block // 2
    n_blocks = -(-n_samples // hop) + 1
    n = np.arange(n_samples)
    gains = np.zeros((n_points, n_samples))
    for b in range(n_blocks):
        centre = b * hop
        lo, hi = max(0, centre - hop), min(n_samples, centre + hop)
        if lo >= hi:
            continue
        g = np.cos(np.pi * (n[lo:hi] - centre) / (2 * hop)) ** 2
        point = min(n_points - 1, centre * n_points // max(1, n_samples))
        gains[point, lo:hi] += g
    return gains


def convolve_srir(sample, srir: Srir, sample_rate: int | None = None) -> FoaClip:
    """Spatialize a mono sample; output has N + L - 1 samples (longest IR for trajectories)."""
    x = np.asarray(sample, dtype=float)
    if sample_rate is not None and sample_rate != srir.sample_rate:
        raise ValueError(f"sample rate {sample_rate} does not match SRIR rate {srir.sample_rate}")
    if not srir.moving:
        return FoaClip(fft_convolve(x, srir.ir), srir.sample_rate)
    points = srir.trajectory
    length = max(p.ir.shape[1] for p in points)
    out = np.zeros((4, x.shape[0] + length - 1))
    gains = crossfade_gains(x.shape[0], len(points))
    for p, g in zip(points, gains):
        if not g.any():
            continue
        y = fft_convolve(x * g, p.ir)
        out[:, :y.shape[1]] += y
    return FoaClip(out, srir.sample_rate)


def trajectory_doas(srir: Srir, n_samples: int, frame_len: int) -> np.ndarray:
    """DoA per label frame of an event: the trajectory point with most gain at the frame centre."""
    n_frames = n_samples // frame_len
    if not srir.moving:
        return np.repeat(srir.doa[None], n_frames, axis=0)
    gains = crossfade_gains(n_samples, len(srir.trajectory))
    centres = np.arange(n_frames) * frame_len + frame_len // 2
    idx = gains[:, centres].argmax(axis=0)
    return np.array([srir.trajectory[i].doa for i in idx])


# --- planning --------------------------------------------------------------

@dataclass
class SimConfig:
    variant: str = "A"
    clip_count: int = 1
    duration: float = 60.0
    sample_rate: int = 24000
    frame_s: float = 0.1
    event_density: float = 20.0  # target events per minute
    interference_density: float = 0.0
    max_polyphony: int = 3
    gain_db: tuple[float, float] = (0.0, 0.0)
    snr_db: tuple[float, float] = (6.0, 30.0)
    moving_prob: float = 0.0
    max_event_s: float = 10.0
    classes: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.clip_count < 1:
            raise ValueError("clip_count must be >= 1")
        self.gain_db = tuple(float(v) for v in self.gain_db)
        self.snr_db = tuple(float(v) for v in self.snr_db)
        if self.classes is not None:
            self.classes = tuple(int(c) for c in self.classes)

    @property
    def frame_len(self) -> int:
        return int(round(self.frame_s * self.sample_rate))

    @property
    def n_frames(self) -> int:
        return int(round(self.duration / self.frame_s))


@dataclass
class Placement:
    entry: BankEntry
    class_id: int
    source_id: int
    onset_frame: int
    n_frames: int
    gain_db: float
    srir: Srir
    interference: bool = False


@dataclass
class ScenePlan:
    placements: list[Placement]
    room: str
    duration: float
    sample_rate: int
    frame_s: float
    snr_db: float | None = None
    ambience_index: int | None = None
    ambience_offset: float = 0.0

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))

    @property
    def frame_len(self) -> int:
        return int(round(self.frame_s * self.sample_rate))

    def target_polyphony(self) -> np.ndarray:
        counts = np.zeros(int(round(self.duration / self.frame_s)), dtype=int)
        for p in self.placements:
            if not p.interference:
                counts[p.onset_frame:p.onset_frame + p.n_frames] += 1
        return counts


def _pick_position(rng: np.random.Generator, room: Room, moving_prob: float) -> Srir:
    if room.trajectories and rng.random() < moving_prob:
        return room.trajectories[int(rng.integers(len(room.trajectories)))]
    return room.irs[int(rng.integers(len(room.irs)))]


def plan_scene(bank: SampleBank, room: Room, cfg: SimConfig, rng: np.random.Generator,
               snr_db: float | None = None) -> ScenePlan:
    """Random event timeline for one clip with the target polyphony capped.

    Onsets and lengths sit on the label-frame grid. Each target event gets at
    most ``MAX_RETRIES`` onset draws before the plan is declared infeasible.
    """
    if not bank.entries or not room.irs:
        raise ValueError("sample bank and room SRIRs must be non-empty")
    targets = bank.targets()
    if cfg.classes is not None:
        targets = [e for e in targets if e.class_id in cfg.classes]
    interferers = bank.interferers()
    n_clip = cfg.n_frames
    n_target = int(round(cfg.event_density * cfg.duration / 60.0))
    n_interf = int(round(cfg.interference_density * cfg.duration / 60.0)) if interferers else 0
    if n_target and not targets:
        raise SceneError("no target samples match the class filter")
    counts = np.zeros(n_clip, dtype=int)
    placements = []

    def draw(pool):
        entry = pool[int(rng.integers(len(pool)))]
        length = len(entry.load()) // cfg.frame_len
        length = max(1, min(length, int(cfg.max_event_s / cfg.frame_s), n_clip))
        gain = rng.uniform(entry.gain_lo, entry.gain_hi) + rng.uniform(*cfg.gain_db)
        return entry, length, float(gain)

    for i in range(n_target):
        entry, length, gain = draw(targets)
        for _ in range(MAX_RETRIES):
            onset = int(rng.integers(0, n_clip - length + 1))
            if counts[onset:onset + length].max(initial=0) < cfg.max_polyphony:
                break
        else:
            raise SceneError(f"could not place event {i} within polyphony {cfg.max_polyphony} "
                             f"after {MAX_RETRIES} tries; lower the event density")
        counts[onset:onset + length] += 1
        placements.append(Placement(entry, entry.class_id, i, onset, length, gain,
                                    _pick_position(rng, room, cfg.moving_prob)))
    for i in range(n_interf):
        entry, length, gain = draw(interferers)
        onset = int(rng.integers(0, n_clip - length + 1))
        placements.append(Placement(entry, entry.class_id, n_target + i, onset, length, gain,
                                    _pick_position(rng, room, cfg.moving_prob), interference=True))

    amb_idx = int(rng.integers(len(room.ambience))) if room.ambience else None
    if snr_db is None:
        snr_db = float(rng.uniform(*cfg.snr_db))
    return ScenePlan(placements, room.name, cfg.duration, cfg.sample_rate, cfg.frame_s,
                     snr_db=snr_db, ambience_index=amb_idx, ambience_offset=float(rng.random()))


# --- mixing ----------------------------------------------------------------

def measure_snr(signal, noise) -> float:
    """10 log10 of the mean-square ratio."""
    ps = float(np.mean(np.square(signal)))
    pn = float(np.mean(np.square(noise)))
    if ps <= 0 or pn <= 0:
        raise ValueError("SNR undefined: zero-power operand")
    return 10.0 * np.log10(ps / pn)


def loop_ambience(ambience: np.ndarray, n_samples: int, offset: float = 0.0, fade: int = LOOP_FADE) -> np.ndarray:
    """Cut ``n_samples`` from ``ambience`` starting at a relative offset, looping with an equal-power seam."""
    amb = np.asarray(ambience, dtype=float)
    length = amb.shape[1]
    if length >= n_samples:
        start = int(offset * (length - n_samples))
        return amb[:, start:start + n_samples].copy()
    fade = min(fade, length // 4)
    period = length - fade
    out = np.zeros((amb.shape[0], n_samples + length))
    ramp = np.linspace(0.0, np.pi / 2, fade, endpoint=False) if fade else np.zeros(0)
    fade_in, fade_out = np.sin(ramp), np.cos(ramp)
    pos = 0
    first = True
    while pos < n_samples:
        seg = amb.copy()
        if fade:
            if not first:
                seg[:, :fade] *= fade_in
            seg[:, length - fade:] *= fade_out
        out[:, pos:pos + length] += seg
        pos += period
        first = False
    return out[:, :n_samples]


def render_event(p: Placement, frame_len: int) -> np.ndarray:
    """Spatialized event cut to its labelled extent."""
    n = p.n_frames * frame_len
    dry = p.entry.load()[:n]
    if dry.shape[0] < n:
        dry = np.pad(dry, (0, n - dry.shape[0]))
    wet = convolve_srir(dry * 10.0 ** (p.gain_db / 20.0), p.srir, p.entry.sample_rate).samples
    return wet[:, :n]


def plan_events(plan: ScenePlan) -> list[Event]:
    out = []
    for p in plan.placements:
        if p.interference:
            continue
        doas = trajectory_doas(p.srir, p.n_frames * plan.frame_len, plan.frame_len)
        for i, v in enumerate(doas):
            out.append(make_event(p.onset_frame + i, p.class_id, p.source_id, v))
    return sort_events(out)


def mix_scene(plan: ScenePlan, ambience: FoaClip | None = None, return_stems: bool = False):
    """Sum the spatialized events and add ambience scaled to the plan's SNR.

    SNR compares event-mix and ambience power over samples inside frames with
    at least one target event. Returns ``(clip, events)`` or, with
    ``return_stems``, ``(clip, events, {"events": ..., "ambience": ...})``.
    """
    n = plan.n_samples
    fl = plan.frame_len
    events_mix = np.zeros((4, n))
    for p in plan.placements:
        wet = render_event(p, fl)
        start = p.onset_frame * fl
        stop = min(n, start + wet.shape[1])
        events_mix[:, start:stop] += wet[:, :stop - start]
    amb = np.zeros((4, n))
    if ambience is not None:
        if ambience.sample_rate != plan.sample_rate:
            raise ValueError("ambience sample rate differs from the scene")
        amb = loop_ambience(ambience.samples, n, plan.ambience_offset)
        active = np.repeat(plan.target_polyphony() > 0, fl)[:n]
        if active.any() and plan.snr_db is not None:
            ps = float(np.mean(events_mix[:, active] ** 2))
            pn = float(np.mean(amb[:, active] ** 2))
            if ps <= 0:
                raise SceneError("event mixture is silent over its active frames; SNR is undefined")
            if pn <= 0:
                raise SceneError("ambience is silent over the active frames; cannot reach target SNR")
            amb = amb * np.sqrt(ps / (pn * 10.0 ** (plan.snr_db / 10.0)))
        clip = FoaClip(events_mix + amb, plan.sample_rate)
    else:
        clip = FoaClip(events_mix.copy(), plan.sample_rate)
    events = plan_events(plan)
    if return_stems:
        return clip, events, {"events": events_mix, "ambience": amb}
    return clip, events


def active_sample_mask(events: Sequence[Event], n_samples: int, frame_len: int) -> np.ndarray:
    frames = np.zeros(-(-n_samples // frame_len), dtype=bool)
    for e in events:
        if e.frame < frames.size:
            frames[e.frame] = True
    return np.repeat(frames, frame_len)[:n_samples]


# --- datasets --------------------------------------------------------------

def clip_name(cfg: SimConfig, room: str, index: int) -> str:
    return f"{cfg.variant}_{room}_mix{index:04d}"


def synthesize_clip(cfg: SimConfig, bank: SampleBank, rooms: Sequence[Room], index: int):
    rng = np.random.default_rng([cfg.seed, index])
    room = rooms[int(rng.integers(len(rooms)))]
    plan = plan_scene(bank, room, cfg, rng)
    ambience = room.ambience[plan.ambience_index] if plan.ambience_index is not None else None
    clip, events = mix_scene(plan, ambience)
    peak = float(np.max(np.abs(clip.samples))) if len(clip) else 0.0
    scale = 0.99 / peak if peak > 0.99 else 1.0
    if scale != 1.0:
        clip = FoaClip(clip.samples * scale, clip.sample_rate)
    info = {"index": index, "room": room.name, "seed": [cfg.seed, index], "snr_db": plan.snr_db,
            "n_events": sum(not p.interference for p in plan.placements),
            "n_interferers": sum(p.interference for p in plan.placements),
            "peak_scale": scale,
            "samples": [p.entry.sample_id for p in plan.placements],
            "positions": [p.srir.srir_id for p in plan.placements]}
    return clip, events, info


def synthesize_dataset(cfg: SimConfig, bank: SampleBank, rooms: Sequence[Room], out_dir,
                       workers: int | None = None, extra: dict | None = None) -> dict:
    """Write ``cfg.clip_count`` clips under ``out_dir``; completed clips recorded in dataset.json are skipped.

    Returns the dataset record (also written to dataset.json); failures are
    listed under ``failed`` instead of aborting the batch.
    """
    out = Path(out_dir)
    (out / "foa").mkdir(parents=True, exist_ok=True)
    (out / "metadata").mkdir(parents=True, exist_ok=True)
    record_path = out / "dataset.json"
    done = {}
    if record_path.exists():
        try:
            prev = json.loads(record_path.read_text())
            if prev.get("config") == _cfg_dict(cfg):
                done = {c["name"]: c for c in prev.get("clips", [])
                        if (out / c["clip"]).exists() and (out / c["metadata"]).exists()}
        except (ValueError, KeyError):
            done = {}
    workers = workers or int(os.environ.get("SELDKIT_WORKERS", "1"))

    def task(index: int):
        for info in done.values():
            if info["index"] == index:
                return info, None
        try:
            clip, events, info = synthesize_clip(cfg, bank, rooms, index)
            name = clip_name(cfg, info["room"], index)
            info.update(name=name, clip=f"foa/{name}.wav", metadata=f"metadata/{name}.csv")
            write_foa_wav(clip, out / info["clip"])
            write_metadata_csv(events, out / info["metadata"])
            return info, None
        except Exception as exc:  # reported per clip, batch continues
            log.error("clip %d failed: %s", index, exc)
            return None, {"index": index, "error": f"{type(exc).__name__}: {exc}"}

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(task, range(cfg.clip_count)))
    else:
        results = [task(i) for i in range(cfg.clip_count)]
    clips = sorted((r for r, _ in results if r is not None), key=lambda c: c["index"])
    failed = [f for _, f in results if f is not None]
    record = {"config": _cfg_dict(cfg), "clips": clips, "failed": failed}
    if extra:
        record.update(extra)
    dump_json(record, record_path)
    write_manifest([ManifestEntry(str(out / c["clip"]), str(out / c["metadata"]),
                                  {"room": c["room"], "variant": cfg.variant}) for c in clips],
                   out / "manifest.csv", relative_to=out)
    return record


def _cfg_dict(cfg: SimConfig) -> dict:
    d = asdict(cfg)
    d["gain_db"] = list(d["gain_db"])
    d["snr_db"] = list(d["snr_db"])
    if d["classes"] is not None:
        d["classes"] = list(d["classes"])
    return d
