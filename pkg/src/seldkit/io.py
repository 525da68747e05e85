"""WAV, metadata CSV, feature blob and manifest readers/writers."""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from seldkit.events import Event, cart_to_sph, make_event, sort_events, sph_to_cart
from seldkit.features import FoaClip

FOA_RATE = 24000
BLOB_MAGIC = b"SELDBLOB"
_PCM = 1
_EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    pass


# --- WAV -------------------------------------------------------------------

def read_wav(path) -> tuple[np.ndarray, int, int]:
    """Read an integer PCM WAV; returns (channels x N float array, sample_rate, bits)."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavError(f"{path}: not a RIFF/WAVE file")
    riff_size = struct.unpack("<I", data[4:8])[0]
    if riff_size + 8 > len(data):
        raise WavError(f"{path}: RIFF header declares {riff_size + 8} bytes, file has {len(data)}")
    fmt = None
    payload = None
    pos = 12
    end = riff_size + 8
    while pos + 8 <= end:
        cid, size = data[pos:pos + 4], struct.unpack("<I", data[pos + 4:pos + 8])[0]
        body = pos + 8
        if body + size > len(data):
            raise WavError(f"{path}: chunk {cid!r} declares {size} bytes, only {len(data) - body} present")
        if cid == b"fmt ":
            fmt = data[body:body + size]
        elif cid == b"data":
            payload = data[body:body + size]
        pos = body + size + (size & 1)
    if fmt is None or payload is None:
        raise WavError(f"{path}: missing {'fmt' if fmt is None else 'data'} chunk")
    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _EXTENSIBLE and len(fmt) >= 26:
        tag = struct.unpack("<H", fmt[24:26])[0]
    if tag != _PCM:
        raise WavError(f"{path}: unsupported WAV format tag {tag:#x} (integer PCM only)")
    if bits not in (8, 16, 24, 32) or block_align != channels * bits // 8:
        raise WavError(f"{path}: unsupported sample layout ({bits} bits, block align {block_align})")
    if len(payload) % block_align:
        raise WavError(f"{path}: data chunk size {len(payload)} is not a multiple of frame size {block_align}")
    raw = np.frombuffer(payload, dtype=np.uint8)
    if bits == 8:
        ints = raw.astype(np.int32) - 128
    elif bits == 16:
        ints = raw.view("<i2").astype(np.int32)
    elif bits == 24:
        b = raw.reshape(-1, 3).astype(np.int32)
        ints = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
    else:
        ints = raw.view("<i4").astype(np.int64)
    samples = ints.reshape(-1, channels).T / float(1 << (bits - 1))
    return samples, rate, bits


def write_wav(path, samples, sample_rate: int, bits: int = 16) -> None:
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if bits not in (16, 24):
        raise WavError(f"can only write 16- or 24-bit PCM, got {bits}")
    channels, _ = x.shape
    full = 1 << (bits - 1)
    q = np.clip(np.round(x * full), -full, full - 1).astype(np.int32).T.reshape(-1)
    if bits == 16:
        payload = q.astype("<i2").tobytes()
    else:
        u = (q & 0xFFFFFF).astype(np.uint32)
        payload = np.stack([u & 0xFF, (u >> 8) & 0xFF, (u >> 16) & 0xFF], axis=1).astype(np.uint8).tobytes()
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", _PCM, channels, sample_rate, sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def read_foa_wav(path, sample_rate: int = FOA_RATE) -> FoaClip:
    samples, rate, bits = read_wav(path)
    if samples.shape[0] != 4:
        raise WavError(f"{path}: expected 4 channels (w, x, y, z), file has {samples.shape[0]}")
    if rate != sample_rate:
        raise WavError(f"{path}: sample rate {rate} Hz, expected {sample_rate} Hz (no resampling)")
    if bits not in (16, 24):
        raise WavError(f"{path}: bit depth {bits}, expected 16 or 24")
    return FoaClip(samples, rate)


def write_foa_wav(clip: FoaClip, path, bits: int = 16) -> None:
    write_wav(path, clip.samples, clip.sample_rate, bits)


def read_mono_wav(path) -> tuple[np.ndarray, int]:
    samples, rate, _ = read_wav(path)
    if samples.shape[0] != 1:
        raise WavError(f"{path}: expected a mono file, got {samples.shape[0]} channels")
    return samples[0], rate


# --- metadata CSV ----------------------------------------------------------

def read_metadata_csv(path) -> list[Event]:
    """Rows of ``frame,class,source,azimuth,elevation`` (an optional sixth column is ignored)."""
    events = []
    seen = set()
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) not in (5, 6):
                raise ValueError(f"{path}:{lineno}: expected 5 columns, got {len(row)}")
            try:
                frame, cls, src = (int(float(c)) for c in row[:3])
                az, el = float(row[3]), float(row[4])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if frame < 0 or cls < 0 or src < 0:
                raise ValueError(f"{path}:{lineno}: negative frame/class/source index")
            if not (math.isfinite(az) and -180 <= az <= 180 and -90 <= el <= 90):
                raise ValueError(f"{path}:{lineno}: angle out of range (az={az}, el={el})")
            if (frame, cls, src) in seen:
                raise ValueError(f"{path}:{lineno}: duplicate row for frame {frame}, class {cls}, source {src}")
            seen.add((frame, cls, src))
            events.append(make_event(frame, cls, src, sph_to_cart(az, el)))
    return sort_events(events)


def event_angles(e: Event) -> tuple[int, int]:
    az, el = cart_to_sph(e.doa)
    az_i, el_i = int(round(float(az))), int(round(float(el)))
    if az_i >= 180:
        az_i -= 360
    return az_i, el_i


def format_metadata(events: Iterable[Event]) -> str:
    lines = []
    for e in sort_events(events):
        az, el = event_angles(e)
        lines.append(f"{e.frame},{e.class_id},{e.source_id},{az},{el}\n")
    return "".join(lines)


def write_metadata_csv(events: Iterable[Event], path) -> None:
    Path(path).write_text(format_metadata(events))


# --- blobs -----------------------------------------------------------------

def write_blob(path, arrays: dict[str, np.ndarray], meta: dict | None = None, dtype: str = "<f4") -> None:
    """Little-endian arrays behind a JSON header.

    Layout: 8-byte magic ``SELDBLOB``, uint32 LE header length, UTF-8 JSON
    header, then each array's C-order bytes at its recorded offset.
    """
    specs, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        specs.append({"name": name, "dtype": dtype, "shape": list(np.shape(arr)), "offset": offset,
                      "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = json.dumps({"format": "seldkit-blob", "version": 1, "arrays": specs, "meta": meta or {}},
                        sort_keys=True).encode()
    Path(path).write_bytes(BLOB_MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks))


def read_blob(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != BLOB_MAGIC:
        raise ValueError(f"{path}: not a seldkit blob")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen])
    base = 12 + hlen
    arrays = {}
    for spec in header["arrays"]:
        start = base + spec["offset"]
        buf = data[start:start + spec["nbytes"]]
        if len(buf) != spec["nbytes"]:
            raise ValueError(f"{path}: array {spec['name']!r} truncated")
        arrays[spec["name"]] = np.frombuffer(buf, dtype=spec["dtype"]).reshape(spec["shape"]).astype(float)
    return arrays, header["meta"]


# --- manifests -------------------------------------------------------------

@dataclass
class ManifestEntry:
    clip: str
    metadata: str = ""
    tags: dict[str, str] = field(default_factory=dict)

    @property
    def clip_id(self) -> str:
        return Path(self.clip or self.metadata).stem


def parse_tags(text: str) -> dict[str, str]:
    tags = {}
    for item in filter(None, (t.strip() for t in text.split(";"))):
        if "=" not in item:
            raise ValueError(f"tag {item!r} is not key=value")
        k, v = item.split("=", 1)
        tags[k.strip()] = v.strip()
    return tags


def format_tags(tags: dict[str, str]) -> str:
    return ";".join(f"{k}={tags[k]}" for k in sorted(tags))


def read_manifest(path) -> list[ManifestEntry]:
    """CSV with header ``clip,metadata,tags``; relative paths resolve against the manifest's folder."""
    path = Path(path)
    root = path.parent
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "clip" not in reader.fieldnames:
            raise ValueError(f"{path}: manifest needs a 'clip' column")
        for lineno, row in enumerate(reader, start=2):
            try:
                tags = parse_tags(row.get("tags") or "")
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            clip = row["clip"].strip()
            meta = (row.get("metadata") or "").strip()
            entries.append(ManifestEntry(
                str(root / clip) if clip else "", str(root / meta) if meta else "", tags))
    return entries


def write_manifest(entries: Iterable[ManifestEntry], path, relative_to=None) -> None:
    root = Path(relative_to) if relative_to else None

    def rel(p):
        if not p or root is None:
            return p
        try:
            return str(Path(p).relative_to(root))
        except ValueError:
            return str(p)

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["clip", "metadata", "tags"])
        for e in sorted(entries, key=lambda e: e.clip_id):
            w.writerow([rel(e.clip), rel(e.metadata), format_tags(e.tags)])


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
