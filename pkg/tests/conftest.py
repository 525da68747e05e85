"""Shared fixtures: a small synthetic sample bank and two rooms on disk."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest

from seldkit.events import sph_to_cart
from seldkit.features import FoaClip
from seldkit.io import write_wav
from seldkit.sim import Room, SampleBank, Srir, trajectory_srir, write_room

SR = 24000


def synthetic_ir(rng, az, el, length=256):
    u = sph_to_cart(az, el)
    ir = np.zeros((4, length))
    ir[:, 3] = [1.0, *u]
    decay = np.exp(-np.arange(length) / 40.0)
    ir[:, 8:] += 0.05 * rng.normal(size=(4, length - 8)) * decay[8:]
    return ir


def make_room(rng, name, n_irs=6, amb_seconds=3.0):
    irs = []
    for i in range(n_irs):
        az = float(rng.integers(-180, 180))
        el = float(rng.integers(-40, 41))
        irs.append(Srir(synthetic_ir(rng, az, el), az, el, 1.5, name, f"{name}_p{i}", SR))
    traj = trajectory_srir(irs[:3], f"{name}_t0")
    amb = FoaClip(0.05 * rng.normal(size=(4, int(amb_seconds * SR))), SR)
    return Room(name, irs, [traj], [amb])


def write_bank(folder: Path, rng, n_classes=4, per_class=2, interferers=1) -> Path:
    folder.mkdir(parents=True, exist_ok=True)
    rows = []
    for c in range(n_classes):
        for j in range(per_class):
            n = int(rng.uniform(0.4, 2.5) * SR)
            t = np.arange(n) / SR
            x = 0.3 * np.sin(2 * np.pi * (200 + 150 * c) * t) * (1 + 0.2 * rng.normal(size=n))
            fname = f"c{c}_{j}.wav"
            write_wav(folder / fname, np.clip(x, -1, 1)[None], SR)
            rows.append([c, f"c{c}_{j}", fname, -3, 3, "", "", 0])
    for j in range(interferers):
        n = SR
        write_wav(folder / f"int{j}.wav", 0.2 * rng.uniform(-1, 1, (1, n)), SR)
        rows.append([99, f"int{j}", f"int{j}.wav", -6, 0, "", "", 1])
    path = folder / "bank.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "id", "path", "gain_lo", "gain_hi", "trim_start", "trim_end", "interference"])
        w.writerows(rows)
    return path


@pytest.fixture(scope="session")
def world(tmp_path_factory):
    """Bank CSV, rooms folder and loaded objects shared across tests."""
    root = tmp_path_factory.mktemp("world")
    rng = np.random.default_rng(1234)
    bank_path = write_bank(root / "bank", rng)
    rooms_dir = root / "rooms"
    rooms = [make_room(rng, f"room{i}") for i in (1, 2)]
    for room in rooms:
        write_room(rooms_dir / room.name, room)
    return {"root": root, "bank_path": bank_path, "rooms_dir": rooms_dir,
            "bank": SampleBank.from_csv(bank_path), "rooms": rooms}


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
