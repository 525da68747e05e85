"""``seldkit`` command line: simulate, featurize, augment, eval, rotations, selfcheck."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from seldkit import augment as aug
from seldkit import codec, oracles
from seldkit.assignment import linear_assignment
from seldkit.config import ConfigError, PipelineConfig, load_config
from seldkit.events import Event
from seldkit.features import CHANNEL_LAYOUT, FoaClip, extract_features
from seldkit.io import (dump_json, read_blob, read_foa_wav, read_manifest, read_metadata_csv, write_blob)
from seldkit.metrics import aggregate, compute_metrics
from seldkit.sim import SampleBank, load_rooms, synthesize_dataset

log = logging.getLogger("seldkit")


def _workers() -> int:
    return max(1, int(os.environ.get("SELDKIT_WORKERS", "1")))


def _pmap(fn, items):
    n = _workers()
    if n == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


def _config(args) -> PipelineConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "clips", None) is not None:
        overrides.append(f"sim.clip_count={args.clips}")
    return load_config(args.config, overrides)


def _stamp(cfg: PipelineConfig) -> dict:
    return {"config": cfg.to_dict(), "config_hash": cfg.hash()}


# --- simulate --------------------------------------------------------------

def cmd_simulate(args, cfg: PipelineConfig) -> int:
    bank = SampleBank.from_csv(args.bank)
    n_classes = cfg["codec"]["classes"]
    bank.targets(n_classes)
    rooms = load_rooms(args.rooms)
    record = synthesize_dataset(cfg.sim(), bank, rooms, args.out, workers=_workers(), extra=_stamp(cfg))
    print(f"simulated {len(record['clips'])} clip(s) into {args.out}")
    for f in record["failed"]:
        print(f"FAILED clip {f['index']}: {f['error']}", file=sys.stderr)
    return 1 if record["failed"] else 0


# --- featurize -------------------------------------------------------------

def chunk_clip(clip: FoaClip, seconds: float) -> list[tuple[np.ndarray, bool]]:
    """Non-overlapping segments; the last one is zero-padded and flagged."""
    n = int(round(seconds * clip.sample_rate))
    out = []
    for start in range(0, max(len(clip), 1), n):
        seg = clip.samples[:, start:start + n]
        padded = seg.shape[1] < n
        if padded:
            seg = np.pad(seg, ((0, 0), (0, n - seg.shape[1])))
        out.append((seg, padded))
    return out


def segment_events(events: list[Event], index: int, n_frames: int) -> list[Event]:
    lo = index * n_frames
    return [Event(e.frame - lo, e.class_id, e.source_id, e.doa) for e in events if lo <= e.frame < lo + n_frames]


def cmd_featurize(args, cfg: PipelineConfig) -> int:
    out = Path(args.out)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    fcfg = cfg.features()
    seconds = cfg["features"]["segment_seconds"]
    label_frames = int(round(seconds / cfg["codec"]["label_frame_s"]))
    c = cfg["codec"]
    chash = cfg.hash()
    entries = sorted(read_manifest(args.manifest), key=lambda e: e.clip_id)

    def work(entry):
        try:
            clip = read_foa_wav(entry.clip, fcfg.sample_rate)
            events = read_metadata_csv(entry.metadata) if entry.metadata else None
            items = []
            for j, (seg, padded) in enumerate(chunk_clip(clip, seconds)):
                sid = f"{entry.clip_id}_{j:03d}"
                feats = extract_features(FoaClip(seg, clip.sample_rate), fcfg)
                item = {"id": sid, "clip": entry.clip_id, "segment": j, "padded": padded,
                        "features": f"features/{sid}.feat", "tags": entry.tags, "shape": list(feats.shape)}
                write_blob(out / item["features"], {"features": feats},
                           {"channel_layout": list(CHANNEL_LAYOUT), "config_hash": chash, "clip": entry.clip_id,
                            "segment": j, "padded": padded})
                if events is not None:
                    labels, dropped = codec.encode_labels(segment_events(events, j, label_frames), label_frames,
                                                          c["tracks"], c["classes"])
                    labels = codec.resample_labels(labels, feats.shape[1])
                    item["labels"] = f"labels/{sid}.lab"
                    item["dropped"] = dropped
                    write_blob(out / item["labels"], {"sed": labels.sed, "doa": labels.doa},
                               {"config_hash": chash, "clip": entry.clip_id, "segment": j,
                                "label_frames": label_frames})
                items.append(item)
            return items, None
        except Exception as exc:
            return [], {"clip": entry.clip_id, "error": f"{type(exc).__name__}: {exc}"}

    results = _pmap(work, entries)
    items = [i for r, _ in results for i in r]
    failed = [f for _, f in results if f is not None]
    dump_json({**_stamp(cfg), "items": items, "failed": failed}, out / "features.json")
    print(f"featurized {len(items)} segment(s) from {len(entries) - len(failed)} clip(s) into {out}")
    for f in failed:
        print(f"FAILED {f['clip']}: {f['error']}", file=sys.stderr)
    return 1 if failed else 0


# --- augment ---------------------------------------------------------------

def _load_item(root: Path, item: dict):
    feats = read_blob(root / item["features"])[0]["features"]
    labels = None
    if "labels" in item:
        arr = read_blob(root / item["labels"])[0]
        labels = codec.TrackLabels(arr["sed"], arr["doa"])
    return feats, labels


def cmd_augment(args, cfg: PipelineConfig) -> int:
    src = Path(args.features)
    out = Path(args.out)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    index = json.loads((src / "features.json").read_text())
    items = index["items"]
    a = cfg["augment"]
    ranges = cfg.augment_ranges()
    chash = cfg.hash()
    jobs = [(i, copy) for i in range(len(items)) for copy in range(args.copies)]

    def work(job):
        i, copy = job
        item = items[i]
        try:
            rng = np.random.default_rng([cfg.seed, i, copy])
            feats, labels = _load_item(src, item)
            partner = None
            if "mixup_spec" in a["pool"] and len(items) > 1:
                j = int(rng.integers(len(items) - 1))
                j += j >= i
                px, pl = _load_item(src, items[j])
                if px.shape == feats.shape:
                    partner = (px, pl)
            pool = [k for k in a["pool"] if partner is not None or k != "mixup_spec"]
            x, lab = aug.apply_chains(feats, labels, a["chains"], rng, pool, tuple(a["depth"]), a["alpha"],
                                      ranges, partner)
            aid = f"{item['id']}_aug{copy}"
            rec = {"id": aid, "source": item["id"], "copy": copy, "features": f"features/{aid}.feat"}
            write_blob(out / rec["features"], {"features": x},
                       {"channel_layout": list(CHANNEL_LAYOUT), "config_hash": chash, "source": item["id"]})
            if lab is not None:
                rec["labels"] = f"labels/{aid}.lab"
                write_blob(out / rec["labels"], {"sed": lab.sed, "doa": lab.doa},
                           {"config_hash": chash, "source": item["id"]})
            return rec, None
        except Exception as exc:
            return None, {"id": item["id"], "copy": copy, "error": f"{type(exc).__name__}: {exc}"}

    results = _pmap(work, jobs)
    recs = [r for r, _ in results if r is not None]
    failed = [f for _, f in results if f is not None]
    dump_json({**_stamp(cfg), "items": recs, "failed": failed}, out / "augment.json")
    print(f"wrote {len(recs)} augmented segment(s) into {out}")
    for f in failed:
        print(f"FAILED {f['id']}: {f['error']}", file=sys.stderr)
    return 1 if failed else 0


# --- eval ------------------------------------------------------------------

def _csv_files(path: Path) -> dict[str, Path]:
    if path.is_file():
        return {path.stem: path}
    if not path.is_dir():
        raise FileNotFoundError(f"{path} does not exist")
    return {p.stem: p for p in sorted(path.glob("*.csv"))}


def tags_from_name(stem: str) -> dict[str, str]:
    tags = {}
    for tok in stem.split("_"):
        for key in ("room", "fold"):
            if tok.startswith(key) and len(tok) > len(key):
                tags.setdefault(key, tok)
    return tags


def cmd_eval(args, cfg: PipelineConfig) -> int:
    refs = _csv_files(Path(args.ref))
    preds = _csv_files(Path(args.pred))
    if not refs:
        raise ValueError(f"no reference CSVs under {args.ref}")
    manifest_tags = {}
    if args.manifest:
        for e in read_manifest(args.manifest):
            manifest_tags[Path(e.metadata).stem if e.metadata else e.clip_id] = e.tags
    m = cfg["metrics"]
    average = args.average or m["average"]
    n_classes = cfg["codec"]["classes"]
    reports, missing = [], []
    for stem, ref_path in refs.items():
        pred = read_metadata_csv(preds[stem]) if stem in preds else []
        if stem not in preds:
            missing.append(stem)
        tags = manifest_tags.get(stem) or tags_from_name(stem)
        reports.append(compute_metrics(read_metadata_csv(ref_path), pred, m["threshold_deg"], average,
                                       n_classes, cfg.frames_per_segment, tags=tags,
                                       class_names=cfg.class_names))
    extra = sorted(set(preds) - set(refs))
    for stem in missing:
        log.warning("no prediction for %s; scored as empty", stem)
    for stem in extra:
        log.warning("prediction %s has no reference; ignored", stem)
    report = aggregate(reports, args.group_by)
    print(report.format_table())
    if args.json:
        dump_json({**_stamp(cfg), "report": report.to_dict(), "clips": sorted(refs),
                   "missing_predictions": missing, "unmatched_predictions": extra}, args.json)
    return 0


# --- rotations / selfcheck -------------------------------------------------

def cmd_rotations(args, cfg: PipelineConfig) -> int:
    mats = aug.all_rotations()
    if args.json:
        print(json.dumps([{"index": r, "matrix": m.astype(int).tolist()} for r, m in enumerate(mats)], indent=2))
    else:
        for r, m in enumerate(mats):
            rows = "  ".join("[" + " ".join(f"{int(v):2d}" for v in row) + "]" for row in m)
            print(f"{r:2d}: {rows}")
    distinct = len({m.astype(int).tobytes() for m in mats})
    return 0 if distinct == aug.N_ROTATIONS else 1


def selfcheck(trials: int, seed: int) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    results = []

    worst = 0.0
    for _ in range(trials):
        m, k, t = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 9))
        pred = oracles.random_labels(rng, t, m, k, target=False)
        target = oracles.random_labels(rng, t, m, k, target=True)
        lam = float(rng.random())
        fast = codec.pit_loss(pred, target, lam).loss
        slow = oracles.brute_pit_loss(pred, target, lam)
        worst = max(worst, abs(fast - slow) / max(abs(slow), 1e-300))
    results.append(("pit-oracle", worst <= 1e-12, f"max rel diff {worst:.2e} over {trials} instances"))

    worst = 0.0
    for _ in range(trials):
        n, m = int(rng.integers(0, 6)), int(rng.integers(0, 6))
        cost = rng.random((n, m)) * 180
        r, c = linear_assignment(cost)
        worst = max(worst, abs(cost[r, c].sum() - oracles.brute_assignment(cost)))
    results.append(("assignment-oracle", worst <= 1e-9, f"max abs diff {worst:.2e} over {trials} matrices"))

    worst = 0.0
    h = 1e-5
    for _ in range(max(1, trials // 10)):
        m, k, t = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
        pred = oracles.random_labels(rng, t, m, k, target=False)
        target = oracles.random_labels(rng, t, m, k, target=True)
        g = codec.pit_grad(pred, target, 0.5)
        for arr, garr in ((pred.sed, g.sed), (pred.doa, g.doa)):
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                up = codec.pit_loss(pred, target, 0.5)
                arr[idx] = old - h
                down = codec.pit_loss(pred, target, 0.5)
                arr[idx] = old
                if not np.array_equal(up.per_frame_perm, down.per_frame_perm):
                    continue
                num = (up.loss - down.loss) / (2 * h)
                worst = max(worst, abs(num - garr[idx]) / max(abs(num), abs(garr[idx]), 1e-8))
    results.append(("pit-gradient", worst < 1e-4, f"max rel err {worst:.2e}"))
    return results


def cmd_selfcheck(args, cfg: PipelineConfig) -> int:
    seed = args.seed if args.seed is not None else cfg.seed
    ok = True
    for name, passed, detail in selfcheck(args.trials, seed):
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    return 0 if ok else 1


# --- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seldkit", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    common.add_argument("--seed", type=int)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="synthesize a spatial scene dataset")
    p.add_argument("--bank", required=True, help="sample bank CSV")
    p.add_argument("--rooms", required=True, help="folder of room SRIR folders")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("featurize", parents=[common], help="log-mel + IV features for a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("augment", parents=[common], help="augmentation chains over featurized segments")
    p.add_argument("features", help="output folder of `featurize`")
    p.add_argument("--out", required=True)
    p.add_argument("--copies", type=int, default=1)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("eval", parents=[common], help="score predicted metadata against references")
    p.add_argument("ref")
    p.add_argument("pred")
    p.add_argument("--group-by")
    p.add_argument("--manifest")
    p.add_argument("--average", choices=["macro", "micro"])
    p.add_argument("--json", help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rotations", parents=[common], help="print the 16 FOA rotation matrices")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_rotations)

    p = sub.add_parser("selfcheck", parents=[common], help="run the brute-force oracle suite")
    p.add_argument("--trials", type=int, default=1000)
    p.set_defaults(func=cmd_selfcheck)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        start = time.perf_counter()
        status = args.func(args, cfg)
        log.info("%s finished in %.2fs", args.command, time.perf_counter() - start)
        return status
    except (ConfigError, ValueError, OSError, RuntimeError) as exc:
        print(f"seldkit {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
