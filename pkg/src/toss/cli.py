"""Command-line entry points: run, eval, bench-assoc, generate, inspect.

Data goes to files or stdout, diagnostics to stderr. Exit codes: 0 ok,
1 error, 2 usage. ``TOSS_LOG_LEVEL`` sets the log verbosity (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import secrets
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config
from .io_datasets import (
    ClassTable,
    DatasetError,
    encode_output_labels,
    open_sequence,
    read_labels,
    write_labels,
)
from .pipeline import PipelineError, map_from_labels, reference_map, run_sequence
from .static_map import EvalReport, evaluate
from .types import PointLabel, transform_points

log = logging.getLogger("toss")

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2
LOG_ENV = "TOSS_LOG_LEVEL"


class CliError(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def _seed(args) -> int:
    if args.seed is None:
        args.seed = secrets.randbelow(2**32)
        print(f"toss: no --seed given, using --seed {args.seed}", file=sys.stderr)
    return args.seed


def _table(path) -> ClassTable:
    return ClassTable.load(path)


# ---------------------------------------------------------------- run

def cmd_run(args) -> int:
    cfg = load_config(args.config).with_overrides(
        associator=args.associator, refine=False if args.no_refine else None)
    if args.mode:
        cfg = dataclasses.replace(cfg, refine=dataclasses.replace(cfg.refine, mode=args.mode))
    source = open_sequence(args.input)
    out = Path(args.output)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    counts = np.zeros(len(PointLabel), dtype=np.int64)
    n_points = 0

    def sink(ordinal, frame_id, labels):
        nonlocal n_points
        write_labels(out / "labels" / f"{frame_id:06d}.label", encode_output_labels(labels))
        counts[:] += np.bincount(labels.astype(np.int64), minlength=len(PointLabel))
        n_points += len(labels)
        if (ordinal + 1) % 50 == 0:
            log.info("finalised %d frames", ordinal + 1)

    result = run_sequence(source, cfg, sink=sink, keep_labels=False)
    result.map.write_ply(out / "map.ply")
    result.timings.write_csv(out / "timings.csv")

    lines = [
        f"frames={result.n_frames}",
        f"points={n_points}",
        f"associator={cfg.tracking.associator}",
        f"refinement={'on' if cfg.refine.enabled else 'off'}",
        f"refinement_mode={cfg.refine.mode}",
        f"tracks={len(result.tracker.tracks)}",
    ]
    lines += [f"{lab.name.lower()}_points={int(counts[lab])}" for lab in PointLabel]
    lines.append(f"map_voxels={len(result.map)}")
    lines.append(f"voxel_size={cfg.voxel_size:g}")
    text = "\n".join(lines) + "\n"
    if source.has_labels and result.n_frames:
        table = _table(cfg.movable_classes)
        ref = reference_map(_truth_frames(source), table, cfg.voxel_size)
        report = evaluate(result.map, ref)
        text += report.to_text()
        _warn_undefined(report)
    (out / "report.txt").write_text(text)
    summ = result.timings.summary()
    if summ:
        med, p95 = summ["total"]
        print(f"toss run: {result.n_frames} frames, median {med * 1e3:.1f} ms/frame, p95 {p95 * 1e3:.1f} ms",
              file=sys.stderr)
    sys.stdout.write(text)
    return EXIT_OK


def _truth_frames(source):
    for i, (scan, pose) in enumerate(source.frames()):
        yield scan, pose, source.labels(i, len(scan))


def _warn_undefined(report: EvalReport) -> None:
    if report.pr is None:
        print("toss: warning: PR undefined (no static voxels in the reference)", file=sys.stderr)
    if report.rr is None:
        print("toss: warning: RR undefined (no dynamic voxels in the reference)", file=sys.stderr)


# ---------------------------------------------------------------- eval

def _label_files(pred: Path) -> list[Path]:
    d = pred / "labels" if (pred / "labels").is_dir() else pred
    files = sorted(d.glob("*.label"))
    if not files:
        raise CliError(f"{pred}: no .label files found")
    return files


def cmd_eval(args) -> int:
    truth = open_sequence(args.truth, require_labels=True)
    pred_files = _label_files(Path(args.pred))
    if len(pred_files) != len(truth):
        raise CliError(f"frame count mismatch: {len(pred_files)} predicted vs {len(truth)} truth frames")
    table = _table(args.movable_classes)

    def predicted():
        for i, (scan, pose) in enumerate(truth.frames()):
            yield scan, pose, read_labels(pred_files[i], len(scan))

    built = map_from_labels(predicted(), table, args.voxel_size)
    ref = reference_map(_truth_frames(truth), table, args.voxel_size)
    report = evaluate(built, ref)
    sys.stdout.write(report.table())
    _warn_undefined(report)
    return EXIT_OK


# ---------------------------------------------------------------- bench-assoc

def random_boxes(rng: np.random.Generator, n: int, extent: float) -> np.ndarray:
    """Upright boxes with uniform centres in a square and pedestrian-to-car sizes."""
    out = np.empty((n, 7))
    out[:, 0:2] = rng.uniform(0.0, extent, (n, 2))
    out[:, 2] = rng.uniform(-0.5, 0.5, n)
    out[:, 3] = rng.uniform(-np.pi, np.pi, n)
    out[:, 4] = rng.uniform(0.5, 5.0, n)
    out[:, 5] = rng.uniform(0.5, 2.5, n)
    out[:, 6] = rng.uniform(1.0, 2.5, n)
    return out


def bench_frame(rng: np.random.Generator, n: int, m: int, extent: float) -> tuple[np.ndarray, np.ndarray]:
    """Tracks plus detections that perturb the first ``min(n, m)`` of them."""
    tracks = random_boxes(rng, m, extent)
    dets = random_boxes(rng, n, extent)
    shared = min(n, m)
    dets[:shared] = tracks[:shared]
    dets[:shared, :3] += rng.normal(0.0, 0.2, (shared, 3))
    dets[:shared, 3] += rng.normal(0.0, 0.05, shared)
    return dets, tracks


def cmd_bench(args) -> int:
    from .tracking.association import associate_exhaustive, associate_hierarchical

    seed = _seed(args)
    n, m, k, trials = args.n_detections, args.n_tracks, args.k, args.trials
    if min(n, m, k, trials) < 1:
        raise CliError("--n-detections, --n-tracks, --k and --trials must be >= 1")
    extent = args.extent if args.extent is not None else 10.0 * np.sqrt(max(n, m))
    rows, t_ex, t_hi = [], [], []
    for trial in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(trial,)))
        dets, tracks = bench_frame(rng, n, m, extent)
        t0 = time.perf_counter()
        ex = associate_exhaustive(dets, tracks, args.cost_gate)
        t1 = time.perf_counter()
        hi = associate_hierarchical(dets, tracks, k, args.cost_gate)
        t2 = time.perf_counter()
        t_ex.append(t1 - t0)
        t_hi.append(t2 - t1)
        rows.append([trial, n, m, k, ex.n_cost_evals, hi.n_cost_evals, len(ex.matches), len(hi.matches),
                     int(ex.match_set() == hi.match_set())])
    header = ["trial", "n_detections", "n_tracks", "k", "evals_exhaustive", "evals_hierarchical",
              "matches_exhaustive", "matches_hierarchical", "same_matches"]
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    if args.timings_csv:
        with open(args.timings_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial", "seconds_exhaustive", "seconds_hierarchical"])
            for i, (a, b) in enumerate(zip(t_ex, t_hi)):
                w.writerow([i, f"{a:.6f}", f"{b:.6f}"])
    mean_ex, mean_hi = float(np.mean(t_ex)), float(np.mean(t_hi))
    print(f"seed={seed}")
    print(f"n_detections={n} n_tracks={m} k={k} trials={trials}")
    print(f"evals_exhaustive={rows[0][4]} evals_hierarchical={rows[0][5]}")
    print(f"same_matches={sum(r[-1] for r in rows)}/{trials}")
    # timings last so the lines above can be compared verbatim across runs
    print(f"mean_seconds_exhaustive={mean_ex:.6f} mean_seconds_hierarchical={mean_hi:.6f} "
          f"speedup={mean_ex / max(mean_hi, 1e-12):.1f}")
    return EXIT_OK


# ---------------------------------------------------------------- generate

def cmd_generate(args) -> int:
    from .synthetic import SCENES, generate, scene

    if args.list:
        print("\n".join(sorted(SCENES)))
        return EXIT_OK
    if not args.scene or not args.output:
        raise CliError("generate needs --scene and --output (or --list)")
    seed = _seed(args)
    kwargs = {"seed": seed}
    if args.frames is not None:
        kwargs["n_frames"] = args.frames
    if args.noise is not None:
        kwargs["noise"] = args.noise
    try:
        spec = scene(args.scene, **kwargs)
    except KeyError as exc:
        raise CliError(exc.args[0]) from None
    seq = generate(spec)
    root = seq.write(args.output)
    print(f"{root}: scene={spec.name} frames={len(seq)} seed={seed}")
    return EXIT_OK


# ---------------------------------------------------------------- inspect

def cmd_inspect(args) -> int:
    from .segmentation import segment_scan
    from .tracking.boxes import fit_box

    source = open_sequence(args.input)
    n = len(source)
    print(f"sequence={Path(args.input)}")
    print(f"frames={n}")
    print(f"labels={'yes' if source.has_labels else 'no'}")
    print(f"timestamps={'yes' if source.times is not None else 'no'}")
    if n:
        t = np.array([p.translation for p in source.poses])
        print(f"trajectory_length_m={float(np.linalg.norm(np.diff(t, axis=0), axis=1).sum()):.3f}")
    if args.frame is not None:
        if not 0 <= args.frame < n:
            raise CliError(f"--frame {args.frame} out of range [0, {n})")
        cfg = load_config(args.config)
        scan = source.scan(args.frame)
        image, seg = segment_scan(scan, cfg.projection, cfg.ground, cfg.cluster)
        print(f"frame={scan.frame_index} points={len(scan)} in_image={int(image.valid.sum())}")
        print(f"ground_points={len(seg.ground_indices)} instances={len(seg.instances)}")
        pose = source.poses[args.frame]
        for i, inst in enumerate(seg.instances):
            b = fit_box(transform_points(scan.points[inst], pose))
            print(f"instance {i}: points={len(inst)} center=({b.cx:.2f},{b.cy:.2f},{b.cz:.2f}) "
                  f"size=({b.l:.2f},{b.w:.2f},{b.h:.2f}) theta={b.theta:.3f}")
        if source.has_labels:
            table = _table(cfg.movable_classes)
            gt = source.labels(args.frame, len(scan))
            print(f"truth_dynamic_points={int(table.is_dynamic(gt).sum())}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="toss", description="LiDAR moving-object segmentation and static mapping.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="label a KITTI-format sequence and build the static map")
    r.add_argument("--config", help="pipeline YAML (default: shipped config)")
    r.add_argument("--input", required=True, help="sequence directory")
    r.add_argument("--output", required=True, help="output directory")
    r.add_argument("--associator", choices=("hierarchical", "exhaustive"))
    r.add_argument("--no-refine", action="store_true", help="keep the tracker's coarse labels")
    r.add_argument("--mode", choices=("online", "offline"), help="override the refinement mode")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="PR/RR/F1 of predicted labels against ground truth")
    e.add_argument("--pred", required=True, help="run output directory or directory of .label files")
    e.add_argument("--truth", required=True, help="sequence directory with labels/")
    e.add_argument("--voxel-size", type=float, default=0.2)
    e.add_argument("--movable-classes", help="class table YAML (default: shipped table)")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench-assoc", help="time exhaustive vs hierarchical association")
    b.add_argument("--n-detections", type=int, default=1000)
    b.add_argument("--n-tracks", type=int, default=1000)
    b.add_argument("--k", type=int, default=5)
    b.add_argument("--trials", type=int, default=10)
    b.add_argument("--seed", type=int)
    b.add_argument("--extent", type=float, help="side of the square holding box centres (m)")
    b.add_argument("--cost-gate", type=float, default=float("inf"))
    b.add_argument("--csv", help="write per-trial counts and match agreement")
    b.add_argument("--timings-csv", help="write per-trial wall times")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("generate", help="write a synthetic scene as a KITTI-format sequence")
    g.add_argument("--scene")
    g.add_argument("--output")
    g.add_argument("--seed", type=int)
    g.add_argument("--frames", type=int)
    g.add_argument("--noise", type=float, help="range noise sigma (m)")
    g.add_argument("--list", action="store_true", help="list scene names")
    g.set_defaults(func=cmd_generate)

    i = sub.add_parser("inspect", help="summarise a sequence, optionally one frame's segmentation")
    i.add_argument("--input", required=True)
    i.add_argument("--frame", type=int)
    i.add_argument("--config")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, DatasetError, PipelineError) as exc:
        print(f"toss {args.command}: error: {exc}", file=sys.stderr)
    except OSError as exc:
        where = f"{exc.filename}: " if exc.filename else ""
        print(f"toss {args.command}: error: {where}{exc.strerror or exc}", file=sys.stderr)
    except ValueError as exc:
        print(f"toss {args.command}: error: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
