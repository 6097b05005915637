"""End-to-end flow: segmentation, box fitting, tracking, refinement, static map.

In online mode frame ``t`` is labelled and inserted into the map once frame
``t + tau_d`` has been tracked, which is the look-ahead the dynamic vote
needs. Only the points of those pending frames are held in memory; the trace
index keeps one centre per archived box.
"""

from __future__ import annotations

import csv
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from .config import PipelineConfig
from .ds_voting import TraceIndex, vote
from .io_datasets import ClassTable, prefetch
from .segmentation import segment_scan
from .static_map import EvalReport, VoxelMap, evaluate
from .tracking.boxes import fit_box
from .tracking.tracker import Detection, MotionLabel, Tracker
from .types import PointLabel, Pose, Scan, transform_points

log = logging.getLogger(__name__)

STAGES = ("read", "segment", "boxes", "track", "refine_map")


class PipelineError(RuntimeError):
    def __init__(self, frame, cause: BaseException):
        super().__init__(f"frame {frame}: {cause}")
        self.frame = frame


@dataclass
class TimingReport:
    """Wall time per stage and frame, from a monotonic clock."""

    frames: list[int] = field(default_factory=list)
    seconds: list[list[float]] = field(default_factory=list)

    def add(self, frame: int, row: dict[str, float]) -> None:
        self.frames.append(frame)
        self.seconds.append([row.get(s, 0.0) for s in STAGES])

    def __len__(self) -> int:
        return len(self.frames)

    def table(self) -> np.ndarray:
        return np.asarray(self.seconds, dtype=float).reshape(-1, len(STAGES))

    def summary(self) -> dict[str, tuple[float, float]]:
        """``stage -> (median, p95)`` seconds per frame, including ``total``."""
        t = self.table()
        if len(t) == 0:
            return {}
        cols = {s: t[:, i] for i, s in enumerate(STAGES)}
        cols["total"] = t.sum(axis=1)
        return {k: (float(np.median(v)), float(np.percentile(v, 95))) for k, v in cols.items()}

    def write_csv(self, path) -> None:
        t = self.table()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", *STAGES, "total"])
            for f, row in zip(self.frames, t.tolist()):
                w.writerow([f, *(f"{v:.6f}" for v in row), f"{sum(row):.6f}"])
            summ = self.summary()
            for j, name in enumerate(("median", "p95")):
                if summ:
                    w.writerow([name, *(f"{summ[s][j]:.6f}" for s in (*STAGES, "total"))])


@dataclass
class _Pending:
    ordinal: int
    frame_id: int
    points: np.ndarray
    pose: Pose
    ground: np.ndarray
    instances: list[np.ndarray]
    track_ids: list[int]
    centers: np.ndarray


@dataclass
class PipelineResult:
    map: VoxelMap
    labels: list[np.ndarray]
    frame_ids: list[int]
    timings: TimingReport
    tracker: Tracker
    # (ordinal frame, track id) -> label given to that box
    box_labels: dict[tuple[int, int], PointLabel] = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.frame_ids)


def _frames(source) -> Iterator[tuple[Scan, Pose]]:
    if hasattr(source, "frames"):
        return iter(source.frames())
    return iter(source)


class _Run:
    def __init__(self, cfg: PipelineConfig, sink, keep_labels: bool):
        self.cfg = cfg
        self.tracker = Tracker(cfg.tracking)
        self.index = TraceIndex(cfg.refine.vote.tau)
        self.map = VoxelMap(cfg.voxel_size)
        self.sink = sink
        self.keep = keep_labels
        self.labels: list[np.ndarray] = []
        self.frame_ids: list[int] = []
        self.box_labels: dict[tuple[int, int], PointLabel] = {}
        self.timings = TimingReport()

    def observe(self, ordinal: int, scan: Scan, pose: Pose) -> _Pending:
        cfg = self.cfg
        t0 = time.perf_counter()
        _, seg = segment_scan(scan, cfg.projection, cfg.ground, cfg.cluster)
        t1 = time.perf_counter()
        dets, centers = [], []
        for inst in seg.instances:
            box = fit_box(transform_points(scan.points[inst], pose))
            dets.append(Detection(box, None, ordinal))
            centers.append(box.center)
        t2 = time.perf_counter()
        ids = self.tracker.step(ordinal, dets, scan.timestamp)
        for tid, c in zip(ids, centers):
            self.index.add(ordinal, tid, c)
        t3 = time.perf_counter()
        times = dict(segment=t1 - t0, boxes=t2 - t1, track=t3 - t2)
        return _Pending(ordinal, scan.frame_index, scan.points, pose, seg.ground_indices, seg.instances, ids,
                        np.asarray(centers, dtype=float).reshape(-1, 3)), times

    def coarse(self, track_id: int) -> PointLabel:
        lab = self.tracker.label_of(self._track(track_id))
        return PointLabel.DYNAMIC if lab is MotionLabel.COARSE_DYNAMIC else PointLabel.STATIC

    def _track(self, track_id: int):
        return self._by_id[track_id]

    def refresh_labels(self, everything: bool = False) -> None:
        """Push current coarse labels into the trace index (dead tracks are frozen)."""
        self._by_id = {t.id: t for t in self.tracker.tracks}
        for t in (self.tracker.tracks if everything else self.tracker.live):
            self.index.set_label(t.id, self.tracker.label_of(t))

    def box_label(self, p: _Pending, k: int, last: int) -> PointLabel:
        rc = self.cfg.refine
        if not rc.enabled:
            return self.coarse(p.track_ids[k])
        return vote(p.centers[k], p.ordinal, self.index, rc.vote, last, rc.cold_start_static)

    def finalize(self, p: _Pending, last: int) -> None:
        labels = np.full(len(p.points), PointLabel.UNKNOWN, dtype=np.int8)
        labels[p.ground] = PointLabel.GROUND
        static = [p.ground]
        for k, inst in enumerate(p.instances):
            lab = self.box_label(p, k, last)
            self.box_labels[(p.ordinal, p.track_ids[k])] = lab
            labels[inst] = lab
            if lab is PointLabel.STATIC:
                static.append(inst)
        keep = np.concatenate(static) if static else np.zeros(0, np.int64)
        self.map.insert_frame(p.points[keep], np.zeros((0, 3)), p.pose)
        if self.sink is not None:
            self.sink(p.ordinal, p.frame_id, labels)
        if self.keep:
            self.labels.append(labels)
        self.frame_ids.append(p.frame_id)


def run_sequence(source, cfg: PipelineConfig = PipelineConfig(),
                 sink: Callable[[int, int, np.ndarray], None] | None = None,
                 keep_labels: bool = True) -> PipelineResult:
    """Label every point of every frame and build the static map.

    ``source`` is a :class:`~toss.io_datasets.SequenceSource`, anything with a
    ``frames()`` method, or an iterable of ``(Scan, Pose)``. ``sink`` receives
    ``(ordinal, frame id, labels)`` as each frame is finalised.
    """
    run = _Run(cfg, sink, keep_labels)
    if cfg.refine.mode == "offline":
        _offline(run, source)
    else:
        _online(run, source)
    return PipelineResult(run.map, run.labels, run.frame_ids, run.timings, run.tracker, run.box_labels)


def _timed_frames(source, capacity: int) -> Iterator[tuple[Scan, Pose, float]]:
    it = prefetch(_frames(source), capacity)
    while True:
        t0 = time.perf_counter()
        try:
            scan, pose = next(it)
        except StopIteration:
            return
        yield scan, pose, time.perf_counter() - t0


def _online(run: _Run, source) -> None:
    lag = run.cfg.refine.vote.tau_d
    pending: deque[_Pending] = deque()
    ordinal = -1
    for ordinal, (scan, pose, t_read) in enumerate(_timed_frames(source, run.cfg.prefetch)):
        try:
            p, times = run.observe(ordinal, scan, pose)
            pending.append(p)
            t0 = time.perf_counter()
            run.refresh_labels()
            if ordinal - pending[0].ordinal >= lag:
                run.finalize(pending.popleft(), ordinal)
            times.update(read=t_read, refine_map=time.perf_counter() - t0)
        except Exception as exc:
            raise PipelineError(scan.frame_index, exc) from exc
        run.timings.add(scan.frame_index, times)
    while pending:
        p = pending.popleft()
        try:
            run.finalize(p, ordinal)
        except Exception as exc:
            raise PipelineError(p.frame_id, exc) from exc


def _offline(run: _Run, source) -> None:
    """Track the whole sequence first, then label and map in a second pass."""
    observed = []
    ordinal = -1
    for ordinal, (scan, pose, t_read) in enumerate(_timed_frames(source, run.cfg.prefetch)):
        try:
            p, times = run.observe(ordinal, scan, pose)
        except Exception as exc:
            raise PipelineError(scan.frame_index, exc) from exc
        p.points = None  # re-read in the second pass
        observed.append(p)
        run.timings.add(scan.frame_index, dict(times, read=t_read))
    if ordinal < 0:
        return
    run.refresh_labels(everything=True)
    for p, (scan, pose) in zip(observed, _frames(source)):
        t0 = time.perf_counter()
        p.points = scan.points
        try:
            run.finalize(p, ordinal)
        except Exception as exc:
            raise PipelineError(p.frame_id, exc) from exc
        run.timings.seconds[p.ordinal][STAGES.index("refine_map")] = time.perf_counter() - t0


# ---------------------------------------------------------------- evaluation

def reference_map(frames: Iterable[tuple[Scan, Pose, np.ndarray]], table: ClassTable, voxel_size: float) -> VoxelMap:
    """Naively accumulated map carrying ground-truth dynamic tallies."""
    ref = VoxelMap(voxel_size)
    for scan, pose, gt in frames:
        keep = ~table.is_ignored(gt)
        ref.insert(transform_points(scan.points[keep], pose), table.is_dynamic(gt)[keep])
    return ref


def map_from_labels(frames: Iterable[tuple[Scan, Pose, np.ndarray]], table: ClassTable, voxel_size: float) -> VoxelMap:
    """Map of the points whose (predicted) class is neither dynamic nor ignored."""
    built = VoxelMap(voxel_size)
    for scan, pose, pred in frames:
        keep = ~table.is_dynamic(pred) & ~table.is_ignored(pred)
        built.insert(transform_points(scan.points[keep], pose))
    return built


def evaluate_run(result: PipelineResult, source, table: ClassTable | None = None) -> EvalReport:
    """PR/RR of a run's map against the source's ground-truth labels."""
    table = table or ClassTable.load()
    ref = reference_map(_with_truth(source), table, result.map.voxel_size)
    return evaluate(result.map, ref)


def _with_truth(source) -> Iterator[tuple[Scan, Pose, np.ndarray]]:
    if hasattr(source, "label_paths"):
        for i, (scan, pose) in enumerate(source.frames()):
            yield scan, pose, source.labels(i, len(scan))
    else:
        yield from zip(source.scans, source.poses, source.labels)
