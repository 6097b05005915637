"""Multi-object tracker producing coarse dynamic/static box traces."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from ..types import BBox, wrap_angle
from .association import associate_exhaustive, associate_hierarchical
from .kalman import DEFAULT_NOISE, KalmanState, NoiseConfig, kf_predict, kf_update

DEFAULT_DT = 0.1


class TrackStatus(enum.Enum):
    TENTATIVE = "tentative"
    CONFIRMED = "confirmed"
    DEAD = "dead"


class MotionLabel(enum.Enum):
    COARSE_DYNAMIC = "dynamic"
    COARSE_STATIC = "static"


@dataclass(frozen=True)
class Detection:
    box: BBox
    instance_points: np.ndarray
    frame_index: int


@dataclass(frozen=True)
class HistoryEntry:
    frame_index: int
    box: BBox
    instance_points: np.ndarray | None = None


@dataclass
class Track:
    id: int
    state: KalmanState
    history: list[HistoryEntry] = field(default_factory=list)
    hits: int = 1
    streak: int = 1
    misses: int = 0
    status: TrackStatus = TrackStatus.TENTATIVE
    # running maximum over history pairs, kept so labelling stays cheap
    max_displacement: float = 0.0
    _buf: np.ndarray = field(default_factory=lambda: np.zeros((8, 5)), repr=False)

    def append(self, entry: HistoryEntry) -> None:
        if self.history and entry.frame_index <= self.history[-1].frame_index:
            raise ValueError("history frame indices must strictly increase")
        n = len(self.history)
        b = entry.box
        if n:
            d = np.sqrt(((self._buf[:n, :3] - b.center) ** 2).sum(axis=1)).max()
            self.max_displacement = max(self.max_displacement, float(d))
        if n == len(self._buf):
            self._buf = np.vstack([self._buf, np.zeros_like(self._buf)])
        self._buf[n] = (b.cx, b.cy, b.cz, max(b.l, b.w), 0.0)
        self.history.append(entry)

    @property
    def centers(self) -> np.ndarray:
        return self._buf[: len(self.history), :3].copy()

    @property
    def frames(self) -> list[int]:
        return [e.frame_index for e in self.history]

    def median_extent(self) -> float:
        return float(np.median(self._buf[: len(self.history), 3]))

    def motion_label(self, d_move: float, alpha: float) -> MotionLabel | None:
        if len(self.history) < 2:
            return None
        gate = max(d_move, alpha * self.median_extent())
        return MotionLabel.COARSE_DYNAMIC if self.max_displacement > gate else MotionLabel.COARSE_STATIC


def max_pairwise_distance(centers: np.ndarray) -> float:
    best = 0.0
    for i in range(len(centers) - 1):
        d = np.sqrt(((centers[i + 1:] - centers[i]) ** 2).sum(axis=1)).max()
        best = max(best, float(d))
    return best


def classify_track(track: Track, d_move: float = 0.75, alpha: float = 0.5) -> MotionLabel | None:
    """Coarse motion label from the largest displacement between any two history centres.

    The displacement must exceed ``max(d_move, alpha * max(l, w))`` of the
    median box to count as dynamic. Tracks with fewer than two entries return
    ``None``; callers treat that as static.
    """
    if len(track.history) < 2:
        return None
    dims = np.array([max(e.box.l, e.box.w) for e in track.history])
    gate = max(d_move, alpha * float(np.median(dims)))
    centers = np.array([e.box.center for e in track.history])
    moved = max_pairwise_distance(centers)
    return MotionLabel.COARSE_DYNAMIC if moved > gate else MotionLabel.COARSE_STATIC


@dataclass(frozen=True)
class TrackerConfig:
    associator: str = "hierarchical"
    k: int = 5
    cost_gate: float = 3.0
    min_hits: int = 2
    max_age: int = 3
    d_move: float = 0.75
    alpha: float = 0.5
    noise: NoiseConfig = DEFAULT_NOISE
    default_dt: float = DEFAULT_DT

    def __post_init__(self):
        if self.associator not in ("hierarchical", "exhaustive"):
            raise ValueError(f"unknown associator {self.associator!r}")
        if self.k < 1 or self.min_hits < 1 or self.max_age < 1:
            raise ValueError("k, min_hits and max_age must be >= 1")


def align_heading(measured: BBox, reference_theta: float) -> BBox:
    """Re-express ``measured`` with the heading closest to ``reference_theta``.

    A rectangle is unchanged by quarter turns if length and width swap, so
    the candidates are ``theta + j*pi/2``.
    """
    best, best_err = measured, math.inf
    for j in range(4):
        th = measured.theta + j * math.pi / 2
        err = abs(wrap_angle(th - reference_theta))
        if err < best_err - 1e-12:
            l, w = (measured.w, measured.l) if j % 2 else (measured.l, measured.w)
            best = BBox(measured.cx, measured.cy, measured.cz, th, l, w, measured.h)
            best_err = err
    return best


class Tracker:
    """Single-threaded tracking state machine; call :meth:`step` once per frame."""

    def __init__(self, config: TrackerConfig = TrackerConfig()):
        self.config = config
        self.live: list[Track] = []
        self.dead: list[Track] = []
        self._next_id = 0
        self._last_frame: int | None = None
        self._last_time: float | None = None
        self.n_cost_evals = 0

    @property
    def tracks(self) -> list[Track]:
        return self.dead + self.live

    def archive(self) -> list[Track]:
        """All tracks ever created, ordered by id."""
        return sorted(self.tracks, key=lambda t: t.id)

    def label_of(self, track: Track) -> MotionLabel:
        return track.motion_label(self.config.d_move, self.config.alpha) or MotionLabel.COARSE_STATIC

    def _dt(self, frame_index: int, timestamp: float | None) -> float:
        if self._last_frame is None:
            return self.config.default_dt
        if timestamp is not None and self._last_time is not None and timestamp > self._last_time:
            return timestamp - self._last_time
        return self.config.default_dt * (frame_index - self._last_frame)

    def step(self, frame_index: int, detections: Iterable[Detection | BBox],
             timestamp: float | None = None) -> list[int]:
        """Advance one frame; returns the track id assigned to each detection."""
        if self._last_frame is not None and frame_index <= self._last_frame:
            raise ValueError(f"frame {frame_index} arrived after frame {self._last_frame}")
        cfg = self.config
        dets = [d if isinstance(d, Detection) else Detection(d, None, frame_index) for d in detections]
        dt = self._dt(frame_index, timestamp)
        self._last_frame, self._last_time = frame_index, timestamp

        for t in self.live:
            t.state = kf_predict(t.state, dt, cfg.noise)

        boxes = np.array([d.box.to_array() for d in dets]).reshape(-1, 7)
        trk_boxes = np.array([t.state.box.to_array() for t in self.live]).reshape(-1, 7)
        ids = [t.id for t in self.live]
        if cfg.associator == "hierarchical":
            res = associate_hierarchical(boxes, trk_boxes, cfg.k, cfg.cost_gate, ids)
        else:
            res = associate_exhaustive(boxes, trk_boxes, cfg.cost_gate, ids)
        self.n_cost_evals += res.n_cost_evals

        by_id = {t.id: t for t in self.live}
        assigned = [-1] * len(dets)
        for di, tid, _ in res.matches:
            trk = by_id[tid]
            meas = align_heading(dets[di].box, trk.state.mean[3])
            trk.state = kf_update(trk.state, meas, cfg.noise)
            trk.append(HistoryEntry(frame_index, dets[di].box, dets[di].instance_points))
            trk.hits += 1
            trk.streak += 1
            trk.misses = 0
            if trk.status is TrackStatus.TENTATIVE and trk.streak >= cfg.min_hits:
                trk.status = TrackStatus.CONFIRMED
            assigned[di] = tid

        for tid in res.unmatched_tracks:
            trk = by_id[tid]
            trk.misses += 1
            trk.streak = 0
            if trk.misses >= cfg.max_age:
                trk.status = TrackStatus.DEAD

        for di in res.unmatched_detections:
            det = dets[di]
            trk = Track(self._next_id, KalmanState.from_box(det.box, cfg.noise))
            trk.append(HistoryEntry(frame_index, det.box, det.instance_points))
            if cfg.min_hits <= 1:
                trk.status = TrackStatus.CONFIRMED
            self._next_id += 1
            self.live.append(trk)
            assigned[di] = trk.id

        self.dead.extend(t for t in self.live if t.status is TrackStatus.DEAD)
        self.live = [t for t in self.live if t.status is not TrackStatus.DEAD]
        return assigned


def tracker_step(tracker: Tracker, frame_index: int, detections, timestamp=None) -> list[Track]:
    """Functional form of :meth:`Tracker.step`; returns the live tracks."""
    tracker.step(frame_index, detections, timestamp)
    return list(tracker.live)


def export_tracks_csv(tracks: Iterable[Track], path, d_move: float = 0.75, alpha: float = 0.5) -> None:
    """One row per history entry: frame, track id, box 7-tuple, status, coarse label."""
    rows = []
    for t in tracks:
        lab = t.motion_label(d_move, alpha)
        for e in t.history:
            rows.append((e.frame_index, t.id, *(f"{v:.6f}" for v in e.box.to_array()),
                         t.status.value, lab.value if lab else "unknown"))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_index", "track_id", "cx", "cy", "cz", "theta", "l", "w", "h", "status", "motion_label"])
        w.writerows(rows)
