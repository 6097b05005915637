"""Spatio-temporal voting that refines coarse track labels.

A box at frame ``t`` is compared with archived trace centres. Dynamic
evidence is the number of coarse-dynamic centres within ``tau`` in the frames
``t-tau_d .. t+tau_d``; static evidence is the number of centres (any label)
within ``tau`` in frames at least ``tau_s`` away from ``t``. The box is static
only when static evidence strictly wins.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .tracking.tracker import MotionLabel, Track
from .types import PointLabel


@dataclass(frozen=True)
class VoteConfig:
    tau: float = 1.0
    tau_d: int = 5
    tau_s: int = 50
    n_frames: int | None = None

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 < self.tau_d < self.tau_s:
            raise ValueError("need 0 < tau_d < tau_s")
        if self.n_frames is not None and self.tau_s >= self.n_frames:
            raise ValueError("need tau_s < n_frames")


def proximity_flag(c, c_track, tau: float) -> int:
    d = np.asarray(c, dtype=float) - np.asarray(c_track, dtype=float)
    return int(math.sqrt(float(d @ d)) < tau)


class TraceIndex:
    """Archived trace centres, bucketed by frame and hashed on a 2D grid.

    Each entry carries ``(frame, track id, centre)``; coarse motion labels are
    held per track and looked up at query time, so a track relabelled later is
    seen with its current label.
    """

    def __init__(self, cell: float, labels: Mapping[int, MotionLabel | None] | None = None):
        self.cell = float(cell)
        self._dynamic: set[int] = set()
        for tid, lab in (labels or {}).items():
            self.set_label(tid, lab)
        self._grid: dict[tuple[int, int], list[int]] = defaultdict(list)
        self._frames: dict[int, list[int]] = defaultdict(list)
        self._n = 0
        self._centers = np.zeros((64, 3))
        self._frame_of = np.zeros(64, dtype=np.int64)
        self._track_of = np.zeros(64, dtype=np.int64)

    def __len__(self):
        return self._n

    def add(self, frame: int, track_id: int, center) -> None:
        i = self._n
        if i == len(self._frame_of):
            self._centers = np.vstack([self._centers, np.zeros_like(self._centers)])
            self._frame_of = np.concatenate([self._frame_of, np.zeros_like(self._frame_of)])
            self._track_of = np.concatenate([self._track_of, np.zeros_like(self._track_of)])
        self._centers[i] = center
        self._frame_of[i] = frame
        self._track_of[i] = track_id
        self._grid[self._key(self._centers[i])].append(i)
        self._frames[int(frame)].append(i)
        self._n += 1

    def set_label(self, track_id: int, label: MotionLabel | None) -> None:
        if label is MotionLabel.COARSE_DYNAMIC:
            self._dynamic.add(int(track_id))
        else:
            self._dynamic.discard(int(track_id))

    def is_dynamic(self, track_id: int) -> bool:
        return track_id in self._dynamic

    @property
    def dynamic_tracks(self) -> frozenset[int]:
        return frozenset(self._dynamic)

    @classmethod
    def from_tracks(cls, tracks: Iterable[Track], cell: float,
                    labels: Mapping[int, MotionLabel | None] | None = None) -> TraceIndex:
        idx = cls(cell, labels)
        for t in sorted(tracks, key=lambda t: t.id):
            for e in t.history:
                idx.add(e.frame_index, t.id, e.box.center)
        return idx

    def _key(self, c) -> tuple[int, int]:
        return (math.floor(float(c[0]) / self.cell), math.floor(float(c[1]) / self.cell))

    def frame_entries(self, frame: int) -> list[int]:
        return list(self._frames.get(frame, ()))

    def entry(self, i: int) -> tuple[int, int, np.ndarray]:
        """``(frame, track id, centre)`` of entry ``i``."""
        return int(self._frame_of[i]), int(self._track_of[i]), self._centers[i].copy()

    def near(self, center, tau: float):
        """Entries strictly within ``tau`` of ``center``: ``(frames, track_ids)``."""
        kx, ky = self._key(center)
        r = max(1, math.ceil(tau / self.cell))
        cand: list[int] = []
        for dx in range(-r, r + 1):
            for dy in range(-r, r + 1):
                cand.extend(self._grid.get((kx + dx, ky + dy), ()))
        if not cand:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        cand_a = np.array(cand, dtype=np.int64)
        d = self._centers[cand_a] - np.asarray(center, dtype=float)
        hit = cand_a[np.sqrt((d * d).sum(axis=1)) < tau]
        return self._frame_of[hit], self._track_of[hit]


def _frame_bounds(cfg: VoteConfig, last_frame: int | None) -> tuple[int, int]:
    if last_frame is not None:
        return 0, last_frame
    if cfg.n_frames is None:
        raise ValueError("n_frames or last_frame is required")
    return 0, cfg.n_frames - 1


def count_dynamic(box_center, t: int, index: TraceIndex, cfg: VoteConfig,
                  last_frame: int | None = None) -> int:
    lo, hi = _frame_bounds(cfg, last_frame)
    frames, tracks = index.near(box_center, cfg.tau)
    in_win = (frames >= max(lo, t - cfg.tau_d)) & (frames <= min(hi, t + cfg.tau_d))
    if not in_win.any():
        return 0
    return sum(1 for tid in tracks[in_win].tolist() if index.is_dynamic(tid))


def count_static(box_center, t: int, index: TraceIndex, cfg: VoteConfig,
                 last_frame: int | None = None) -> int:
    lo, hi = _frame_bounds(cfg, last_frame)
    frames, _ = index.near(box_center, cfg.tau)
    ok = (frames >= lo) & (frames <= hi) & (np.abs(frames - t) >= cfg.tau_s)
    return int(ok.sum())


def distant_window_empty(t: int, cfg: VoteConfig, last_frame: int | None = None) -> bool:
    lo, hi = _frame_bounds(cfg, last_frame)
    return t - cfg.tau_s < lo and t + cfg.tau_s > hi


def decide(n_dyn: int, n_stat: int) -> PointLabel:
    return PointLabel.STATIC if n_dyn < n_stat else PointLabel.DYNAMIC


def vote(box_center, t: int, index: TraceIndex, cfg: VoteConfig,
         last_frame: int | None = None, cold_start_static: bool = False) -> PointLabel:
    """Refined label of one box.

    With ``cold_start_static`` a box with no dynamic evidence stays Static
    when no frame at distance ``tau_s`` exists yet, instead of falling to
    Dynamic on the empty 0/0 tie.
    """
    n_dyn = count_dynamic(box_center, t, index, cfg, last_frame)
    if cold_start_static and n_dyn == 0 and distant_window_empty(t, cfg, last_frame):
        return PointLabel.STATIC
    n_stat = count_static(box_center, t, index, cfg, last_frame)
    return decide(n_dyn, n_stat)


def track_labels(tracks: Iterable[Track], d_move: float = 0.75, alpha: float = 0.5) -> dict[int, MotionLabel | None]:
    return {t.id: t.motion_label(d_move, alpha) for t in tracks}


def refine_sequence(tracks: Iterable[Track], cfg: VoteConfig, labels: Mapping[int, MotionLabel | None] | None = None,
                    d_move: float = 0.75, alpha: float = 0.5,
                    cold_start_static: bool = False) -> dict[tuple[int, int], PointLabel]:
    """Refined label for every archived box, keyed by ``(frame, track id)``.

    Requires the whole sequence to be tracked; ``cfg.n_frames`` bounds the
    temporal windows (defaults to one past the last archived frame).
    """
    tracks = sorted(tracks, key=lambda t: t.id)
    if labels is None:
        labels = track_labels(tracks, d_move, alpha)
    index = TraceIndex.from_tracks(tracks, cfg.tau, labels)
    last = cfg.n_frames - 1 if cfg.n_frames is not None else max(
        (e.frame_index for t in tracks for e in t.history), default=0)
    out: dict[tuple[int, int], PointLabel] = {}
    for t in tracks:
        for e in t.history:
            out[(e.frame_index, t.id)] = vote(e.box.center, e.frame_index, index, cfg, last, cold_start_static)
    return out


def export_refined_csv(labels: Mapping[tuple[int, int], PointLabel], path) -> None:
    """Rows of ``frame, track_id, refined_label`` sorted by frame then track."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "track_id", "refined_label"])
        for (f, tid), lab in sorted(labels.items()):
            w.writerow([f, tid, lab.name.lower()])
