"""Detection-to-trace association.

Both associators share the same cost and the same conflict rule (repeatedly
take the globally cheapest remaining pair). They differ only in which pairs
are evaluated: every pair, or each detection's ``k`` nearest traces by
centre distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from ..types import BBox, boxes_to_array
from .boxes import BoxGeometry, pair_costs


@dataclass
class AssociationResult:
    matches: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_detections: list[int] = field(default_factory=list)
    unmatched_tracks: list[int] = field(default_factory=list)
    n_cost_evals: int = 0

    def match_set(self) -> set[tuple[int, int]]:
        return {(d, t) for d, t, _ in self.matches}


def _as_geometry(boxes) -> BoxGeometry:
    if isinstance(boxes, BoxGeometry):
        return boxes
    if isinstance(boxes, np.ndarray):
        return BoxGeometry(boxes)
    return BoxGeometry(boxes_to_array(boxes))


def _track_ids(n: int, track_ids) -> list[int]:
    if track_ids is None:
        return list(range(n))
    ids = [int(t) for t in track_ids]
    if len(ids) != n:
        raise ValueError("track_ids length does not match tracks")
    return ids


def greedy_match(det_idx, trk_idx, costs, n_det: int, n_trk: int, cost_gate: float):
    """Lowest-cost-first greedy matching over a sparse list of candidate pairs.

    Ties are broken by detection index, then track position, so the outcome is
    a pure function of the candidate set. Returns ``(det, trk_pos, cost)``.
    """
    det_idx = np.asarray(det_idx, dtype=np.int64)
    trk_idx = np.asarray(trk_idx, dtype=np.int64)
    costs = np.asarray(costs, dtype=float)
    ok = costs <= cost_gate
    det_idx, trk_idx, costs = det_idx[ok], trk_idx[ok], costs[ok]
    order = np.lexsort((trk_idx, det_idx, costs))
    used_d = np.zeros(n_det, dtype=bool)
    used_t = np.zeros(n_trk, dtype=bool)
    limit = min(n_det, n_trk)
    out = []
    for d, t, c in zip(det_idx[order].tolist(), trk_idx[order].tolist(), costs[order].tolist()):
        if used_d[d] or used_t[t]:
            continue
        used_d[d] = used_t[t] = True
        out.append((d, t, c))
        if len(out) == limit:
            break
    return out


def _result(matches, n_det, ids, n_evals) -> AssociationResult:
    md = {d for d, _, _ in matches}
    mt = {t for _, t, _ in matches}
    return AssociationResult(
        matches=[(d, ids[t], c) for d, t, c in sorted(matches)],
        unmatched_detections=[i for i in range(n_det) if i not in md],
        unmatched_tracks=[ids[j] for j in range(len(ids)) if j not in mt],
        n_cost_evals=n_evals,
    )


def associate_exhaustive(detections: Sequence[BBox] | np.ndarray, tracks: Sequence[BBox] | np.ndarray,
                         cost_gate: float = math.inf, track_ids=None) -> AssociationResult:
    """Evaluate the full detection x trace cost matrix, then match greedily."""
    gd, gt = _as_geometry(detections), _as_geometry(tracks)
    n, m = len(gd), len(gt)
    ids = _track_ids(m, track_ids)
    if n == 0 or m == 0:
        return _result([], n, ids, 0)
    di = np.repeat(np.arange(n), m)
    ti = np.tile(np.arange(m), n)
    total = np.empty(n * m)
    # chunk to bound the temporary arrays of the polygon clipper
    step = 1 << 18
    for s in range(0, n * m, step):
        total[s:s + step] = pair_costs(gd, di[s:s + step], gt, ti[s:s + step])[0]
    matches = greedy_match(di, ti, total, n, m, cost_gate)
    return _result(matches, n, ids, n * m)


def nearest_tracks(det_centers: np.ndarray, trk_centers: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``min(k, M)`` nearest trace centres for every detection."""
    m = len(trk_centers)
    kk = min(k, m)
    tree = cKDTree(trk_centers)
    _, nn = tree.query(det_centers, k=kk)
    return np.asarray(nn, dtype=np.int64).reshape(len(det_centers), kk)


def associate_hierarchical(detections: Sequence[BBox] | np.ndarray, tracks: Sequence[BBox] | np.ndarray,
                           k: int = 5, cost_gate: float = math.inf, track_ids=None) -> AssociationResult:
    """Evaluate costs only against each detection's ``k`` nearest traces."""
    if k < 1:
        raise ValueError("k must be >= 1")
    gd, gt = _as_geometry(detections), _as_geometry(tracks)
    n, m = len(gd), len(gt)
    ids = _track_ids(m, track_ids)
    if n == 0 or m == 0:
        return _result([], n, ids, 0)
    nn = nearest_tracks(gd.boxes[:, :3], gt.boxes[:, :3], k)
    kk = nn.shape[1]
    di = np.repeat(np.arange(n), kk)
    ti = nn.ravel()
    total = pair_costs(gd, di, gt, ti)[0]
    matches = greedy_match(di, ti, total, n, m, cost_gate)
    return _result(matches, n, ids, n * kk)


ASSOCIATORS = {
    "exhaustive": lambda d, t, k, gate, ids: associate_exhaustive(d, t, gate, ids),
    "hierarchical": lambda d, t, k, gate, ids: associate_hierarchical(d, t, k, gate, ids),
}
