"""Range-image projection, ground separation and instance clustering."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .types import Scan, as_points

log = logging.getLogger(__name__)

EMPTY = -1


@dataclass(frozen=True)
class ProjectionConfig:
    """Spherical image geometry. ``f_up``/``f_down`` are radians, both positive.

    With ``v = [1 - (asin(z/r) + f_up) / f] * h`` row 0 sits at elevation
    ``+f_down`` and row ``h`` at ``-f_up``. A sensor seeing 3 deg up and 25 deg
    down is therefore described by ``f_up=25 deg, f_down=3 deg`` (the defaults).
    """

    width: int = 1024
    height: int = 64
    f_up: float = math.radians(25.0)
    f_down: float = math.radians(3.0)

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ValueError("range image must be at least 2x2")
        if self.f_up < 0 or self.f_down <= 0:
            raise ValueError("need f_up >= 0 and f_down > 0")

    @property
    def fov(self) -> float:
        return self.f_up + self.f_down

    @classmethod
    def from_degrees(cls, width, height, f_up_deg, f_down_deg) -> ProjectionConfig:
        return cls(int(width), int(height), math.radians(f_up_deg), math.radians(f_down_deg))


@dataclass
class RangeImage:
    """``index[v, u]`` holds the winning point index (or -1), ``range[v, u]`` its norm.

    ``pixel`` gives each input point's ``(v, u)`` cell, or ``(-1, -1)`` when the
    point was dropped (zero range or outside the vertical field of view).
    """

    config: ProjectionConfig
    index: np.ndarray
    range: np.ndarray
    pixel: np.ndarray
    points: np.ndarray
    n_zero_range: int = 0
    n_out_of_fov: int = 0

    @property
    def valid(self) -> np.ndarray:
        return self.pixel[:, 0] >= 0


def image_coordinates(points: np.ndarray, config: ProjectionConfig):
    """Continuous ``(u, v)`` image coordinates and ranges of ``points``."""
    r = np.linalg.norm(points, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        u = 0.5 * (1.0 - np.arctan2(points[:, 1], points[:, 0]) / np.pi) * config.width
        v = (1.0 - (np.arcsin(np.clip(points[:, 2] / r, -1.0, 1.0)) + config.f_up) / config.fov) * config.height
    return u, v, r


def project(scan: Scan | np.ndarray, config: ProjectionConfig) -> RangeImage:
    points = scan.points if isinstance(scan, Scan) else as_points(scan)
    n = len(points)
    h, w = config.height, config.width
    u, v, r = image_coordinates(points, config)

    finite = np.isfinite(points).all(axis=1) if n else np.zeros(0, bool)
    zero = finite & (r <= 0.0)
    ui = np.floor(np.where(finite, u, 0.0)).astype(np.int64) if n else np.zeros(0, np.int64)
    vi = np.floor(np.where(np.isfinite(v), v, -1.0)).astype(np.int64) if n else np.zeros(0, np.int64)
    # arctan2 == -pi gives u == w, the same azimuth as u == 0
    ui = np.clip(np.where(ui >= w, ui - w, ui), 0, w - 1)
    in_fov = finite & ~zero & (vi >= 0) & (vi < h)
    n_out = int((finite & ~zero & ~in_fov).sum())
    n_zero = int(zero.sum())
    if n_zero:
        log.warning("project: skipped %d zero-range point(s)", n_zero)
    if n and not finite.all():
        log.warning("project: skipped %d non-finite point(s)", int((~finite).sum()))
    if n_out:
        log.debug("project: dropped %d point(s) outside the vertical FOV", n_out)

    pixel = np.full((n, 2), -1, dtype=np.int64)
    pixel[in_fov, 0] = vi[in_fov]
    pixel[in_fov, 1] = ui[in_fov]

    index = np.full((h, w), EMPTY, dtype=np.int64)
    rng = np.full((h, w), np.inf)
    ids = np.flatnonzero(in_fov)
    if len(ids):
        # Nearest wins; exact ties broken by coordinates so the result does not
        # depend on point order.
        p = points[ids]
        order = np.lexsort((p[:, 2], p[:, 1], p[:, 0], r[ids]))
        ids = ids[order]
        flat = vi[ids] * w + ui[ids]
        _, first = np.unique(flat, return_index=True)
        winners = ids[first]
        index.ravel()[flat[first]] = winners
        rng.ravel()[flat[first]] = r[winners]
    return RangeImage(config, index, rng, pixel, points, n_zero, n_out)


@dataclass(frozen=True)
class GroundParams:
    """Grid-wise plane-fitting ground model.

    Cells of ``cell_size`` metres are fitted by least squares over their
    lowest points; a cell's plane is accepted by region growing from seed
    cells around the sensor when its slope is under ``max_slope`` and its
    height is continuous with an accepted neighbour.
    """

    cell_size: float = 2.0
    ground_dist: float = 0.25
    max_slope: float = math.radians(15.0)
    seed_band: float = 0.2
    sensor_height: float = 1.73
    seed_radius: float = 8.0
    seed_tolerance: float = 0.25
    max_step: float = 0.2
    neighbor_reach: int = 2


@dataclass
class _CellPlane:
    a: float
    b: float
    d: float
    cx: float
    cy: float

    def height(self, x, y):
        return self.a * x + self.b * y + self.d

    @property
    def slope(self) -> float:
        return math.atan(math.hypot(self.a, self.b))


def _fit_cell(pts: np.ndarray, params: GroundParams, cx: float, cy: float) -> _CellPlane:
    z = pts[:, 2]
    seeds = pts[z <= z.min() + params.seed_band]
    if len(seeds) >= 3:
        A = np.column_stack([seeds[:, 0], seeds[:, 1], np.ones(len(seeds))])
        if np.linalg.matrix_rank(A) == 3:
            (a, b, d), *_ = np.linalg.lstsq(A, seeds[:, 2], rcond=None)
            return _CellPlane(float(a), float(b), float(d), cx, cy)
    return _CellPlane(0.0, 0.0, float(np.median(seeds[:, 2])), cx, cy)


def _fit_cells(pts, order, starts, ends, keys_sorted, params: GroundParams) -> dict[tuple[int, int], _CellPlane]:
    """Batched form of :func:`_fit_cell` over cells given as runs of ``order``."""
    cs = params.cell_size
    n_cells = len(starts)
    cell = np.repeat(np.arange(n_cells), ends - starts)
    p = pts[order]
    zmin = np.minimum.reduceat(p[:, 2], starts)
    seed = p[:, 2] <= zmin[cell] + params.seed_band
    centers = (keys_sorted[starts] + 0.5) * cs
    # local coordinates keep the normal equations well conditioned
    x = p[seed, 0] - centers[cell[seed], 0]
    y = p[seed, 1] - centers[cell[seed], 1]
    z = p[seed, 2]
    c = cell[seed]
    one = np.ones_like(x)
    sums = [np.bincount(c, w, minlength=n_cells) for w in (x * x, x * y, x, y * y, y, one, x * z, y * z, z)]
    sxx, sxy, sx, syy, sy, n, sxz, syz, sz = sums
    ata = np.stack([np.stack([sxx, sxy, sx], -1), np.stack([sxy, syy, sy], -1), np.stack([sx, sy, n], -1)], 1)
    atb = np.stack([sxz, syz, sz], -1)
    scale = np.maximum(np.abs(ata).max(axis=(1, 2)), 1.0)
    well = (n >= 3) & (np.abs(np.linalg.det(ata)) > 1e-9 * scale**3)
    sol = np.zeros((n_cells, 3))
    if well.any():
        sol[well] = np.linalg.solve(ata[well], atb[well][..., None])[..., 0]
    planes = {}
    for i in range(n_cells):
        key = (int(keys_sorted[starts[i], 0]), int(keys_sorted[starts[i], 1]))
        cx, cy = centers[i]
        if well[i]:
            a, b, d0 = sol[i]
            planes[key] = _CellPlane(float(a), float(b), float(d0 - a * cx - b * cy), float(cx), float(cy))
        else:
            planes[key] = _fit_cell(p[starts[i]:ends[i]], params, float(cx), float(cy))
    return planes


def segment_ground(image: RangeImage | None, scan: Scan | np.ndarray, params: GroundParams = GroundParams()) -> np.ndarray:
    """Indices of ground points, sorted ascending.

    ``image`` is accepted for interface symmetry with clustering; only points
    that landed in the range image are candidates when it is given.
    """
    points = scan.points if isinstance(scan, Scan) else as_points(scan)
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    cand = np.isfinite(points).all(axis=1)
    if image is not None:
        cand &= image.valid
    ids = np.flatnonzero(cand)
    if len(ids) == 0:
        return np.zeros(0, dtype=np.int64)
    pts = points[ids]
    cs = params.cell_size
    keys = np.floor(pts[:, :2] / cs).astype(np.int64)
    order = np.lexsort((keys[:, 1], keys[:, 0]))
    keys_sorted = keys[order]
    change = np.ones(len(order), dtype=bool)
    change[1:] = (keys_sorted[1:] != keys_sorted[:-1]).any(axis=1)
    starts = np.flatnonzero(change)
    ends = np.append(starts[1:], len(order))

    planes = _fit_cells(pts, order, starts, ends, keys_sorted, params)
    members = {key: order[s:e] for key, s, e in zip(planes, starts, ends)}

    accepted: set[tuple[int, int]] = set()
    queue: deque = deque()
    for key in sorted(planes):
        pl = planes[key]
        if math.hypot(pl.cx, pl.cy) > params.seed_radius or pl.slope > params.max_slope:
            continue
        # a seed plane must pass under the sensor at the expected mounting height
        if abs(pl.d + params.sensor_height) <= params.seed_tolerance:
            accepted.add(key)
            queue.append(key)

    reach = params.neighbor_reach
    while queue:
        key = queue.popleft()
        pl = planes[key]
        for dx in range(-reach, reach + 1):
            for dy in range(-reach, reach + 1):
                nk = (key[0] + dx, key[1] + dy)
                if nk in accepted or nk not in planes:
                    continue
                npl = planes[nk]
                if npl.slope > params.max_slope:
                    continue
                mx, my = 0.5 * (pl.cx + npl.cx), 0.5 * (pl.cy + npl.cy)
                if abs(pl.height(mx, my) - npl.height(mx, my)) <= params.max_step * max(abs(dx), abs(dy)):
                    accepted.add(nk)
                    queue.append(nk)

    ground = []
    for key in sorted(accepted):
        sel = members[key]
        pl = planes[key]
        p = pts[sel]
        dist = np.abs(pl.a * p[:, 0] + pl.b * p[:, 1] - p[:, 2] + pl.d) / math.sqrt(pl.a**2 + pl.b**2 + 1.0)
        ground.append(ids[sel[dist <= params.ground_dist]])
    if not ground:
        return np.zeros(0, dtype=np.int64)
    return np.sort(np.concatenate(ground))


@dataclass(frozen=True)
class ClusterParams:
    d_merge: float = 0.5
    min_cluster_points: int = 10


@dataclass
class SegmentedScan:
    ground_indices: np.ndarray
    instances: list[np.ndarray] = field(default_factory=list)

    def check(self) -> None:
        seen = set(self.ground_indices.tolist())
        for inst in self.instances:
            if len(inst) == 0:
                raise AssertionError("empty instance")
            s = set(inst.tolist())
            if s & seen:
                raise AssertionError("instances overlap ground or each other")
            seen |= s


def _adjacent_edges(image: RangeImage, points: np.ndarray, mask_img: np.ndarray, d_merge: float):
    """Edges between 4-neighbour cells (u wraps) whose points are within d_merge."""
    idx = image.index
    edges = []
    for shifted in (np.roll(idx, -1, axis=1), None):
        if shifted is not None:
            a, b = idx, shifted
            ok = mask_img & np.roll(mask_img, -1, axis=1)
        else:
            a, b = idx[:-1], idx[1:]
            ok = mask_img[:-1] & mask_img[1:]
        pa, pb = a[ok], b[ok]
        if len(pa):
            d2 = ((points[pa] - points[pb]) ** 2).sum(axis=1)
            keep = d2 <= d_merge * d_merge
            edges.append((pa[keep], pb[keep]))
    return edges


def cluster_instances(image: RangeImage, non_ground, params: ClusterParams = ClusterParams()) -> list[np.ndarray]:
    """Connected components of non-ground points over range-image adjacency.

    Two cell winners join when their cells are 4-neighbours (with azimuth
    wrap) and their 3D distance is at most ``d_merge``. A point that lost its
    cell to a nearer one joins the winner's component under the same distance
    test. Components smaller than ``min_cluster_points`` are discarded.
    Instances are returned as sorted index arrays, ordered by smallest index.
    """
    points = image.points
    n = len(points)
    non_ground = np.unique(np.asarray(non_ground, dtype=np.int64))
    if n == 0 or len(non_ground) == 0:
        return []
    in_set = np.zeros(n, dtype=bool)
    in_set[non_ground] = True
    in_set &= image.valid

    idx = image.index
    mask_img = idx >= 0
    mask_img[mask_img] = in_set[idx[mask_img]]

    src, dst = [], []
    for pa, pb in _adjacent_edges(image, points, mask_img, params.d_merge):
        src.append(pa)
        dst.append(pb)

    # points that lost their cell attach to the winner
    losers = np.flatnonzero(in_set)
    winner_of = idx[image.pixel[losers, 0], image.pixel[losers, 1]]
    is_loser = winner_of != losers
    losers, winner_of = losers[is_loser], winner_of[is_loser]
    ok = in_set[winner_of]
    losers, winner_of = losers[ok], winner_of[ok]
    if len(losers):
        d2 = ((points[losers] - points[winner_of]) ** 2).sum(axis=1)
        keep = d2 <= params.d_merge * params.d_merge
        src.append(losers[keep])
        dst.append(winner_of[keep])

    src = np.concatenate(src) if src else np.zeros(0, np.int64)
    dst = np.concatenate(dst) if dst else np.zeros(0, np.int64)
    graph = coo_matrix((np.ones(len(src), dtype=np.int8), (src, dst)), shape=(n, n))
    _, comp = connected_components(graph, directed=False)

    members = np.flatnonzero(in_set)
    comp_m = comp[members]
    order = np.argsort(comp_m, kind="stable")
    comp_sorted = comp_m[order]
    splits = np.flatnonzero(np.diff(comp_sorted)) + 1
    groups = np.split(members[order], splits)
    out = [np.sort(g) for g in groups if len(g) >= params.min_cluster_points]
    out.sort(key=lambda g: int(g[0]))
    return out


def segment_scan(scan: Scan, config: ProjectionConfig, ground: GroundParams = GroundParams(),
                 cluster: ClusterParams = ClusterParams()) -> tuple[RangeImage, SegmentedScan]:
    """Project, split ground and cluster one scan."""
    image = project(scan, config)
    g = segment_ground(image, scan, ground)
    mask = image.valid.copy()
    mask[g] = False
    instances = cluster_instances(image, np.flatnonzero(mask), cluster)
    return image, SegmentedScan(g, instances)
