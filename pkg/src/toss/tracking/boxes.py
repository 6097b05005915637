"""Box fitting and the detection-to-trace association cost."""

from __future__ import annotations

import numpy as np

from ..types import BBox, as_points, wrap_angle

MIN_EXTENT = 1e-2
_HULL_EPS = 1e-9


def convex_hull_2d(xy: np.ndarray) -> np.ndarray:
    """Counter-clockwise convex hull (Andrew's monotone chain), no repeated end."""
    pts = np.asarray(xy, dtype=float).reshape(-1, 2)
    if len(pts) > 16:
        pts = _drop_interior(pts)
    pts = np.unique(pts, axis=0)
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= _HULL_EPS:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= _HULL_EPS:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _drop_interior(pts: np.ndarray) -> np.ndarray:
    """Discard points strictly inside the octagon of axis and diagonal extremes."""
    dirs = np.array([[1, 0], [1, 1], [0, 1], [-1, 1], [-1, 0], [-1, -1], [0, -1], [1, -1]], dtype=float)
    poly = pts[np.argmax(pts @ dirs.T, axis=0)]
    # keep the distinct vertices in order; duplicates give zero-length edges
    keep = np.ones(len(poly), bool)
    keep[1:] = np.any(poly[1:] != poly[:-1], axis=1)
    poly = poly[keep]
    if len(poly) > 1 and np.all(poly[-1] == poly[0]):
        poly = poly[:-1]
    if len(poly) < 3:
        return pts
    a, b = poly, np.roll(poly, -1, axis=0)
    e = b - a
    # cross of each edge with (p - a): > eps for every edge means strictly inside
    cr = e[:, 0][None] * (pts[:, 1][:, None] - a[:, 1][None]) - e[:, 1][None] * (pts[:, 0][:, None] - a[:, 0][None])
    inside = np.all(cr > _HULL_EPS * (1.0 + np.abs(e).sum(axis=1))[None], axis=1)
    return pts[~inside]


def min_area_rect(hull: np.ndarray):
    """Rotating calipers over hull edges.

    Returns ``(center_xy, theta, length, width)`` where ``theta`` is the edge
    direction of the minimum-area enclosing rectangle and ``length`` is the
    extent along it.
    """
    edges = np.roll(hull, -1, axis=0) - hull
    angles = np.arctan2(edges[:, 1], edges[:, 0])
    # one representative per direction modulo pi/2
    angles = np.unique(np.round(np.mod(angles, np.pi / 2), 12))
    c, s = np.cos(angles), np.sin(angles)
    # project hull onto each candidate frame: (n_angles, n_hull)
    along = np.outer(c, hull[:, 0]) + np.outer(s, hull[:, 1])
    across = -np.outer(s, hull[:, 0]) + np.outer(c, hull[:, 1])
    a_min, a_max = along.min(axis=1), along.max(axis=1)
    b_min, b_max = across.min(axis=1), across.max(axis=1)
    areas = (a_max - a_min) * (b_max - b_min)
    i = int(np.argmin(areas))
    ma, mb = 0.5 * (a_min[i] + a_max[i]), 0.5 * (b_min[i] + b_max[i])
    center = np.array([c[i] * ma - s[i] * mb, s[i] * ma + c[i] * mb])
    return center, float(angles[i]), float(a_max[i] - a_min[i]), float(b_max[i] - b_min[i])


def fit_box(points) -> BBox:
    """Oriented box around a point cluster.

    The heading comes from the minimum-area rectangle of the x-y projection;
    ``l >= w`` by convention and ``theta`` is reported in ``[-pi/2, pi/2)``.
    Fewer than three points, or a collinear footprint, gives an axis-aligned
    box with ``theta = 0``.
    """
    pts = as_points(points)
    if len(pts) == 0:
        raise ValueError("cannot fit a box to zero points")
    zmin, zmax = pts[:, 2].min(), pts[:, 2].max()
    cz, h = 0.5 * (zmin + zmax), max(zmax - zmin, MIN_EXTENT)

    hull = convex_hull_2d(pts[:, :2]) if len(pts) >= 3 else pts[:, :2]
    if len(hull) < 3:
        lo, hi = pts[:, :2].min(axis=0), pts[:, :2].max(axis=0)
        cx, cy = 0.5 * (lo + hi)
        ext = np.maximum(hi - lo, MIN_EXTENT)
        return BBox(cx, cy, cz, 0.0, ext[0], ext[1], h)

    center, theta, length, width = min_area_rect(hull)
    if length < width:
        length, width = width, length
        theta += np.pi / 2
    theta = wrap_angle(theta)
    if theta >= np.pi / 2:
        theta -= np.pi
    elif theta < -np.pi / 2:
        theta += np.pi
    return BBox(center[0], center[1], cz, theta, max(length, MIN_EXTENT), max(width, MIN_EXTENT), h)


def bev_corners(boxes: np.ndarray) -> np.ndarray:
    """Counter-clockwise footprint corners, shape ``(N, 4, 2)``."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 7)
    c, s = np.cos(boxes[:, 3]), np.sin(boxes[:, 3])
    hl, hw = 0.5 * boxes[:, 4], 0.5 * boxes[:, 5]
    local = np.stack([
        np.stack([hl, hw], -1), np.stack([-hl, hw], -1),
        np.stack([-hl, -hw], -1), np.stack([hl, -hw], -1),
    ], axis=1)
    x = c[:, None] * local[..., 0] - s[:, None] * local[..., 1] + boxes[:, None, 0]
    y = s[:, None] * local[..., 0] + c[:, None] * local[..., 1] + boxes[:, None, 1]
    return np.stack([x, y], -1)


def _clip(poly: np.ndarray, count: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Clip convex polygons by the left half-plane of directed edges ``a -> b``.

    ``poly`` is ``(P, K, 2)`` with ``count`` valid vertices each. Returns the
    clipped polygons padded to ``K + 1`` vertices.
    """
    P, K, _ = poly.shape
    idx = np.arange(K)
    valid = idx[None, :] < count[:, None]
    nxt_i = np.where(idx[None, :] + 1 < count[:, None], idx[None, :] + 1, 0)
    cur = poly
    nxt = np.take_along_axis(poly, nxt_i[..., None], axis=1)
    ex, ey = (b - a)[:, 0:1], (b - a)[:, 1:2]

    def side(p):
        return ex * (p[..., 1] - a[:, 1:2]) - ey * (p[..., 0] - a[:, 0:1])

    sc, sn = side(cur), side(nxt)
    inc, inn = sc >= 0, sn >= 0
    denom = sc - sn
    t = np.divide(sc, denom, out=np.zeros_like(sc), where=denom != 0)
    inter = cur + t[..., None] * (nxt - cur)

    # each input edge emits up to two vertices: [current if inside, crossing]
    out = np.zeros((P, 2 * K, 2))
    keep = np.zeros((P, 2 * K), dtype=bool)
    out[:, 0::2] = cur
    keep[:, 0::2] = valid & inc
    out[:, 1::2] = inter
    keep[:, 1::2] = valid & (inc != inn)
    order = np.argsort(~keep, axis=1, kind="stable")[:, : K + 1]
    packed = np.take_along_axis(out, order[..., None], axis=1)
    new_count = np.minimum(keep.sum(axis=1), K + 1)
    return packed, new_count


def _polygon_area(poly: np.ndarray, count: np.ndarray) -> np.ndarray:
    K = poly.shape[1]
    idx = np.arange(K)
    valid = idx[None, :] < count[:, None]
    nxt_i = np.where(idx[None, :] + 1 < count[:, None], idx[None, :] + 1, 0)
    nxt = np.take_along_axis(poly, nxt_i[..., None], axis=1)
    cr = poly[..., 0] * nxt[..., 1] - poly[..., 1] * nxt[..., 0]
    area = 0.5 * np.where(valid, cr, 0.0).sum(axis=1)
    return np.where(count >= 3, np.abs(area), 0.0)


def bev_intersection_area(corners_a: np.ndarray, corners_b: np.ndarray) -> np.ndarray:
    """Footprint overlap area for aligned pairs of ``(P, 4, 2)`` corner arrays."""
    poly = corners_a
    count = np.full(len(poly), 4)
    for k in range(4):
        a = corners_b[:, k]
        b = corners_b[:, (k + 1) % 4]
        poly, count = _clip(poly, count, a, b)
    return _polygon_area(poly, count)


class BoxGeometry:
    """Per-box quantities reused across many pair evaluations."""

    def __init__(self, boxes: np.ndarray):
        self.boxes = np.asarray(boxes, dtype=float).reshape(-1, 7)
        self.corners = bev_corners(self.boxes)
        self.volume = self.boxes[:, 4] * self.boxes[:, 5] * self.boxes[:, 6]
        self.radius = 0.5 * np.hypot(self.boxes[:, 4], self.boxes[:, 5])
        self.zlo = self.boxes[:, 2] - 0.5 * self.boxes[:, 6]
        self.zhi = self.boxes[:, 2] + 0.5 * self.boxes[:, 6]

    def __len__(self):
        return len(self.boxes)


def _lex_greater(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a - b
    nz = diff != 0
    first = np.argmax(nz, axis=1)
    return np.take_along_axis(diff, first[:, None], axis=1)[:, 0] > 0


def iou_pairs(ga: BoxGeometry, ia: np.ndarray, gb: BoxGeometry, ib: np.ndarray) -> np.ndarray:
    """3D IoU of upright oriented boxes for index pairs ``(ia[p], ib[p])``."""
    ia = np.asarray(ia, dtype=np.int64)
    ib = np.asarray(ib, dtype=np.int64)
    iou = np.zeros(len(ia))
    dz = np.minimum(ga.zhi[ia], gb.zhi[ib]) - np.maximum(ga.zlo[ia], gb.zlo[ib])
    dxy = np.hypot(ga.boxes[ia, 0] - gb.boxes[ib, 0], ga.boxes[ia, 1] - gb.boxes[ib, 1])
    # footprints cannot touch when the circumscribed circles are apart
    cand = np.flatnonzero((dz > 0) & (dxy < ga.radius[ia] + gb.radius[ib]))
    if len(cand) == 0:
        return iou
    pa, pb = ia[cand], ib[cand]
    # clip in a canonical order so that iou(a, b) == iou(b, a) bit for bit
    swap = _lex_greater(ga.boxes[pa], gb.boxes[pb])
    ca = np.where(swap[:, None, None], gb.corners[pb], ga.corners[pa])
    cb = np.where(swap[:, None, None], ga.corners[pa], gb.corners[pb])
    area = bev_intersection_area(ca, cb)
    inter = area * dz[cand]
    union = ga.volume[pa] + gb.volume[pb] - inter
    iou[cand] = np.clip(inter / union, 0.0, 1.0)
    return iou


def pair_costs(ga: BoxGeometry, ia, gb: BoxGeometry, ib):
    """Vectorised association cost for index pairs.

    Returns ``(total, c_d, c_o, c_v)`` arrays: centre distance, ``1 - IoU``
    and ``1 - min(v)/max(v)``, summed with unit weights.
    """
    ia = np.asarray(ia, dtype=np.int64)
    ib = np.asarray(ib, dtype=np.int64)
    d = ga.boxes[ia, :3] - gb.boxes[ib, :3]
    c_d = np.sqrt((d * d).sum(axis=1))
    c_o = 1.0 - iou_pairs(ga, ia, gb, ib)
    va, vb = ga.volume[ia], gb.volume[ib]
    c_v = 1.0 - np.minimum(va, vb) / np.maximum(va, vb)
    return c_d + c_o + c_v, c_d, c_o, c_v


def iou(b_i: BBox, b_j: BBox) -> float:
    ga, gb = BoxGeometry(b_i.to_array()), BoxGeometry(b_j.to_array())
    return float(iou_pairs(ga, [0], gb, [0])[0])


def pair_cost(b_i: BBox, b_j: BBox) -> tuple[float, float, float, float]:
    """Cost of associating two boxes: ``(total, c_d, c_o, c_v)``."""
    ga, gb = BoxGeometry(b_i.to_array()), BoxGeometry(b_j.to_array())
    total, c_d, c_o, c_v = pair_costs(ga, [0], gb, [0])
    return float(total[0]), float(c_d[0]), float(c_o[0]), float(c_v[0])
