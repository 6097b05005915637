import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from toss import synthetic as S
from toss.segmentation import (
    EMPTY,
    ClusterParams,
    GroundParams,
    ProjectionConfig,
    _fit_cell,
    cluster_instances,
    project,
    segment_ground,
    segment_scan,
)
from toss.types import BBox, Scan, transform_points

SPEC_CFG = ProjectionConfig.from_degrees(1024, 64, 3.0, 25.0)


def test_projection_forward_point():
    img = project(np.array([[10.0, 0.0, 0.0]]), SPEC_CFG)
    assert tuple(img.pixel[0]) == (57, 512)
    assert img.index[57, 512] == 0


def test_projection_point_behind_wraps_to_zero():
    img = project(np.array([[-10.0, 0.0, 0.0]]), SPEC_CFG)
    assert img.pixel[0, 1] == 0


def _oracle_column(x, y, w):
    # independent azimuth binning: angle measured clockwise from -x axis
    phi = math.atan2(y, x)
    frac = (math.pi - phi) / (2 * math.pi)
    return min(int(frac * w), w - 1)


@pytest.mark.parametrize("w", [16, 360, 1024])
def test_full_ring_occupies_one_row(w):
    cfg = ProjectionConfig.from_degrees(w, 64, 3.0, 25.0)
    az = np.pi * (1.0 - 2.0 * (np.arange(w) + 0.5) / w)
    pts = np.column_stack([8 * np.cos(az), 8 * np.sin(az), np.zeros(w)])
    img = project(pts, cfg)
    rows, cols = np.nonzero(img.index != EMPTY)
    assert len(set(rows.tolist())) == 1
    assert len(cols) == w
    assert sorted(cols.tolist()) == sorted(_oracle_column(x, y, w) for x, y, _ in pts)


def test_zero_range_and_out_of_fov_counted():
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 5.0], [5.0, 0.0, 0.0]])
    img = project(pts, SPEC_CFG)
    assert img.n_zero_range == 1
    assert img.n_out_of_fov == 1
    assert img.valid.tolist() == [False, False, True]


point_lists = st.lists(
    st.tuples(st.floats(-30, 30), st.floats(-30, 30), st.floats(-3, 0.5)), min_size=1, max_size=300)


@given(point_lists)
def test_projection_invariants(raw):
    pts = np.array(raw, dtype=float)
    img = project(pts, SPEC_CFG)
    r = np.linalg.norm(pts, axis=1)
    occupied = img.index >= 0
    # stored range is the stored point's norm, and each cell holds its nearest point
    assert np.allclose(img.range[occupied], r[img.index[occupied]], atol=1e-6)
    for i in np.flatnonzero(img.valid):
        v, u = img.pixel[i]
        assert r[img.index[v, u]] <= r[i]
    # totality: every in-FOV point with r > 0 sits in exactly one cell
    v = (1 - (np.arcsin(np.clip(pts[:, 2] / np.where(r > 0, r, 1), -1, 1)) + SPEC_CFG.f_up) / SPEC_CFG.fov) * 64
    expect = (r > 0) & (np.floor(v) >= 0) & (np.floor(v) < 64)
    assert np.array_equal(img.valid, expect)
    assert len(np.unique(img.index[occupied])) == occupied.sum()


# ---------------------------------------------------------------- ground

def _single_frame(statics=(), actors=(), ground=S.GroundPlane(0.0, -1.73), noise=0.0):
    spec = S.SceneSpec("t", 1, 0, 0.1, ground, tuple(statics), tuple(actors), S.SensorModel(noise_sigma=noise))
    seq = S.generate(spec)
    return seq.scans[0], seq.labels[0], seq.poses[0], spec


def test_flat_plane_with_raised_box():
    box = S.StaticBox(BBox(6.0, 2.0, -1.73 + 0.3 + 0.75, 0.2, 2.0, 1.5, 1.5))
    scan, lab, _, _ = _single_frame([box])
    g = np.zeros(len(scan), bool)
    g[segment_ground(None, scan)] = True
    truth = (lab & 0xFFFF) == S.GROUND_CLASS
    assert truth.sum() > 1000 and (~truth).sum() > 100
    assert np.array_equal(g, truth)


def test_resting_box_only_loses_points_within_ground_band():
    box = S.StaticBox(BBox(6.0, 2.0, -1.73 + 1.0, 0.0, 2.0, 1.5, 2.0))
    scan, lab, _, _ = _single_frame([box])
    g = np.zeros(len(scan), bool)
    g[segment_ground(None, scan)] = True
    truth = (lab & 0xFFFF) == S.GROUND_CLASS
    assert g[truth].all()
    wrong = g & ~truth
    # box-bottom points inside the seed band tilt the cell plane a little
    assert (scan.points[wrong, 2] + 1.73 <= GroundParams().ground_dist + 0.05).all()
    assert wrong.sum() < 0.2 * (~truth).sum()


def test_airborne_points_give_empty_ground():
    rng = np.random.default_rng(3)
    pts = np.column_stack([rng.uniform(-20, 20, (500, 2)), rng.uniform(5, 8, 500)])
    assert len(segment_ground(None, pts)) == 0


def test_empty_scan_ground():
    assert len(segment_ground(None, np.zeros((0, 3)))) == 0


def test_tilted_plane_within_max_slope_is_ground():
    seq = S.generate(S.steep_hill(n_frames=1, noise=0.0))
    scan, lab, pose = seq.scans[0], seq.labels[0], seq.poses[0]
    g = np.zeros(len(scan), bool)
    g[segment_ground(None, scan)] = True
    truth = (lab & 0xFFFF) == S.GROUND_CLASS
    assert g[truth].mean() >= 0.99
    # anything else taken as ground hugs the slope (ground band plus fit error)
    glob = transform_points(scan.points, pose)
    height = glob[:, 2] - seq.spec.ground.height(glob[:, 0])
    assert (height[g & ~truth] <= 0.3).all()


def test_ground_is_deterministic():
    seq = S.generate(S.crossing_walkers(n_frames=1))
    a = segment_ground(None, seq.scans[0])
    b = segment_ground(None, seq.scans[0])
    assert np.array_equal(a, b)


def test_batched_cell_fit_matches_per_cell_fit():
    from toss.segmentation import _fit_cells

    rng = np.random.default_rng(8)
    pts = np.column_stack([rng.uniform(-20, 20, (5000, 2)), rng.normal(-1.7, 0.3, 5000)])
    params = GroundParams()
    keys = np.floor(pts[:, :2] / params.cell_size).astype(np.int64)
    order = np.lexsort((keys[:, 1], keys[:, 0]))
    ks = keys[order]
    change = np.ones(len(order), bool)
    change[1:] = (ks[1:] != ks[:-1]).any(axis=1)
    starts = np.flatnonzero(change)
    ends = np.append(starts[1:], len(order))
    planes = _fit_cells(pts, order, starts, ends, ks, params)
    for (key, pl), s, e in zip(planes.items(), starts, ends):
        ref = _fit_cell(pts[order[s:e]], params, pl.cx, pl.cy)
        assert (pl.a, pl.b, pl.d) == pytest.approx((ref.a, ref.b, ref.d), abs=1e-8)


# ---------------------------------------------------------------- clustering

def _union_find_oracle(image, non_ground, d_merge, min_points):
    """Plain-loop union-find over the same adjacency predicate."""
    pts = image.points
    parent = {}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    keep = set(int(i) for i in non_ground if image.valid[i])
    for i in keep:
        parent[i] = i
    h, w = image.index.shape
    for v in range(h):
        for u in range(w):
            a = int(image.index[v, u])
            if a not in keep:
                continue
            for vv, uu in ((v, (u + 1) % w), (v + 1, u)):
                if vv >= h:
                    continue
                b = int(image.index[vv, uu])
                if b in keep and np.linalg.norm(pts[a] - pts[b]) <= d_merge:
                    union(a, b)
    for i in keep:
        v, u = image.pixel[i]
        win = int(image.index[v, u])
        if win != i and win in keep and np.linalg.norm(pts[i] - pts[win]) <= d_merge:
            union(i, win)
    groups = {}
    for i in keep:
        groups.setdefault(find(i), set()).add(i)
    return sorted((g for g in groups.values() if len(g) >= min_points), key=min)


def _blob_scan(seed, n_blobs, n_points):
    rng = np.random.default_rng(seed)
    centers = np.column_stack([rng.uniform(-15, 15, (n_blobs, 2)), rng.uniform(-1.5, 0.5, n_blobs)])
    centers[np.hypot(centers[:, 0], centers[:, 1]) < 3, :2] += 5
    which = rng.integers(0, n_blobs, n_points)
    return centers[which] + rng.normal(0, rng.uniform(0.1, 1.0), (n_points, 3))


@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(10, 1500))
def test_clustering_matches_union_find(seed, n_blobs, n_points):
    cfg = ProjectionConfig.from_degrees(128, 16, 3.0, 25.0)
    pts = _blob_scan(seed, n_blobs, n_points)
    img = project(pts, cfg)
    non_ground = np.flatnonzero(img.valid)
    params = ClusterParams(d_merge=0.5, min_cluster_points=3)
    got = [set(g.tolist()) for g in cluster_instances(img, non_ground, params)]
    want = _union_find_oracle(img, non_ground, 0.5, 3)
    assert got == want


def test_clustering_matches_union_find_at_5000_points():
    cfg = ProjectionConfig.from_degrees(256, 32, 3.0, 25.0)
    pts = _blob_scan(99, 6, 5000)
    img = project(pts, cfg)
    ng = np.flatnonzero(img.valid)
    params = ClusterParams(0.5, 10)
    got = [set(g.tolist()) for g in cluster_instances(img, ng, params)]
    assert got == _union_find_oracle(img, ng, 0.5, 10)


@given(st.integers(0, 10_000))
def test_clustering_permutation_invariant(seed):
    cfg = ProjectionConfig.from_degrees(128, 16, 3.0, 25.0)
    pts = _blob_scan(seed, 4, 800)
    perm = np.random.default_rng(seed).permutation(len(pts))
    params = ClusterParams(0.5, 3)
    a = cluster_instances(project(pts, cfg), np.arange(len(pts)), params)
    b = cluster_instances(project(pts[perm], cfg), np.arange(len(pts)), params)
    as_sets = lambda groups, m: {frozenset(m[g].tolist()) for g in groups}  # noqa: E731
    assert as_sets(a, np.arange(len(pts))) == as_sets(b, perm)


def test_two_cubes_ten_metres_apart():
    cubes = [S.StaticBox(BBox(6.0, 5.0, 0.0, 0.0, 1, 1, 1)), S.StaticBox(BBox(6.0, -5.0, 0.0, 0.0, 1, 1, 1))]
    scan, _, _, _ = _single_frame(cubes, ground=None)
    img = project(scan, S.SensorModel().projection())
    inst = cluster_instances(img, np.arange(len(scan)))
    assert len(inst) == 2


def test_tiny_cloud_is_discarded():
    pts = np.array([[5.0, 0.0, 0.0], [5.0, 0.05, 0.0], [5.0, 0.1, 0.0]])
    img = project(pts, SPEC_CFG)
    assert cluster_instances(img, np.arange(3)) == []


def test_l_shaped_wall_is_one_instance():
    walls = [S.StaticBox(BBox(8.0, 2.0, 0.0, 0.0, 6.0, 0.3, 2.0)),
             S.StaticBox(BBox(10.85, 5.0, 0.0, math.pi / 2, 6.0, 0.3, 2.0))]
    scan, _, _, _ = _single_frame(walls, ground=None)
    img = project(scan, S.SensorModel().projection())
    inst = cluster_instances(img, np.arange(len(scan)))
    assert len(inst) == 1
    oracle = _union_find_oracle(img, np.arange(len(scan)), 0.5, 10)
    assert [set(g.tolist()) for g in inst] == oracle


def test_segment_scan_partition():
    seq = S.generate(S.crossing_walkers(n_frames=2))
    for scan in seq.scans:
        _, seg = segment_scan(scan, S.SensorModel().projection())
        seg.check()
        assert all(len(i) >= ClusterParams().min_cluster_points for i in seg.instances)
        inst = np.concatenate(seg.instances)
        assert not np.isin(inst, seg.ground_indices).any()


def test_projection_config_validation():
    with pytest.raises(ValueError):
        ProjectionConfig(1, 64)
    with pytest.raises(ValueError):
        ProjectionConfig(64, 64, f_up=0.1, f_down=0.0)


def test_scan_object_accepted():
    img = project(Scan(0, 0.0, np.array([[10.0, 0.0, 0.0]])), SPEC_CFG)
    assert img.valid.all()
