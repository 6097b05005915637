import math

import numpy as np
import pytest

from toss import synthetic
from toss.io_datasets import ClassTable, open_sequence
from toss.pipeline import map_from_labels, reference_map
from toss.segmentation import project
from toss.static_map import evaluate
from toss.synthetic import (
    GROUND_CLASS,
    Actor,
    GroundPlane,
    SceneSpec,
    SensorModel,
    crossing_walkers,
    frame_rng,
    generate,
    ground_only,
    render_frame,
)
from toss.types import BBox, transform_points

SMALL = SensorModel(width=256, height=16)


def test_ground_only_is_all_ground():
    seq = generate(ground_only(n_frames=2))
    for lab in seq.labels:
        assert len(lab) > 0
        assert (lab == GROUND_CLASS).all()
    assert seq.tracks.shape == (0, 9)


def test_same_seed_is_bit_identical(tmp_path):
    a = generate(crossing_walkers(n_frames=4, seed=9))
    b = generate(crossing_walkers(n_frames=4, seed=9))
    for sa, sb, la, lb in zip(a.scans, b.scans, a.labels, b.labels):
        assert sa.points.tobytes() == sb.points.tobytes()
        assert la.tobytes() == lb.tobytes()
    a.write(tmp_path / "a")
    b.write(tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_different_seed_changes_noise():
    a = generate(crossing_walkers(n_frames=1, seed=1))
    b = generate(crossing_walkers(n_frames=1, seed=2))
    assert a.scans[0].points.tobytes() != b.scans[0].points.tobytes()


def test_frame_rng_is_order_free():
    assert frame_rng(5, 3).normal() == frame_rng(5, 3).normal()
    assert frame_rng(5, 3).normal() != frame_rng(5, 4).normal()
    spec = crossing_walkers(n_frames=3)
    late = render_frame(spec, 2)[0].points
    assert np.array_equal(late, generate(spec).scans[2].points)


def test_one_metre_per_frame_spacing():
    actor = Actor((0.6, 0.5, 1.5), ((5, -10), (5, 10)), speed=10.0)
    spec = SceneSpec("step", 8, 0, 0.1, GroundPlane(0, -1.73), (), (actor,), SMALL)
    seq = generate(spec)
    c = seq.tracks[:, 2:5]
    assert np.allclose(np.linalg.norm(np.diff(c, axis=0), axis=1), 1.0, atol=1e-12)


def test_actor_at_sensor_origin_raises():
    actor = Actor((2.0, 2.0, 4.0), ((0.0, 0.0),), speed=0.0, z=-1.0)
    spec = SceneSpec("bad", 1, 0, 0.1, GroundPlane(0, -1.73), (), (actor,), SMALL)
    with pytest.raises(ValueError, match="actor 0 intersects the sensor origin"):
        generate(spec)


def box_surface_distance(box: BBox, pts):
    c, s = math.cos(box.theta), math.sin(box.theta)
    q = pts - box.center
    local = np.column_stack([c * q[:, 0] + s * q[:, 1], -s * q[:, 0] + c * q[:, 1], q[:, 2]])
    half = np.array([box.l, box.w, box.h]) / 2
    # zero on the boundary, positive inside or outside
    outside = np.linalg.norm(np.maximum(np.abs(local) - half, 0), axis=1)
    inside = np.min(half - np.abs(local), axis=1)
    return np.where(outside > 0, outside, np.maximum(inside, 0))


@pytest.mark.parametrize("name", ["crossing_walkers", "steep_hill"])
def test_noise_free_points_lie_on_surfaces(name):
    spec = synthetic.scene(name, n_frames=3, noise=0.0)
    seq = generate(spec)
    g = spec.ground
    for f, (scan, pose, lab) in enumerate(zip(seq.scans, seq.poses, seq.labels)):
        pts = transform_points(scan.points, pose)
        sem, inst = lab & 0xFFFF, lab >> 16
        on_ground = sem == GROUND_CLASS
        assert np.abs(pts[on_ground] @ g.normal - g.d).max() < 1e-6
        rest = ~on_ground
        dist = np.full(len(pts), np.inf)
        rows = seq.tracks[seq.tracks[:, 0] == f]
        for row in rows:
            m = inst == int(row[1])
            dist[m] = box_surface_distance(BBox.from_array(row[2:9]), pts[m])
        for sb in spec.statics:
            m = rest & (inst == 0) & (sem == sb.semantic)
            dist[m] = np.minimum(dist[m], box_surface_distance(sb.box, pts[m]))
        assert dist[rest].max() < 1e-6


def test_perfect_pipeline_scores_100():
    seq = generate(crossing_walkers(n_frames=20))
    table = ClassTable.load()
    frames = list(zip(seq.scans, seq.poses, seq.labels))
    ref = reference_map(frames, table, 0.2)
    built = map_from_labels(frames, table, 0.2)
    rep = evaluate(built, ref)
    assert rep.total_dynamic > 0 and rep.total_static > 0
    assert (rep.pr, rep.rr) == (100.0, 100.0)


def test_written_sequence_reads_back(tmp_path):
    seq = generate(crossing_walkers(n_frames=3))
    seq.write(tmp_path)
    src = open_sequence(tmp_path, require_labels=True)
    assert len(src) == 3
    for i, (scan, pose) in enumerate(src.frames()):
        assert np.allclose(scan.points, seq.scans[i].points, atol=1e-4)
        assert np.array_equal(src.labels(i), seq.labels[i])
        assert np.allclose(pose.matrix(), seq.poses[i].matrix(), atol=1e-12)
    assert (tmp_path / "tracks.csv").read_text().startswith("frame,actor,")


def test_noise_free_scan_projects_one_point_per_cell():
    spec = SceneSpec("flat", 1, 0, 0.1, GroundPlane(0, -1.73), (), (), SMALL)
    scan = generate(spec).scans[0]
    img = project(scan.points, SMALL.projection())
    assert img.valid.all()
    assert (img.index >= 0).sum() == len(scan.points)


def test_unknown_scene_name():
    with pytest.raises(KeyError, match="unknown scene"):
        synthetic.scene("nowhere")
