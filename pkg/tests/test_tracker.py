import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from toss.tracking.tracker import (
    HistoryEntry,
    MotionLabel,
    Track,
    Tracker,
    TrackerConfig,
    TrackStatus,
    align_heading,
    classify_track,
    export_tracks_csv,
    tracker_step,
)
from toss.tracking.kalman import KalmanState
from toss.types import BBox


def make_track(boxes):
    t = Track(0, KalmanState.from_box(boxes[0]))
    for i, b in enumerate(boxes):
        t.append(HistoryEntry(i, b))
    return t


def test_empty_first_frame():
    tr = Tracker()
    assert tr.step(0, []) == []
    assert tr.tracks == []


def test_confirmation_after_min_hits():
    tr = Tracker(TrackerConfig(min_hits=3))
    box = BBox(5, 5, 0, 0, 1, 1, 1)
    for f in range(3):
        ids = tr.step(f, [box])
        assert ids == [0]
        want = TrackStatus.CONFIRMED if f == 2 else TrackStatus.TENTATIVE
        assert tr.live[0].status is want
    assert len(tr.tracks) == 1


def test_out_of_order_frame_rejected():
    tr = Tracker()
    tr.step(3, [])
    with pytest.raises(ValueError, match="after frame 3"):
        tr.step(3, [])


def test_track_dies_after_max_age_and_is_not_revived():
    tr = Tracker(TrackerConfig(max_age=2))
    box = BBox(0, 0, 0, 0, 1, 1, 1)
    tr.step(0, [box])
    tr.step(1, [box])
    tr.step(2, [])
    tr.step(3, [])
    assert len(tr.dead) == 1 and tr.dead[0].status is TrackStatus.DEAD
    assert tr.step(4, [box]) == [1]


def test_history_frames_strictly_increase():
    t = make_track([BBox(0, 0, 0, 0, 1, 1, 1)] * 2)
    with pytest.raises(ValueError):
        t.append(HistoryEntry(1, BBox(0, 0, 0, 0, 1, 1, 1)))


def test_stationary_track_is_static():
    rng = np.random.default_rng(0)
    boxes = [BBox(*(rng.normal(0, 0.05, 2)), 0, 0, 1, 1, 1) for _ in range(20)]
    assert classify_track(make_track(boxes)) is MotionLabel.COARSE_STATIC


def test_walking_track_is_dynamic():
    boxes = [BBox(float(i), 0, 0, 0, 0.6, 0.6, 1.7) for i in range(5)]
    assert classify_track(make_track(boxes)) is MotionLabel.COARSE_DYNAMIC


def test_large_box_small_shift_is_static():
    # a 4 m box moving 1 m stays under alpha * 4 = 2 m
    boxes = [BBox(0, 0, 0, 0, 4, 2, 1.5), BBox(1, 0, 0, 0, 4, 2, 1.5)]
    assert classify_track(make_track(boxes)) is MotionLabel.COARSE_STATIC


def test_single_entry_track_unlabelled():
    assert classify_track(make_track([BBox(0, 0, 0, 0, 1, 1, 1)])) is None


@given(st.integers(0, 2**31), st.integers(2, 40), st.floats(0.01, 2.0))
def test_running_label_matches_brute_force(seed, n, step):
    rng = np.random.default_rng(seed)
    xy = np.cumsum(rng.normal(0, step, (n, 2)), axis=0)
    dims = rng.uniform(0.3, 5, (n, 2))
    boxes = [BBox(x, y, 0, 0, l, w, 1) for (x, y), (l, w) in zip(xy, dims)]
    t = make_track(boxes)
    assert t.motion_label(0.75, 0.5) is classify_track(t, 0.75, 0.5)
    c = np.array([b.center for b in boxes])
    brute = max(np.linalg.norm(c[i] - c[j]) for i in range(n) for j in range(n))
    assert t.max_displacement == pytest.approx(brute, abs=1e-12)


def test_align_heading_prefers_nearest_quarter_turn():
    b = align_heading(BBox(0, 0, 0, 0.0, 2, 1, 1), math.pi / 2 - 0.1)
    assert b.theta == pytest.approx(math.pi / 2)
    assert (b.l, b.w) == (1, 2)


def crossing_boxes(speed, n=30):
    # A moves along +x, B along +y; B reaches the crossing half a frame later
    a = [BBox(-15 + speed * f, 0, 0, 0, 0.6, 0.6, 1.7) for f in range(n)]
    b = [BBox(0, -15 - speed / 2 + speed * f, 0, math.pi / 2, 0.6, 0.6, 1.7) for f in range(n)]
    return a, b


@pytest.mark.parametrize("associator", ["hierarchical", "exhaustive"])
@pytest.mark.parametrize("speed", [0.15, 1.0, 1.9])
def test_no_identity_swap_when_paths_cross(associator, speed):
    tr = Tracker(TrackerConfig(associator=associator))
    a, b = crossing_boxes(speed)
    seen = {0: set(), 1: set()}
    for f, (ba, bb) in enumerate(zip(a, b)):
        ids = tr.step(f, [ba, bb])
        seen[0].add(ids[0])
        seen[1].add(ids[1])
    assert len(seen[0]) == 1 and len(seen[1]) == 1
    assert seen[0] != seen[1]
    assert all(tr.label_of(t) is MotionLabel.COARSE_DYNAMIC for t in tr.tracks)


def test_generated_walkers_keep_identity():
    from toss.synthetic import crossing_walkers, generate

    seq = generate(crossing_walkers(n_frames=120))
    tr = Tracker()
    owner = {}
    for f in range(len(seq)):
        rows = seq.tracks[seq.tracks[:, 0] == f]
        ids = tr.step(f, [BBox.from_array(r[2:9]) for r in rows])
        for actor, tid in zip(rows[:, 1].astype(int), ids):
            owner.setdefault(actor, set()).add(tid)
    assert len(owner) == 5
    assert all(len(v) == 1 for v in owner.values())


def test_functional_step_returns_live_tracks():
    tr = Tracker()
    live = tracker_step(tr, 0, [BBox(0, 0, 0, 0, 1, 1, 1)])
    assert [t.id for t in live] == [0]


def test_config_validation():
    with pytest.raises(ValueError):
        TrackerConfig(associator="hungarian")
    with pytest.raises(ValueError):
        TrackerConfig(k=0)


def test_export_csv(tmp_path):
    tr = Tracker()
    for f in range(3):
        tr.step(f, [BBox(float(f), 0, 0, 0, 0.6, 0.6, 1.7)])
    path = tmp_path / "tracks.csv"
    export_tracks_csv(tr.archive(), path)
    rows = list(csv.DictReader(open(path)))
    assert [r["frame_index"] for r in rows] == ["0", "1", "2"]
    assert rows[0]["status"] == "confirmed" and rows[0]["motion_label"] == "dynamic"
    assert float(rows[2]["cx"]) == 2.0
