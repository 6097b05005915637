import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from toss.tracking.kalman import (
    DIM_X,
    CovarianceError,
    KalmanState,
    NoiseConfig,
    innovation,
    kf_predict,
    kf_update,
    make_psd,
)
from toss.types import BBox

BOX = BBox(1.0, 2.0, 0.5, 0.3, 2.0, 1.0, 1.5)


def state_with_velocity(v):
    s = KalmanState.from_box(BOX)
    mean = s.mean.copy()
    mean[7:10] = v
    return KalmanState(mean, s.covariance)


def test_zero_velocity_keeps_position():
    s = kf_predict(state_with_velocity((0, 0, 0)), 0.1)
    assert np.array_equal(s.mean[:3], BOX.to_array()[:3])


def test_unit_velocity_one_second():
    s = kf_predict(state_with_velocity((1, 0, 0)), 1.0)
    assert s.mean[0] == BOX.cx + 1.0
    assert np.array_equal(s.mean[3:7], BOX.to_array()[3:7])


def test_predict_inflates_trace():
    s = KalmanState.from_box(BOX)
    for _ in range(5):
        nxt = kf_predict(s, 0.1)
        assert np.trace(nxt.covariance) > np.trace(s.covariance)
        s = nxt


def test_predict_rejects_nonpositive_dt():
    with pytest.raises(ValueError):
        kf_predict(KalmanState.from_box(BOX), 0.0)


def test_update_with_predicted_mean_is_fixed_point():
    s = kf_predict(state_with_velocity((0.5, -0.2, 0)), 0.1)
    post = kf_update(s, s.box)
    assert np.allclose(post.mean, s.mean, atol=1e-12)


def test_vanishing_measurement_noise_snaps_to_measurement():
    s = kf_predict(KalmanState.from_box(BOX), 0.1)
    meas = BBox(1.4, 1.7, 0.6, 0.5, 2.2, 1.1, 1.4)
    post = kf_update(s, meas, R=np.eye(7) * 1e-14)
    assert np.allclose(post.mean[:7], meas.to_array(), atol=1e-6)


def test_heading_innovation_wraps():
    mean = np.zeros(DIM_X)
    mean[3], mean[4:7] = 3.1, 1.0
    s = KalmanState(mean, np.eye(DIM_X))
    y = innovation(s, np.array([0, 0, 0, -3.1, 1, 1, 1]))
    # -3.1 - 3.1 = -6.2 wraps to 2*pi - 6.2, a small positive turn
    assert y[3] == pytest.approx(2 * math.pi - 6.2, abs=1e-12)
    assert abs(y[3]) == pytest.approx(0.0832, abs=1e-4)


def test_update_shrinks_measured_variance():
    s = kf_predict(KalmanState.from_box(BOX), 0.1)
    post = kf_update(s, BOX)
    assert np.trace(post.covariance[:7, :7]) <= np.trace(s.covariance[:7, :7])


def test_make_psd_clamps_and_rejects():
    P = np.diag([1.0, 2.0, -1e-9])
    assert np.linalg.eigvalsh(make_psd(P)).min() >= 0
    with pytest.raises(CovarianceError):
        make_psd(np.diag([1.0, -1e-3]))


def _random_chain(seed, steps, noise=NoiseConfig()):
    rng = np.random.default_rng(seed)
    s = KalmanState.from_box(BOX, noise)
    for _ in range(steps):
        s = kf_predict(s, float(rng.uniform(0.01, 1.0)), noise)
        eig = np.linalg.eigvalsh(s.covariance)
        assert eig.min() >= -1e-9 and np.allclose(s.covariance, s.covariance.T)
        meas = BBox(*rng.normal(0, 20, 3), rng.uniform(-10, 10), *rng.uniform(0.1, 5, 3))
        s = kf_update(s, meas, noise)
        eig = np.linalg.eigvalsh(s.covariance)
        assert eig.min() >= -1e-9 and np.allclose(s.covariance, s.covariance.T)
    return s


def test_covariance_psd_over_1000_steps():
    _random_chain(0, 1000)


@given(st.integers(0, 2**31), st.floats(1e-4, 10), st.floats(1e-4, 10))
def test_covariance_psd_random_noise(seed, q, r):
    noise = NoiseConfig(q_position=q, q_velocity=q, q_angle=q, q_dims=q, r_position=r, r_angle=r, r_dims=r)
    _random_chain(seed, 50, noise)
