"""Constant-velocity Kalman filter over upright boxes.

State is ``[cx, cy, cz, theta, l, w, h, vx, vy, vz]``; the box parameters are
measured directly, velocity is latent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..types import BBox, wrap_angle

DIM_X = 10
DIM_Z = 7
PSD_TOL = 1e-9
PSD_HARD_TOL = 1e-6

H = np.hstack([np.eye(DIM_Z), np.zeros((DIM_Z, DIM_X - DIM_Z))])


class CovarianceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class NoiseConfig:
    """Standard deviations; squared on use."""

    q_position: float = 0.1
    q_velocity: float = 0.5
    q_angle: float = 0.05
    q_dims: float = 0.05
    r_position: float = 0.2
    r_angle: float = 0.1
    r_dims: float = 0.1
    p0_velocity: float = 10.0

    def process(self) -> np.ndarray:
        return np.diag([self.q_position] * 3 + [self.q_angle] + [self.q_dims] * 3 + [self.q_velocity] * 3) ** 2

    def measurement(self) -> np.ndarray:
        return np.diag([self.r_position] * 3 + [self.r_angle] + [self.r_dims] * 3) ** 2

    def initial(self) -> np.ndarray:
        return np.diag([self.r_position] * 3 + [self.r_angle] + [self.r_dims] * 3 + [self.p0_velocity] * 3) ** 2


DEFAULT_NOISE = NoiseConfig()


@dataclass(frozen=True, eq=False)
class KalmanState:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        m = np.array(self.mean, dtype=float).reshape(DIM_X)
        p = np.array(self.covariance, dtype=float).reshape(DIM_X, DIM_X)
        m.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "covariance", p)

    @classmethod
    def from_box(cls, box: BBox, noise: NoiseConfig = DEFAULT_NOISE) -> KalmanState:
        mean = np.concatenate([box.to_array(), np.zeros(3)])
        return cls(mean, noise.initial())

    @property
    def box(self) -> BBox:
        m = self.mean.copy()
        m[4:7] = np.maximum(m[4:7], 1e-3)
        return BBox.from_array(m[:7])

    @property
    def velocity(self) -> np.ndarray:
        return self.mean[7:10]


def transition(dt: float) -> np.ndarray:
    F = np.eye(DIM_X)
    F[0, 7] = F[1, 8] = F[2, 9] = dt
    return F


def make_psd(P: np.ndarray) -> np.ndarray:
    """Symmetrise and clamp round-off negative eigenvalues.

    Raises :class:`CovarianceError` for eigenvalues below ``-PSD_HARD_TOL``.
    """
    P = 0.5 * (P + P.T)
    w, v = np.linalg.eigh(P)
    if w.min() < -PSD_HARD_TOL:
        raise CovarianceError(f"covariance has eigenvalue {w.min():.3g}")
    if w.min() < 0:
        P = (v * np.maximum(w, 0.0)) @ v.T
        P = 0.5 * (P + P.T)
    return P


def kf_predict(state: KalmanState, dt: float, noise: NoiseConfig = DEFAULT_NOISE) -> KalmanState:
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    F = transition(dt)
    mean = F @ state.mean
    mean[3] = wrap_angle(mean[3])
    P = F @ state.covariance @ F.T + noise.process()
    return KalmanState(mean, 0.5 * (P + P.T))


def innovation(state: KalmanState, z: np.ndarray) -> np.ndarray:
    y = np.asarray(z, dtype=float) - H @ state.mean
    y[3] = wrap_angle(y[3])
    return y


def kf_update(state: KalmanState, measurement: BBox, noise: NoiseConfig = DEFAULT_NOISE,
              R: np.ndarray | None = None) -> KalmanState:
    """Kalman update with the 7-parameter box; heading innovation is wrapped."""
    R = noise.measurement() if R is None else R
    P = state.covariance
    y = innovation(state, measurement.to_array())
    S = H @ P @ H.T + R
    K = np.linalg.solve(S.T, (P @ H.T).T).T
    mean = state.mean + K @ y
    mean[3] = wrap_angle(mean[3])
    # Joseph form keeps the posterior symmetric PSD under round-off
    I_KH = np.eye(DIM_X) - K @ H
    P_new = I_KH @ P @ I_KH.T + K @ R @ K.T
    return KalmanState(mean, make_psd(P_new))
