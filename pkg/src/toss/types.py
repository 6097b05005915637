"""Shared geometric and labeling vocabulary.

Points are carried as ``(N, 3)`` float64 arrays rather than per-point objects;
frames follow the KITTI sensor convention (x forward, y left, z up). Angles are
radians everywhere inside the package.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

ORTHONORMAL_TOL = 1e-6


class NonFiniteError(ValueError):
    """A coordinate array contains NaN or infinity."""

    def __init__(self, index: int, what: str = "point"):
        super().__init__(f"non-finite {what} at index {index}")
        self.index = index


class PointLabel(enum.IntEnum):
    GROUND = 0
    STATIC = 1
    DYNAMIC = 2
    UNKNOWN = 3


def wrap_angle(theta):
    """Wrap angle(s) into ``[-pi, pi)``. Works on scalars and arrays."""
    wrapped = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def as_points(points, *, check_finite: bool = True) -> np.ndarray:
    """Coerce ``points`` to a float64 ``(N, 3)`` array.

    Raises :class:`NonFiniteError` naming the first offending row.
    """
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {arr.shape}")
    if check_finite:
        bad = ~np.isfinite(arr).all(axis=1)
        if bad.any():
            raise NonFiniteError(int(np.flatnonzero(bad)[0]))
    return arr


@dataclass(frozen=True)
class Scan:
    frame_index: int
    timestamp: float | None
    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", as_points(self.points, check_finite=False))

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid sensor-to-global transform ``p_g = R @ p_s + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(rot).all() and np.isfinite(trans).all()):
            raise ValueError("pose contains non-finite values")
        if not is_rotation(rot):
            raise ValueError("rotation is not orthonormal with det +1")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, matrix) -> Pose:
        m = np.asarray(matrix, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> Pose:
        c, s = math.cos(yaw), math.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rot, translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: Pose) -> Pose:
        """Return ``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> Pose:
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def __matmul__(self, other: Pose) -> Pose:
        return self.compose(other)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


def is_rotation(rot: np.ndarray, tol: float = ORTHONORMAL_TOL) -> bool:
    rot = np.asarray(rot, dtype=float)
    if rot.shape != (3, 3):
        return False
    if np.abs(rot.T @ rot - np.eye(3)).max() > tol:
        return False
    return abs(np.linalg.det(rot) - 1.0) <= tol


def orthonormalize(rot: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense (SVD projection)."""
    u, _, vt = np.linalg.svd(np.asarray(rot, dtype=float))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def transform_points(points, pose: Pose) -> np.ndarray:
    """Apply ``pose`` to every row of ``points``."""
    pts = as_points(points)
    return pts @ pose.rotation.T + pose.translation


@dataclass(frozen=True)
class BBox:
    """Upright oriented box ``[cx, cy, cz, theta, l, w, h]``."""

    cx: float
    cy: float
    cz: float
    theta: float
    l: float  # noqa: E741
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.cz, self.theta, self.l, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box parameters {vals}")
        if min(self.l, self.w, self.h) <= 0:
            raise ValueError(f"box dimensions must be positive, got {self.l, self.w, self.h}")
        for name in ("cx", "cy", "cz", "l", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @classmethod
    def from_array(cls, arr) -> BBox:
        a = [float(v) for v in np.asarray(arr, dtype=float).reshape(7)]
        return cls(*a)

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.theta, self.l, self.w, self.h])

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def volume(self) -> float:
        return box_volume(self)


def box_volume(b: BBox) -> float:
    return b.l * b.w * b.h


def boxes_to_array(boxes) -> np.ndarray:
    """Stack a sequence of :class:`BBox` (or 7-vectors) into ``(N, 7)``."""
    rows = [b.to_array() if isinstance(b, BBox) else np.asarray(b, dtype=float) for b in boxes]
    if not rows:
        return np.zeros((0, 7))
    return np.vstack(rows).astype(np.float64)
