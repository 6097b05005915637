"""Sparse voxel map of static structure and the preservation/rejection metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .types import Pose, transform_points

log = logging.getLogger(__name__)

_BITS = 21
_OFFSET = 1 << (_BITS - 1)
_MASK = (1 << _BITS) - 1


def pack_keys(ijk: np.ndarray) -> np.ndarray:
    """Pack integer voxel coordinates (each within +-2**20) into int64 keys."""
    ijk = np.asarray(ijk, dtype=np.int64) + _OFFSET
    if ijk.size and ((ijk < 0).any() or (ijk > _MASK).any()):
        raise OverflowError("voxel coordinate out of packable range")
    return (ijk[:, 0] << (2 * _BITS)) | (ijk[:, 1] << _BITS) | ijk[:, 2]


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    out = np.stack([(keys >> (2 * _BITS)) & _MASK, (keys >> _BITS) & _MASK, keys & _MASK], axis=1)
    return out - _OFFSET


class VoxelMap:
    """Occupancy counts per voxel, optionally with static/dynamic tallies.

    Inserts are buffered and merged lazily, so insertion order never affects
    the result.
    """

    def __init__(self, voxel_size: float = 0.2):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self._keys = np.zeros(0, dtype=np.int64)
        self._tally = np.zeros((0, 3), dtype=np.int64)  # total, static, dynamic
        self._pending: list[tuple[np.ndarray, np.ndarray]] = []
        self.n_skipped = 0

    def voxel_of(self, points: np.ndarray) -> np.ndarray:
        return np.floor(np.asarray(points, dtype=float) / self.voxel_size).astype(np.int64)

    def insert(self, points, dynamic: np.ndarray | None = None) -> None:
        """Add points (already in the global frame).

        ``dynamic`` marks ground-truth dynamic points for reference maps; when
        omitted every point is tallied as static. Non-finite points are
        skipped and counted.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        good = np.isfinite(pts).all(axis=1)
        if not good.all():
            self.n_skipped += int((~good).sum())
            pts = pts[good]
            if dynamic is not None:
                dynamic = np.asarray(dynamic, bool)[good]
        if len(pts) == 0:
            return
        keys = pack_keys(self.voxel_of(pts))
        dyn = np.zeros(len(pts), bool) if dynamic is None else np.asarray(dynamic, bool)
        tally = np.column_stack([np.ones(len(pts), np.int64), (~dyn).astype(np.int64), dyn.astype(np.int64)])
        self._pending.append((keys, tally))

    def insert_frame(self, ground_points, static_points, pose: Pose | None = None) -> None:
        """Insert one frame's ground and refined-static points.

        Points are in the sensor frame when ``pose`` is given, else global.
        """
        pts = np.vstack([np.asarray(p, dtype=float).reshape(-1, 3) for p in (ground_points, static_points)])
        if pose is not None:
            good = np.isfinite(pts).all(axis=1)
            self.n_skipped += int((~good).sum())
            pts = transform_points(pts[good], pose)
        self.insert(pts)

    def _flush(self) -> None:
        if not self._pending:
            return
        keys = np.concatenate([self._keys] + [k for k, _ in self._pending])
        tally = np.vstack([self._tally] + [t for _, t in self._pending])
        self._pending = []
        uniq, inv = np.unique(keys, return_inverse=True)
        merged = np.zeros((len(uniq), 3), dtype=np.int64)
        np.add.at(merged, inv.ravel(), tally)
        self._keys, self._tally = uniq, merged

    @property
    def keys(self) -> np.ndarray:
        self._flush()
        return self._keys

    @property
    def counts(self) -> np.ndarray:
        self._flush()
        return self._tally[:, 0]

    @property
    def static_counts(self) -> np.ndarray:
        self._flush()
        return self._tally[:, 1]

    @property
    def dynamic_counts(self) -> np.ndarray:
        self._flush()
        return self._tally[:, 2]

    def __len__(self) -> int:
        return len(self.keys)

    def cells(self) -> dict[tuple[int, int, int], int]:
        return {tuple(int(v) for v in ijk): int(c) for ijk, c in zip(unpack_keys(self.keys), self.counts)}

    def count(self, ijk) -> int:
        key = pack_keys(np.asarray(ijk).reshape(1, 3))[0]
        i = np.searchsorted(self.keys, key)
        return int(self.counts[i]) if i < len(self.keys) and self.keys[i] == key else 0

    def centers(self) -> np.ndarray:
        return (unpack_keys(self.keys) + 0.5) * self.voxel_size

    def write_csv(self, path) -> None:
        ijk = unpack_keys(self.keys)
        with open(path, "w") as fh:
            fh.write("ix,iy,iz,count\n")
            for (i, j, k), c in zip(ijk.tolist(), self.counts.tolist()):
                fh.write(f"{i},{j},{k},{c}\n")

    def write_ply(self, path) -> None:
        """Binary little-endian PLY with one vertex (voxel centre) per cell."""
        pts = self.centers().astype("<f4")
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            f"element vertex {len(pts)}\n"
            "property float x\nproperty float y\nproperty float z\nend_header\n"
        )
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(pts.tobytes())


def insert_frame(vmap: VoxelMap, ground_points, static_points, pose: Pose | None = None) -> VoxelMap:
    vmap.insert_frame(ground_points, static_points, pose)
    return vmap


def read_ply(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    n = next(int(line.split()[-1]) for line in header if line.startswith("element vertex"))
    return np.frombuffer(data[end:end + 12 * n], dtype="<f4").reshape(n, 3).astype(float)


@dataclass(frozen=True)
class EvalReport:
    preserved_static: int
    total_static: int
    remaining_dynamic: int
    total_dynamic: int

    @property
    def pr(self) -> float | None:
        """Preservation rate in percent, ``None`` when there are no static voxels."""
        if self.total_static == 0:
            return None
        return 100.0 * self.preserved_static / self.total_static

    @property
    def rr(self) -> float | None:
        if self.total_dynamic == 0:
            return None
        return 100.0 * (1.0 - self.remaining_dynamic / self.total_dynamic)

    @property
    def f1(self) -> float | None:
        if self.pr is None or self.rr is None:
            return None
        return f1_score(self.pr, self.rr)

    def as_dict(self) -> dict:
        return {
            "PR": self.pr, "RR": self.rr, "F1": self.f1,
            "preserved_static_voxels": self.preserved_static,
            "total_static_voxels": self.total_static,
            "remaining_dynamic_voxels": self.remaining_dynamic,
            "total_dynamic_voxels": self.total_dynamic,
        }

    def to_text(self) -> str:
        """Machine-readable ``key=value`` lines."""
        lines = []
        for k, v in self.as_dict().items():
            if v is None:
                v = "undefined"
            elif isinstance(v, float):
                v = f"{v:.6f}"
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        def fmt(v, spec):
            return "undefined" if v is None else format(v, spec)

        rows = [
            ("PR [%]", fmt(self.pr, ".3f")),
            ("RR [%]", fmt(self.rr, ".3f")),
            ("F1", fmt(self.f1, ".3f")),
            ("preserved static voxels", f"{self.preserved_static} / {self.total_static}"),
            ("remaining dynamic voxels", f"{self.remaining_dynamic} / {self.total_dynamic}"),
        ]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{a:<{width}}  {b:>14}" for a, b in rows) + "\n"


def f1_score(pr: float, rr: float) -> float:
    """Harmonic mean of PR and RR given in percent; returns a fraction."""
    p, r = pr / 100.0, rr / 100.0
    if p + r == 0:
        return 0.0
    return 2.0 * p * r / (p + r)


def evaluate(built: VoxelMap, reference: VoxelMap) -> EvalReport:
    """Compare a built map against a naively accumulated, labelled reference.

    Reference voxels holding any dynamic point are dynamic; voxels with static
    points only are static. Mixed voxels therefore count against rejection and
    are left out of the static denominator.
    """
    if not math.isclose(built.voxel_size, reference.voxel_size):
        raise ValueError("maps use different voxel sizes")
    ref_keys = reference.keys
    dyn = reference.dynamic_counts > 0
    stat = ~dyn & (reference.static_counts > 0)
    in_built = np.isin(ref_keys, built.keys, assume_unique=True)
    return EvalReport(
        preserved_static=int((in_built & stat).sum()),
        total_static=int(stat.sum()),
        remaining_dynamic=int((in_built & dyn).sum()),
        total_dynamic=int(dyn.sum()),
    )
