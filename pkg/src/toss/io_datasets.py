"""KITTI / SemanticKITTI sequence readers and writers.

A sequence directory holds ``velodyne/NNNNNN.bin`` scans, ``poses.txt``,
optionally ``calib.txt`` (``Tr`` = sensor to camera), ``times.txt`` and
``labels/NNNNNN.label``.
"""

from __future__ import annotations

import logging
import os
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import yaml

from .types import PointLabel, Pose, Scan, is_rotation, orthonormalize

log = logging.getLogger(__name__)

RECORD_BYTES = 16

# classes written by the pipeline for its own per-point output
OUTPUT_CLASS = {
    PointLabel.UNKNOWN: 0,
    PointLabel.GROUND: 40,
    PointLabel.STATIC: 9,
    PointLabel.DYNAMIC: 251,
}


class DatasetError(ValueError):
    """Malformed input file; the message names the file and location."""


def read_scan(path, frame_index: int = 0, timestamp: float | None = None) -> Scan:
    """Read a KITTI ``.bin`` scan (float32 x, y, z, intensity records)."""
    data = Path(path).read_bytes()
    if len(data) % RECORD_BYTES:
        cut = len(data) - len(data) % RECORD_BYTES
        raise DatasetError(f"{path}: truncated at byte {cut}")
    if not data:
        log.warning("%s: empty scan", path)
    rec = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    return Scan(frame_index, timestamp, rec[:, :3].astype(np.float64))


def write_scan(path, points, intensity=None) -> None:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    rec = np.zeros((len(pts), 4), dtype="<f4")
    rec[:, :3] = pts
    if intensity is not None:
        rec[:, 3] = intensity
    Path(path).write_bytes(rec.tobytes())


def _parse_row12(text: str, where: str) -> np.ndarray:
    parts = text.split()
    if len(parts) != 12:
        raise DatasetError(f"{where}: expected 12 numbers, got {len(parts)}")
    try:
        vals = np.array([float(p) for p in parts])
    except ValueError as exc:
        raise DatasetError(f"{where}: {exc}") from None
    if not np.isfinite(vals).all():
        raise DatasetError(f"{where}: non-finite value")
    m = np.eye(4)
    m[:3, :] = vals.reshape(3, 4)
    return m


def _to_pose(m: np.ndarray, where: str) -> Pose:
    rot = m[:3, :3]
    if not is_rotation(rot):
        if abs(np.linalg.det(rot)) < 1e-3:
            raise DatasetError(f"{where}: rotation block is singular")
        rot = orthonormalize(rot)
    return Pose(rot, m[:3, 3])


def read_calibration(path) -> Pose:
    """``Tr`` (sensor to camera) from a KITTI ``calib.txt``; identity if absent."""
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.startswith("Tr:"):
            return _to_pose(_parse_row12(line[3:], f"{path}:{lineno}"), f"{path}:{lineno}")
    return Pose.identity()


def write_calibration(path, tr: Pose) -> None:
    row = " ".join(f"{v:.17g}" for v in tr.matrix()[:3].ravel())
    Path(path).write_text(f"Tr: {row}\n")


def read_poses(path, calibration: Pose | None = None) -> list[Pose]:
    """Poses as sensor-to-global transforms.

    KITTI poses are given for the camera; with ``Tr`` the sensor pose is
    ``Tr^-1 @ P @ Tr``. Rotations that drifted from orthonormal are projected
    back.
    """
    out = []
    tr = calibration.matrix() if calibration is not None else None
    tr_inv = calibration.inverse().matrix() if calibration is not None else None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        m = _parse_row12(line, f"{where} (line {lineno})")
        if tr is not None:
            m = tr_inv @ m @ tr
        out.append(_to_pose(m, where))
    return out


def write_poses(path, poses: Iterable[Pose], calibration: Pose | None = None) -> None:
    lines = []
    for p in poses:
        m = p.matrix()
        if calibration is not None:
            m = calibration.matrix() @ m @ calibration.inverse().matrix()
        lines.append(" ".join(f"{v:.17g}" for v in m[:3].ravel()))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_labels(path, n_points: int | None = None) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) % 4:
        raise DatasetError(f"{path}: truncated at byte {len(data) - len(data) % 4}")
    labels = np.frombuffer(data, dtype="<u4").astype(np.uint32)
    if n_points is not None and len(labels) != n_points:
        raise DatasetError(f"{path}: {len(labels)} labels for {n_points} points")
    return labels


def write_labels(path, labels, n_points: int | None = None) -> None:
    arr = np.asarray(labels)
    if n_points is not None and len(arr) != n_points:
        raise DatasetError(f"{path}: {len(arr)} labels for {n_points} points")
    Path(path).write_bytes(arr.astype("<u4").tobytes())


def semantic_class(labels: np.ndarray) -> np.ndarray:
    return np.asarray(labels, dtype=np.uint32) & 0xFFFF


def instance_id(labels: np.ndarray) -> np.ndarray:
    return np.asarray(labels, dtype=np.uint32) >> 16


@dataclass(frozen=True)
class ClassTable:
    """Which semantic classes count as dynamic, and which are ignored."""

    movable: frozenset[int]
    ignored: frozenset[int] = frozenset()

    @classmethod
    def load(cls, path=None) -> ClassTable:
        if path is None:
            path = Path(__file__).with_name("data") / "movable_classes.yaml"
        doc = yaml.safe_load(Path(path).read_text()) or {}
        unknown = set(doc) - {"movable", "ignored"}
        if unknown:
            raise DatasetError(f"{path}: unknown key(s) {sorted(unknown)}")
        return cls(frozenset(int(c) for c in doc.get("movable", [])),
                   frozenset(int(c) for c in doc.get("ignored", [])))

    def is_dynamic(self, labels: np.ndarray) -> np.ndarray:
        return np.isin(semantic_class(labels), list(self.movable))

    def is_ignored(self, labels: np.ndarray) -> np.ndarray:
        return np.isin(semantic_class(labels), list(self.ignored))

    def point_labels(self, labels: np.ndarray) -> np.ndarray:
        """Per-point :class:`PointLabel` values (Static/Dynamic/Unknown)."""
        out = np.where(self.is_dynamic(labels), PointLabel.DYNAMIC, PointLabel.STATIC)
        out[self.is_ignored(labels)] = PointLabel.UNKNOWN
        return out.astype(np.int64)


def encode_output_labels(point_labels: np.ndarray) -> np.ndarray:
    lut = np.zeros(len(PointLabel), dtype=np.uint32)
    for lab, cls in OUTPUT_CLASS.items():
        lut[lab] = cls
    return lut[np.asarray(point_labels, dtype=np.int64)]


def read_times(path) -> list[float]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            try:
                out.append(float(line))
            except ValueError:
                raise DatasetError(f"{path}: line {lineno}: not a number") from None
    return out


@dataclass
class SequenceSource:
    scan_paths: list[Path]
    poses: list[Pose]
    label_paths: list[Path] | None = None
    calibration: Pose = field(default_factory=Pose.identity)
    times: list[float] | None = None
    frame_ids: list[int] | None = None

    def __post_init__(self):
        n = len(self.scan_paths)
        if len(self.poses) != n:
            raise DatasetError(f"{n} scans but {len(self.poses)} poses")
        if self.label_paths is not None and len(self.label_paths) != n:
            raise DatasetError(f"{n} scans but {len(self.label_paths)} label files")
        if self.times is not None and len(self.times) != n:
            raise DatasetError(f"{n} scans but {len(self.times)} timestamps")
        if self.frame_ids is None:
            self.frame_ids = [int(p.stem) if p.stem.isdigit() else i for i, p in enumerate(self.scan_paths)]

    def __len__(self) -> int:
        return len(self.scan_paths)

    @property
    def has_labels(self) -> bool:
        return self.label_paths is not None

    def scan(self, i: int) -> Scan:
        t = self.times[i] if self.times is not None else None
        return read_scan(self.scan_paths[i], self.frame_ids[i], t)

    def labels(self, i: int, n_points: int | None = None) -> np.ndarray:
        if self.label_paths is None:
            raise DatasetError("sequence has no labels")
        return read_labels(self.label_paths[i], n_points)

    def frames(self) -> Iterator[tuple[Scan, Pose]]:
        for i in range(len(self)):
            yield self.scan(i), self.poses[i]


def open_sequence(root, require_labels: bool = False) -> SequenceSource:
    root = Path(root)
    scan_dir = root / "velodyne"
    if not scan_dir.is_dir():
        raise DatasetError(f"{root}: missing velodyne/ directory")
    scans = sorted(scan_dir.glob("*.bin"))
    calib = read_calibration(root / "calib.txt") if (root / "calib.txt").exists() else Pose.identity()
    pose_path = root / "poses.txt"
    if not pose_path.exists():
        raise DatasetError(f"{root}: missing poses.txt")
    poses = read_poses(pose_path, calib)
    labels = None
    if (root / "labels").is_dir():
        labels = [root / "labels" / (p.stem + ".label") for p in scans]
        missing = [p for p in labels if not p.exists()]
        if missing:
            raise DatasetError(f"missing label file {missing[0]}")
    elif require_labels:
        raise DatasetError(f"{root}: missing labels/ directory")
    times = read_times(root / "times.txt") if (root / "times.txt").exists() else None
    if len(poses) > len(scans):
        # SemanticKITTI ships poses for the whole sequence; accept prefix use
        log.info("%s: %d poses for %d scans, using the matching prefix", root, len(poses), len(scans))
        idx = [int(p.stem) for p in scans] if all(p.stem.isdigit() for p in scans) else list(range(len(scans)))
        if max(idx, default=-1) >= len(poses):
            raise DatasetError(f"{root}: scan index beyond pose list")
        poses = [poses[i] for i in idx]
        if times is not None and len(times) > len(scans):
            times = [times[i] for i in idx]
    return SequenceSource(scans, poses, labels, calib, times)


def write_sequence(root, scans: Sequence[np.ndarray], poses: Sequence[Pose], labels=None,
                   times: Sequence[float] | None = None) -> Path:
    root = Path(root)
    (root / "velodyne").mkdir(parents=True, exist_ok=True)
    for i, pts in enumerate(scans):
        write_scan(root / "velodyne" / f"{i:06d}.bin", pts)
    write_poses(root / "poses.txt", poses)
    write_calibration(root / "calib.txt", Pose.identity())
    if labels is not None:
        (root / "labels").mkdir(exist_ok=True)
        for i, lab in enumerate(labels):
            write_labels(root / "labels" / f"{i:06d}.label", lab, len(scans[i]))
    if times is not None:
        (root / "times.txt").write_text("".join(f"{t:.6f}\n" for t in times))
    return root


def prefetch(items: Iterable, capacity: int = 8) -> Iterator:
    """Iterate ``items`` from a background thread through a bounded queue."""
    if capacity <= 0:
        yield from items
        return
    q: queue.Queue = queue.Queue(maxsize=capacity)
    done = object()
    stop = threading.Event()

    def worker():
        try:
            for it in items:
                if stop.is_set():
                    return
                q.put((True, it))
        except BaseException as exc:  # surfaced on the consumer side
            q.put((False, exc))
            return
        q.put((True, done))

    th = threading.Thread(target=worker, daemon=True)
    th.start()
    try:
        while True:
            ok, it = q.get()
            if not ok:
                raise it
            if it is done:
                return
            yield it
    finally:
        stop.set()


def iter_dir(path) -> list[Path]:
    return sorted(Path(path).iterdir()) if os.path.isdir(path) else []
