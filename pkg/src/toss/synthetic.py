"""Deterministic ray-cast scenes with exact per-point ground truth.

Rays follow the cell centres of the range-image grid, so a noise-free scan
projects one point per cell. Range noise is applied along the ray, which
keeps every point in the cell it was cast from.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .io_datasets import write_sequence
from .segmentation import ProjectionConfig
from .types import BBox, Pose, Scan

GROUND_CLASS = 40
BUILDING_CLASS = 50
CAR_CLASS = 10
MOVING_PERSON = 254
MOVING_CAR = 252
NO_HIT = -1


@dataclass(frozen=True)
class SensorModel:
    """Spinning sensor; ``up``/``down`` are the physical elevation limits."""

    width: int = 1024
    height: int = 64
    up: float = math.radians(3.0)
    down: float = math.radians(25.0)
    max_range: float = 40.0
    min_range: float = 0.5
    noise_sigma: float = 0.0
    mount_height: float = 1.73

    def projection(self) -> ProjectionConfig:
        return ProjectionConfig(self.width, self.height, f_up=self.down, f_down=self.up)

    def ray_directions(self) -> np.ndarray:
        """Unit directions ``(h*w, 3)`` through the centre of each image cell, row-major."""
        u = np.arange(self.width) + 0.5
        v = np.arange(self.height) + 0.5
        yaw = np.pi * (1.0 - 2.0 * u / self.width)
        pitch = (1.0 - v / self.height) * (self.up + self.down) - self.down
        pp, yy = np.meshgrid(pitch, yaw, indexing="ij")
        cp = np.cos(pp)
        return np.stack([cp * np.cos(yy), cp * np.sin(yy), np.sin(pp)], axis=-1).reshape(-1, 3)


@dataclass(frozen=True)
class GroundPlane:
    """``z = tan(slope) * x + offset`` in the global frame."""

    slope: float = 0.0
    offset: float = 0.0

    def height(self, x, y=None):
        return math.tan(self.slope) * np.asarray(x, dtype=float) + self.offset

    @property
    def normal(self) -> np.ndarray:
        return np.array([-math.sin(self.slope), 0.0, math.cos(self.slope)])

    @property
    def d(self) -> float:
        return self.offset * math.cos(self.slope)


@dataclass(frozen=True)
class StaticBox:
    box: BBox
    semantic: int = BUILDING_CLASS


@dataclass(frozen=True)
class Actor:
    """Box moving along ``waypoints`` (x, y) at ``speed`` m/s.

    The box rests ``clearance`` metres above the ground unless ``z`` fixes
    its bottom. ``bounce`` walks the path back and forth; otherwise the actor
    leaves the scene at the end of its path. ``hidden`` lists inclusive frame
    ranges in which the actor is occluded; ``offsets`` maps a frame to an
    extra (dx, dy) displacement.
    """

    dims: tuple[float, float, float]
    waypoints: tuple[tuple[float, float], ...]
    speed: float = 1.5
    semantic: int = MOVING_PERSON
    clearance: float = 0.3
    z: float | None = None
    start_frame: int = 0
    end_frame: int | None = None
    bounce: bool = False
    hidden: tuple[tuple[int, int], ...] = ()
    offsets: tuple[tuple[int, float, float], ...] = ()

    def path_length(self) -> float:
        wp = np.asarray(self.waypoints, dtype=float).reshape(-1, 2)
        return float(np.hypot(*np.diff(wp, axis=0).T).sum()) if len(wp) > 1 else 0.0

    def visible(self, frame: int, dt: float = 0.1) -> bool:
        if frame < self.start_frame or (self.end_frame is not None and frame > self.end_frame):
            return False
        if not self.bounce and self.speed > 0 and self.speed * dt * (frame - self.start_frame) > self.path_length():
            return False
        return not any(a <= frame <= b for a, b in self.hidden)

    def path_position(self, s: float) -> tuple[float, float, float]:
        """Point and heading at arc length ``s`` along the waypoint polyline."""
        wp = np.asarray(self.waypoints, dtype=float).reshape(-1, 2)
        if len(wp) == 1:
            return float(wp[0, 0]), float(wp[0, 1]), 0.0
        seg = np.diff(wp, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        total = float(seg_len.sum())
        if total == 0:
            return float(wp[0, 0]), float(wp[0, 1]), 0.0
        back = False
        if self.bounce:
            s = s % (2 * total)
            if s > total:
                s, back = 2 * total - s, True
        else:
            s = min(s, total)
        i = int(np.searchsorted(np.cumsum(seg_len), s, side="left"))
        i = min(i, len(seg) - 1)
        before = float(seg_len[:i].sum())
        frac = (s - before) / seg_len[i] if seg_len[i] > 0 else 0.0
        p = wp[i] + frac * seg[i]
        heading = math.atan2(seg[i, 1], seg[i, 0]) + (math.pi if back else 0.0)
        return float(p[0]), float(p[1]), heading

    def box_at(self, frame: int, dt: float, ground: GroundPlane) -> BBox:
        s = self.speed * dt * max(0, frame - self.start_frame)
        x, y, heading = self.path_position(s)
        for f, dx, dy in self.offsets:
            if f == frame:
                x, y = x + dx, y + dy
        l, w, h = self.dims
        bottom = self.z if self.z is not None else float(ground.height(x)) + self.clearance
        return BBox(x, y, bottom + h / 2, heading, l, w, h)


@dataclass(frozen=True)
class SensorPath:
    """Sensor positions (x, y) followed at ``speed`` m/s, kept level at mount height."""

    waypoints: tuple[tuple[float, float], ...] = ((0.0, 0.0),)
    speed: float = 0.0
    yaw: float = 0.0

    def pose(self, frame: int, dt: float, ground: GroundPlane, mount: float) -> Pose:
        walker = Actor((1.0, 1.0, 1.0), self.waypoints, self.speed)
        x, y, heading = walker.path_position(self.speed * dt * frame)
        yaw = heading if self.speed > 0 and len(self.waypoints) > 1 else self.yaw
        return Pose.from_yaw(yaw, (x, y, float(ground.height(x)) + mount))


@dataclass(frozen=True)
class SceneSpec:
    name: str = "scene"
    n_frames: int = 10
    seed: int = 0
    frame_dt: float = 0.1
    ground: GroundPlane | None = field(default_factory=GroundPlane)
    statics: tuple[StaticBox, ...] = ()
    actors: tuple[Actor, ...] = ()
    sensor: SensorModel = field(default_factory=SensorModel)
    path: SensorPath = field(default_factory=SensorPath)

    def __post_init__(self):
        if self.n_frames < 0:
            raise ValueError("n_frames must be non-negative")
        if self.frame_dt <= 0:
            raise ValueError("frame_dt must be positive")


@dataclass
class SyntheticSequence:
    spec: SceneSpec
    scans: list[Scan]
    poses: list[Pose]
    labels: list[np.ndarray]
    # rows: frame, actor id, cx, cy, cz, theta, l, w, h (global frame)
    tracks: np.ndarray

    def __len__(self) -> int:
        return len(self.scans)

    def frames(self):
        return zip(self.scans, self.poses)

    def write(self, root) -> Path:
        times = [s.timestamp for s in self.scans]
        root = write_sequence(root, [s.points for s in self.scans], self.poses, self.labels, times)
        with open(Path(root) / "tracks.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "actor", "cx", "cy", "cz", "theta", "l", "w", "h"])
            for row in self.tracks.tolist():
                w.writerow([int(row[0]), int(row[1])] + [f"{v:.9g}" for v in row[2:]])
        return Path(root)


def cast_plane(origin, dirs, normal, d) -> np.ndarray:
    """Ray parameter of the hit with plane ``normal . p = d`` (inf when missed)."""
    denom = dirs @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (d - origin @ normal) / denom
    return np.where(np.isfinite(t) & (t > 0), t, np.inf)


def cast_box(origin, dirs, box: BBox) -> np.ndarray:
    """Ray parameter of the first hit with an oriented box (slab test)."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # global -> box
    o = rot @ (np.asarray(origin, dtype=float) - box.center)
    d = dirs @ rot.T
    half = np.array([box.l, box.w, box.h]) / 2
    d = np.where(d == 0.0, 1e-300, d)
    with np.errstate(over="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def contains(box: BBox, p) -> bool:
    c, s = math.cos(box.theta), math.sin(box.theta)
    q = np.asarray(p, dtype=float) - box.center
    lx, ly = c * q[0] + s * q[1], -s * q[0] + c * q[1]
    return abs(lx) <= box.l / 2 and abs(ly) <= box.w / 2 and abs(q[2]) <= box.h / 2


def frame_rng(seed: int, frame: int) -> np.random.Generator:
    """Independent stream per frame, so frames can be generated in any order."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(frame,)))


_STATIC_CACHE: dict = {}


def _static_hits(spec: SceneSpec, pose: Pose, dirs, gdirs, frame: int):
    """Ground and static-box hits; reused while the sensor stands still."""
    key = (spec.ground, spec.statics, spec.sensor, pose.matrix().tobytes())
    hit = _STATIC_CACHE.get(key)
    if hit is None:
        ground = spec.ground or GroundPlane()
        origin = pose.translation
        best = np.full(len(dirs), np.inf)
        label = np.full(len(dirs), NO_HIT, dtype=np.int64)
        if spec.ground is not None:
            t = cast_plane(origin, gdirs, ground.normal, ground.d)
            closer = t < best
            best[closer], label[closer] = t[closer], GROUND_CLASS
        for sb in spec.statics:
            if contains(sb.box, origin):
                raise ValueError(f"frame {frame}: sensor origin inside a static box")
            t = cast_box(origin, gdirs, sb.box)
            closer = t < best
            best[closer], label[closer] = t[closer], sb.semantic
        _STATIC_CACHE.clear()
        _STATIC_CACHE[key] = hit = (best, label)
    return hit[0].copy(), hit[1].copy()


def render_frame(spec: SceneSpec, frame: int, dirs: np.ndarray | None = None):
    """Scan, pose, labels and visible actor boxes for one frame."""
    sensor = spec.sensor
    ground = spec.ground or GroundPlane()
    if dirs is None:
        dirs = sensor.ray_directions()
    pose = spec.path.pose(frame, spec.frame_dt, ground, sensor.mount_height)
    origin = pose.translation
    gdirs = dirs @ pose.rotation.T

    best, label = _static_hits(spec, pose, dirs, gdirs, frame)
    boxes = []
    for k, actor in enumerate(spec.actors):
        box = actor.box_at(frame, spec.frame_dt, ground)
        if contains(box, origin):
            raise ValueError(f"frame {frame}: actor {k} intersects the sensor origin")
        if not actor.visible(frame, spec.frame_dt):
            continue
        boxes.append((k, box))
        t = cast_box(origin, gdirs, box)
        closer = t < best
        best[closer] = t[closer]
        label[closer] = actor.semantic | ((k + 1) << 16)

    keep = (best >= sensor.min_range) & (best <= sensor.max_range)
    r = best[keep]
    if sensor.noise_sigma > 0:
        r = r + frame_rng(spec.seed, frame).normal(0.0, sensor.noise_sigma, len(r))
        r = np.maximum(r, 1e-3)
    points = dirs[keep] * r[:, None]
    timestamp = round(frame * spec.frame_dt, 9)
    return Scan(frame, timestamp, points), pose, label[keep].astype(np.uint32), boxes


def generate(spec: SceneSpec) -> SyntheticSequence:
    dirs = spec.sensor.ray_directions()
    scans, poses, labels, rows = [], [], [], []
    for f in range(spec.n_frames):
        scan, pose, lab, boxes = render_frame(spec, f, dirs)
        scans.append(scan)
        poses.append(pose)
        labels.append(lab)
        for k, b in boxes:
            rows.append([f, k + 1, *b.to_array()])
    tracks = np.array(rows, dtype=float).reshape(-1, 9)
    return SyntheticSequence(spec, scans, poses, labels, tracks)


# ---------------------------------------------------------------- scenes

def _wall(x0, y0, x1, y1, height=3.0, thickness=0.3, ground=GroundPlane()) -> StaticBox:
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    length = math.hypot(x1 - x0, y1 - y0)
    bottom = float(ground.height(cx))
    return StaticBox(BBox(cx, cy, bottom + height / 2, math.atan2(y1 - y0, x1 - x0), length, thickness, height))


def _block(cx, cy, l, w, h, theta=0.0, ground=GroundPlane(), semantic=BUILDING_CLASS) -> StaticBox:
    return StaticBox(BBox(cx, cy, float(ground.height(cx)) + h / 2, theta, l, w, h), semantic)


WALKER = (0.6, 0.5, 1.5)
CAR = (3.0, 1.6, 1.4)


def _flat(offset=-1.73) -> GroundPlane:
    return GroundPlane(0.0, offset)


def crossing_walkers(n_frames: int = 200, seed: int = 0, noise: float = 0.01) -> SceneSpec:
    """Stationary sensor in a walled yard with pillars, blocks and a parked car.

    Five walkers cross the yard once each. Paths intersect only where the
    walkers pass within a few seconds of one another.
    """
    g = _flat()
    statics = (
        _wall(-12, 14, 16, 14, ground=g),
        _wall(-12, -14, 16, -14, ground=g),
        _wall(20, -10, 20, 10, ground=g),
        _block(8, 7, 1.0, 1.0, 2.5, ground=g),
        _block(8, -7, 1.0, 1.0, 2.5, ground=g),
        _block(-6, 8, 2.0, 2.0, 2.0, ground=g),
        _block(-8, -9, CAR[0], CAR[1], CAR[2], ground=g, semantic=CAR_CLASS),
        _block(16, 8, 1.5, 4.0, 1.2, theta=0.3, ground=g),
    )
    actors = (
        Actor(WALKER, ((6, -11), (6, 11)), speed=1.4),
        Actor(WALKER, ((-3, 11), (-3, -11)), speed=1.2),
        Actor(WALKER, ((-10, 4), (16, 4)), speed=1.5),
        Actor(WALKER, ((12, -5), (-9, -5)), speed=1.3),
        Actor(WALKER, ((11, 10), (11, -3)), speed=1.1, start_frame=80),
    )
    return SceneSpec("crossing_walkers", n_frames, seed, 0.1, g, statics, actors,
                     SensorModel(noise_sigma=noise), SensorPath(((0.0, 0.0),)))


def parked_car_jitter(n_frames: int = 200, seed: int = 0, noise: float = 0.01) -> SceneSpec:
    """A parked car whose box is displaced for three frames, plus one walker.

    The displacement imitates segmentation jitter: the car keeps its static
    ground-truth class throughout.
    """
    g = _flat()
    jitter = ((3, 0.8, 0.0), (4, -0.8, 0.0), (5, 0.8, 0.0))
    actors = (
        Actor(CAR, ((8.0, 5.0),), speed=0.0, semantic=CAR_CLASS, clearance=0.2, offsets=jitter),
        Actor(WALKER, ((4, -10), (4, 10)), speed=1.3),
    )
    statics = (_wall(-10, 12, 14, 12, ground=g), _block(-6, -6, 2.0, 2.0, 2.0, ground=g))
    return SceneSpec("parked_car_jitter", n_frames, seed, 0.1, g, statics, actors,
                     SensorModel(noise_sigma=noise), SensorPath(((0.0, 0.0),)))


def tracking_gap(n_frames: int = 140, seed: int = 0, noise: float = 0.01, gap: tuple[int, int] = (70, 73),
                 flicker: tuple[int, ...] = (76, 80)) -> SceneSpec:
    """A walker occluded for a short window, then seen only in isolated frames.

    The occlusion kills the track; each isolated sighting spawns a short
    track whose displacement is too small to look dynamic on its own.
    """
    g = _flat()
    hidden = [gap]
    f0 = gap[1] + 1
    for f in flicker:
        if f > f0:
            hidden.append((f0, f - 1))
        f0 = f + 1
    hidden.append((f0, f0 + 3))
    actors = (Actor(WALKER, ((5, -12), (5, 12)), speed=1.2, hidden=tuple(hidden)),)
    statics = (_wall(-8, 14, 12, 14, ground=g), _block(-6, -6, 2.0, 2.0, 2.0, ground=g),
               _block(10, -8, 1.0, 1.0, 2.5, ground=g))
    return SceneSpec("tracking_gap", n_frames, seed, 0.1, g, statics, actors,
                     SensorModel(noise_sigma=noise), SensorPath(((0.0, 0.0),)))


def steep_hill(n_frames: int = 60, seed: int = 0, noise: float = 0.01, slope_deg: float = 10.0) -> SceneSpec:
    """Level sensor driving up a 10 degree incline with obstacles standing on it."""
    g = GroundPlane(math.radians(slope_deg), -1.73)
    statics = (
        _block(12, 4, 1.0, 1.0, 2.0, ground=g),
        _block(18, -5, 2.0, 2.0, 1.5, ground=g),
        _block(-6, 6, 1.5, 1.5, 2.0, ground=g),
    )
    actors = (Actor(WALKER, ((10, -8), (10, 8)), speed=1.2),)
    return SceneSpec("steep_hill", n_frames, seed, 0.1, g, statics, actors,
                     SensorModel(noise_sigma=noise), SensorPath(((0.0, 0.0), (30.0, 0.0)), speed=1.0))


def long_corridor(n_frames: int = 150, seed: int = 0, noise: float = 0.01) -> SceneSpec:
    """Sensor moving down a colonnade of pillars and short wall panels; walkers pass."""
    g = _flat()
    statics = []
    for x in range(0, 80, 8):
        statics.append(_block(x, 4.0, 0.6, 0.6, 3.0, ground=g))
        statics.append(_block(x + 4, -4.0, 0.6, 0.6, 3.0, ground=g))
        statics.append(_wall(x + 1.5, 7.0, x + 4.5, 7.0, ground=g))
    actors = (
        Actor(WALKER, ((20, 2.5), (60, 2.5)), speed=1.3),
        Actor(WALKER, ((50, -2.0), (10, -2.0)), speed=1.2, start_frame=20),
    )
    return SceneSpec("long_corridor", n_frames, seed, 0.1, g, tuple(statics), actors,
                     SensorModel(noise_sigma=noise), SensorPath(((0.0, 0.0), (70.0, 0.0)), speed=2.0))


def ground_only(n_frames: int = 3, seed: int = 0, noise: float = 0.0) -> SceneSpec:
    return SceneSpec("ground_only", n_frames, seed, 0.1, _flat(), (), (), SensorModel(noise_sigma=noise))


SCENES: dict[str, Callable[..., SceneSpec]] = {
    "crossing_walkers": crossing_walkers,
    "parked_car_jitter": parked_car_jitter,
    "tracking_gap": tracking_gap,
    "steep_hill": steep_hill,
    "long_corridor": long_corridor,
    "ground_only": ground_only,
}


def scene(name: str, **kwargs) -> SceneSpec:
    key = name.replace("-", "_")
    if key not in SCENES:
        raise KeyError(f"unknown scene {name!r}; choose from {', '.join(sorted(SCENES))}")
    return SCENES[key](**kwargs)


def with_seed(spec: SceneSpec, seed: int) -> SceneSpec:
    return replace(spec, seed=seed)
