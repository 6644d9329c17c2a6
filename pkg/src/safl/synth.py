"""Synthetic LiDAR sequences: obstacle worlds, trajectories and ray-cast scans.

Worlds are flat: axis-aligned boxes and vertical cylinders scattered around a
piecewise-linear trajectory.  Scans are ideal ray-cast range returns (no ground
plane), expressed in the sensor frame with constant intensity 0.5.  Everything
is deterministic given the spec.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import PointCloud, Pose, rotation_z

_MIN_RANGE = 0.5


@dataclass(frozen=True)
class SyntheticWorldSpec:
    """Parameters of a synthetic world and its scan sequence.

    trajectory is an (W, 2) array of x-y waypoints.  Frames are spaced evenly
    by arc length along it; the heading follows the segment direction.  Each
    loop segment ((q0, q1), (r0, r1)) re-places query frames q0..q1 at the
    poses of reference frames r0..r1 (linearly index-mapped, with a small
    deterministic jitter kept below 2 m), which plants a genuine revisit.
    """

    n_frames: int
    trajectory: tuple
    obstacle_seed: int = 0
    loop_segments: tuple = ()
    obstacle_density: float = 3.0  # obstacles per 100 m^2
    rays_azimuth: int = 256
    rays_elevation: int = 16
    elevation_span: tuple = (-20.0, 5.0)  # degrees
    max_range: float = 50.0
    sensor_height: float = 1.7
    range_noise: float = 0.0
    keepout_radius: float = 3.0

    def __post_init__(self):
        for (q0, q1), (r0, r1) in self.loop_segments:
            if not (0 <= q0 <= q1 < self.n_frames
                    and 0 <= r0 <= r1 < self.n_frames):
                raise ValueError(
                    f"loop segment out of range: {(q0, q1, r0, r1)}"
                )

    def waypoints(self) -> np.ndarray:
        return np.asarray(self.trajectory, dtype=np.float64).reshape(-1, 2)


def _segment_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Distance from each point to each segment a[k]->b[k]; returns (N, K)."""
    ab = b - a  # (K, 2)
    ap = points[:, None, :] - a[None, :, :]  # (N, K, 2)
    denom = np.maximum((ab * ab).sum(axis=1), 1e-12)
    t = np.clip((ap * ab[None, :, :]).sum(axis=2) / denom, 0.0, 1.0)
    closest = a[None, :, :] + t[:, :, None] * ab[None, :, :]
    return np.linalg.norm(points[:, None, :] - closest, axis=2)


@dataclass(eq=False)
class ObstacleField:
    """Boxes as (cx, cy, hx, hy, z0, z1); cylinders as (cx, cy, r, z0, z1)."""

    boxes: np.ndarray
    cylinders: np.ndarray


def build_obstacles(spec: SyntheticWorldSpec) -> ObstacleField:
    """Scatter obstacles around the trajectory, keeping the path clear."""
    rng = np.random.default_rng(spec.obstacle_seed)
    way = spec.waypoints()
    lo = way.min(axis=0) - 25.0
    hi = way.max(axis=0) + 25.0
    area = float(np.prod(hi - lo))
    count = max(1, int(round(spec.obstacle_density * area / 100.0)))

    seg_a, seg_b = way[:-1], way[1:]
    boxes, cylinders = [], []
    attempts = 0
    while len(boxes) + len(cylinders) < count and attempts < 50 * count:
        attempts += 1
        center = rng.uniform(lo, hi)
        if len(way) > 1:
            d = _segment_distances(center[None], seg_a, seg_b).min()
        else:
            d = np.linalg.norm(center - way[0])
        if d < spec.keepout_radius + 2.0:
            continue
        if rng.uniform() < 0.6:
            hx, hy = rng.uniform(0.8, 5.0, size=2)
            height = rng.uniform(2.5, 9.0)
            boxes.append([center[0], center[1], hx, hy, 0.0, height])
        else:
            radius = rng.uniform(0.3, 1.5)
            height = rng.uniform(2.0, 8.0)
            cylinders.append([center[0], center[1], radius, 0.0, height])
    return ObstacleField(
        boxes=np.array(boxes, dtype=np.float64).reshape(-1, 6),
        cylinders=np.array(cylinders, dtype=np.float64).reshape(-1, 5),
    )


def trajectory_poses(spec: SyntheticWorldSpec) -> list[Pose]:
    """Evenly spaced poses along the waypoint polyline, heading tangent."""
    way = spec.waypoints()
    if len(way) < 2:
        raise ValueError("trajectory needs at least two waypoints")
    seg = np.diff(way, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    if np.any(seg_len <= 0):
        raise ValueError("trajectory has a zero-length segment")
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    if spec.n_frames <= 0:
        s_values = np.zeros(0)
    elif spec.n_frames == 1:
        s_values = np.array([0.0])
    else:
        s_values = np.linspace(0.0, total, spec.n_frames)

    poses = []
    for i, s in enumerate(s_values):
        k = min(np.searchsorted(cum, s, side="right") - 1, len(seg) - 1)
        k = max(k, 0)
        frac = (s - cum[k]) / seg_len[k]
        xy = way[k] + frac * seg[k]
        yaw = np.arctan2(seg[k, 1], seg[k, 0])
        poses.append(
            Pose(
                rotation_z(yaw),
                np.array([xy[0], xy[1], spec.sensor_height]),
                timestamp_index=i,
            )
        )

    # plant revisits: query frames take (jittered) reference poses
    rng = np.random.default_rng(spec.obstacle_seed + 1)
    for (q0, q1), (r0, r1) in spec.loop_segments:
        for q in range(q0, q1 + 1):
            frac = (q - q0) / max(q1 - q0, 1)
            r = r0 + frac * (r1 - r0)
            k = min(int(r), r1 - 1) if r1 > r0 else r0
            ref = poses[k]
            nxt = poses[min(k + 1, r1)]
            t = ref.translation + (r - k) * (nxt.translation - ref.translation)
            jitter = rng.uniform(-0.8, 0.8, size=2)
            t = t + np.array([jitter[0], jitter[1], 0.0])
            yaw = ref.yaw() + rng.uniform(-0.1, 0.1)
            poses[q] = Pose(rotation_z(yaw), t, timestamp_index=q)
    return poses


def _ray_directions(spec: SyntheticWorldSpec) -> np.ndarray:
    az = np.linspace(0.0, 2 * np.pi, spec.rays_azimuth, endpoint=False)
    el = np.deg2rad(
        np.linspace(spec.elevation_span[0], spec.elevation_span[1],
                    spec.rays_elevation)
    )
    azg, elg = np.meshgrid(az, el)
    dirs = np.stack(
        [np.cos(elg) * np.cos(azg), np.cos(elg) * np.sin(azg), np.sin(elg)],
        axis=-1,
    )
    return dirs.reshape(-1, 3)


def _intersect_boxes(origin, dirs, boxes):
    """Nearest positive hit parameter per ray against AABBs; inf if none."""
    if len(boxes) == 0:
        return np.full(len(dirs), np.inf)
    lo = np.stack([boxes[:, 0] - boxes[:, 2], boxes[:, 1] - boxes[:, 3],
                   boxes[:, 4]], axis=1)
    hi = np.stack([boxes[:, 0] + boxes[:, 2], boxes[:, 1] + boxes[:, 3],
                   boxes[:, 5]], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs  # (R, 3), infs where parallel
        t0 = (lo[None, :, :] - origin) * inv[:, None, :]
        t1 = (hi[None, :, :] - origin) * inv[:, None, :]
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # parallel rays: in-slab iff origin inside; encode as -inf/inf
    parallel = dirs == 0.0
    inside = (origin >= lo) & (origin <= hi)  # (B, 3)
    for axis in range(3):
        par = parallel[:, axis]
        if par.any():
            tmin[par, :, axis] = np.where(inside[:, axis], -np.inf, np.inf)
            tmax[par, :, axis] = np.where(inside[:, axis], np.inf, -np.inf)
    enter = tmin.max(axis=2)
    exit_ = tmax.min(axis=2)
    hit = (enter <= exit_) & (exit_ > _MIN_RANGE)
    t = np.where(enter > _MIN_RANGE, enter, exit_)
    t = np.where(hit, t, np.inf)
    return t.min(axis=1)


def _intersect_cylinders(origin, dirs, cyls):
    """Nearest positive hit parameter per ray against vertical cylinders."""
    if len(cyls) == 0:
        return np.full(len(dirs), np.inf)
    ox = origin[0] - cyls[:, 0]
    oy = origin[1] - cyls[:, 1]
    dx, dy, dz = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
    a = dx ** 2 + dy ** 2  # (R, 1)
    b = 2 * (dx * ox[None, :] + dy * oy[None, :])
    c = ox[None, :] ** 2 + oy[None, :] ** 2 - cyls[None, :, 2] ** 2
    disc = b ** 2 - 4 * a * c
    best = np.full((len(dirs), len(cyls)), np.inf)
    valid = (disc >= 0) & (a > 1e-12)
    sq = np.sqrt(np.where(valid, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        for sign in (-1.0, 1.0):
            t = (-b + sign * sq) / (2 * a)
            z = origin[2] + t * dz
            ok = (
                valid
                & (t > _MIN_RANGE)
                & (z >= cyls[None, :, 3])
                & (z <= cyls[None, :, 4])
            )
            best = np.where(ok & (t < best), t, best)
    return best.min(axis=1)


def raycast_scan(pose: Pose, field: ObstacleField, spec: SyntheticWorldSpec,
                 frame_id: int = 0) -> PointCloud:
    """Cast the frame's ray bundle from a pose; returns sensor-frame returns."""
    dirs_sensor = _ray_directions(spec)
    dirs_world = dirs_sensor @ pose.rotation.T
    origin = pose.translation
    t_box = _intersect_boxes(origin, dirs_world, field.boxes)
    t_cyl = _intersect_cylinders(origin, dirs_world, field.cylinders)
    t = np.minimum(t_box, t_cyl)
    if spec.range_noise > 0:
        rng = np.random.default_rng([spec.obstacle_seed, frame_id])
        t = t + rng.normal(0.0, spec.range_noise, size=len(t))
    keep = np.isfinite(t) & (t > _MIN_RANGE) & (t <= spec.max_range)
    pts = dirs_sensor[keep] * t[keep, None]
    points = np.hstack(
        [pts, np.full((len(pts), 1), 0.5)]
    ).astype(np.float32)
    return PointCloud(points, frame_id=frame_id)


def generate_synthetic_sequence(spec: SyntheticWorldSpec):
    """Build the world and render every frame.  Returns (clouds, poses)."""
    field = build_obstacles(spec)
    poses = trajectory_poses(spec)
    clouds = [
        raycast_scan(pose, field, spec, frame_id=i)
        for i, pose in enumerate(poses)
    ]
    return clouds, poses
