"""Point-cloud frames, sensor poses and viewpoint-noise injection.

Frames use the packed velodyne layout: little-endian float32 quadruples
(x, y, z, intensity), points in the sensor frame, meters.  Pose files hold one
pose per line as 12 whitespace-separated floats, the row-major top three rows
of a 4x4 homogeneous sensor-to-world transform.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MalformedFrame(ValueError):
    """Raised when a binary frame does not parse as packed float32 quadruples."""


class MalformedPose(ValueError):
    """Raised when a pose line does not parse as a rigid transform."""


def rotation_z(yaw: float) -> np.ndarray:
    """Rotation matrix about +z by yaw radians."""
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(eq=False)
class PointCloud:
    """One LiDAR frame: (N, 4) float32 rows of x, y, z, intensity."""

    points: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 4)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]


@dataclass(eq=False)
class Pose:
    """Rigid sensor-to-world transform with a sequence index."""

    rotation: np.ndarray
    translation: np.ndarray
    timestamp_index: int = 0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(
            self.translation, dtype=np.float64
        ).reshape(3)
        if not np.all(np.isfinite(self.rotation)) or not np.all(
            np.isfinite(self.translation)
        ):
            raise ValueError("pose contains non-finite values")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-6 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise ValueError(
                f"rotation is not orthonormal with det +1 (error {err:.2e})"
            )

    def yaw(self) -> float:
        """Heading angle of the sensor x-axis in the world x-y plane."""
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def planar_distance(self, other: "Pose") -> float:
        """Euclidean distance between translations in the x-y plane."""
        d = self.translation[:2] - other.translation[:2]
        return float(np.hypot(d[0], d[1]))

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map sensor-frame (N, 3) points into the world frame."""
        return points @ self.rotation.T + self.translation


@dataclass(frozen=True)
class NoiseSpec:
    """Planar viewpoint perturbation: translation amplitude t_amp in meters,
    heading amplitude r_amp in radians, drawn per frame.

    distribution "uniform" draws from [-amp, amp]; "gaussian" uses amp as the
    standard deviation.  z, roll and pitch are never touched.
    """

    t_amp: float = 0.0
    r_amp: float = 0.0
    seed: int = 0
    distribution: str = "uniform"

    def __post_init__(self):
        if self.t_amp < 0 or self.r_amp < 0:
            raise ValueError("noise amplitudes must be non-negative")
        if self.distribution not in ("uniform", "gaussian"):
            raise ValueError(f"unknown distribution {self.distribution!r}")


# ---------------------------------------------------------------------------
# velodyne frames

def parse_velodyne_frame(data: bytes, frame_id: int = 0) -> PointCloud:
    """Parse packed little-endian float32 (x, y, z, intensity) quadruples.

    Raises MalformedFrame if the byte length is not a multiple of 16 or any
    value is non-finite.  Intensity is clipped into [0, 1].
    """
    if len(data) % 16 != 0:
        raise MalformedFrame(
            f"frame {frame_id}: {len(data)} bytes is not a multiple of 16"
        )
    points = np.frombuffer(data, dtype="<f4").reshape(-1, 4).copy()
    if not np.all(np.isfinite(points)):
        raise MalformedFrame(f"frame {frame_id}: non-finite values")
    points[:, 3] = np.clip(points[:, 3], 0.0, 1.0)
    return PointCloud(points, frame_id=frame_id)


def serialize_velodyne_frame(cloud: PointCloud) -> bytes:
    return np.ascontiguousarray(cloud.points, dtype="<f4").tobytes()


# ---------------------------------------------------------------------------
# pose files

def parse_pose_file(text: str) -> list[Pose]:
    """Parse one 3x4 row-major transform per non-empty line.

    Raises MalformedPose naming the offending 1-based line number.
    """
    poses = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        values = re.split(r"\s+", line.strip())
        if len(values) != 12:
            raise MalformedPose(
                f"line {lineno}: expected 12 values, got {len(values)}"
            )
        try:
            mat = np.array([float(v) for v in values]).reshape(3, 4)
        except ValueError as exc:
            raise MalformedPose(f"line {lineno}: {exc}") from None
        try:
            poses.append(
                Pose(mat[:, :3], mat[:, 3], timestamp_index=len(poses))
            )
        except ValueError as exc:
            raise MalformedPose(f"line {lineno}: {exc}") from None
    return poses


def format_pose_file(poses) -> str:
    lines = []
    for pose in poses:
        mat = np.hstack([pose.rotation, pose.translation[:, None]])
        lines.append(" ".join(f"{v:.9e}" for v in mat.ravel()))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# viewpoint noise

def inject_viewpoint_noise(poses, noise: NoiseSpec) -> list[Pose]:
    """Perturb each pose independently in the x-y plane and heading.

    Heading noise pre-multiplies the rotation (a world-frame yaw), so roll and
    pitch are preserved exactly.  Deterministic given noise.seed.
    """
    rng = np.random.default_rng(noise.seed)
    n = len(poses)
    if noise.distribution == "uniform":
        dx = rng.uniform(-noise.t_amp, noise.t_amp, size=n)
        dy = rng.uniform(-noise.t_amp, noise.t_amp, size=n)
        dyaw = rng.uniform(-noise.r_amp, noise.r_amp, size=n)
    else:
        dx = rng.normal(0.0, noise.t_amp, size=n) if noise.t_amp else np.zeros(n)
        dy = rng.normal(0.0, noise.t_amp, size=n) if noise.t_amp else np.zeros(n)
        dyaw = (
            rng.normal(0.0, noise.r_amp, size=n) if noise.r_amp else np.zeros(n)
        )
    noisy = []
    for i, pose in enumerate(poses):
        rot = rotation_z(dyaw[i]) @ pose.rotation if dyaw[i] else pose.rotation
        t = pose.translation + np.array([dx[i], dy[i], 0.0])
        noisy.append(Pose(rot, t, timestamp_index=pose.timestamp_index))
    return noisy


# ---------------------------------------------------------------------------
# dataset directories

def frame_path(root, index: int) -> Path:
    return Path(root) / "frames" / f"{index:06d}.bin"


def write_dataset(root, clouds, poses) -> None:
    """Write frames/NNNNNN.bin files and a poses.txt alongside."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    for i, cloud in enumerate(clouds):
        frame_path(root, i).write_bytes(serialize_velodyne_frame(cloud))
    (root / "poses.txt").write_text(format_pose_file(poses))


def load_dataset(root):
    """Load (clouds, poses) from a dataset directory, ordered by filename index."""
    root = Path(root)
    frame_files = sorted((root / "frames").glob("*.bin"))
    if not frame_files:
        raise FileNotFoundError(f"no frames/*.bin under {root}")
    clouds = [
        parse_velodyne_frame(p.read_bytes(), frame_id=i)
        for i, p in enumerate(frame_files)
    ]
    poses = parse_pose_file((root / "poses.txt").read_text())
    if len(poses) != len(clouds):
        raise MalformedPose(
            f"{len(poses)} poses for {len(clouds)} frames in {root}"
        )
    return clouds, poses
