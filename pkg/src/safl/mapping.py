"""Local occupancy mapping and map extraction.

The map is a hash of fixed-size leaf cells (an octree collapsed to its leaf
level) holding occupancy log-odds.  Scans are integrated with per-leaf ray
traversal: every cell a ray passes through gets a miss update, the endpoint
cell gets a hit, and rays longer than the cull radius are clipped and count
as free space only.  After every insertion, leaves whose centers lie farther
than the cull radius from the sensor are dropped, so the map stays local.

Log-odds are stored as raw sums and clamped into [l_min, l_max] on every read,
which keeps each cell's value an exact function of its hit/miss counts.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from numba import njit, types
from numba.typed import Dict

from .dataset import PointCloud, Pose, rotation_z

# leaf-coordinate packing: each signed index fits 21 bits
_KEY_BASE = np.int64(1) << 21
_KEY_OFFSET = np.int64(1) << 20


@dataclass(frozen=True)
class OctreeConfig:
    """Occupancy-update model and locality bounds."""

    leaf_resolution: float = 0.4
    cull_radius: float = 30.0
    l_hit: float = math.log(0.7 / 0.3)
    l_miss: float = math.log(0.4 / 0.6)
    l_min: float = -3.5
    l_max: float = 3.5
    occ_threshold: float = 0.5

    def __post_init__(self):
        if self.leaf_resolution <= 0 or self.cull_radius <= 0:
            raise ValueError("leaf_resolution and cull_radius must be positive")
        if not (self.l_hit > 0 > self.l_miss):
            raise ValueError("need l_hit > 0 and l_miss < 0")
        if not (self.l_min < 0 < self.l_max):
            raise ValueError("need l_min < 0 < l_max")
        if not (0.0 < self.occ_threshold < 1.0):
            raise ValueError("occ_threshold must lie in (0, 1)")

    @property
    def occ_log_odds(self) -> float:
        """Log-odds value above which a cell counts as occupied."""
        return math.log(self.occ_threshold / (1.0 - self.occ_threshold))


def _new_store():
    return Dict.empty(key_type=types.int64, value_type=types.float64)


@njit(cache=True)
def _pack(ix, iy, iz):
    return ((ix + _KEY_OFFSET) * _KEY_BASE + (iy + _KEY_OFFSET)) * _KEY_BASE + (
        iz + _KEY_OFFSET
    )


@njit(cache=True)
def _integrate(store, ox, oy, oz, pts, res, l_hit, l_miss, cull_r):
    """Ray-traverse every point from the sensor origin, updating log-odds."""
    inv = 1.0 / res
    ix0 = np.int64(math.floor(ox * inv))
    iy0 = np.int64(math.floor(oy * inv))
    iz0 = np.int64(math.floor(oz * inv))
    for n in range(pts.shape[0]):
        dx = pts[n, 0] - ox
        dy = pts[n, 1] - oy
        dz = pts[n, 2] - oz
        dist = math.sqrt(dx * dx + dy * dy + dz * dz)
        clipped = dist > cull_r
        if clipped:
            scale = cull_r / dist
            dx *= scale
            dy *= scale
            dz *= scale
        ex = ox + dx
        ey = oy + dy
        ez = oz + dz
        ixe = np.int64(math.floor(ex * inv))
        iye = np.int64(math.floor(ey * inv))
        ize = np.int64(math.floor(ez * inv))

        ix, iy, iz = ix0, iy0, iz0
        sx = np.int64(1) if dx > 0 else np.int64(-1)
        sy = np.int64(1) if dy > 0 else np.int64(-1)
        sz = np.int64(1) if dz > 0 else np.int64(-1)
        if dx != 0.0:
            tdx = res / abs(dx)
            nxt = (ix + (1 if dx > 0 else 0)) * res
            tmx = (nxt - ox) / dx
        else:
            tdx = np.inf
            tmx = np.inf
        if dy != 0.0:
            tdy = res / abs(dy)
            nxt = (iy + (1 if dy > 0 else 0)) * res
            tmy = (nxt - oy) / dy
        else:
            tdy = np.inf
            tmy = np.inf
        if dz != 0.0:
            tdz = res / abs(dz)
            nxt = (iz + (1 if dz > 0 else 0)) * res
            tmz = (nxt - oz) / dz
        else:
            tdz = np.inf
            tmz = np.inf

        guard = abs(ixe - ix) + abs(iye - iy) + abs(ize - iz) + 3
        while (ix != ixe or iy != iye or iz != ize) and guard > 0:
            guard -= 1
            key = _pack(ix, iy, iz)
            store[key] = store.get(key, 0.0) + l_miss
            if tmx <= tmy and tmx <= tmz:
                ix += sx
                tmx += tdx
            elif tmy <= tmz:
                iy += sy
                tmy += tdy
            else:
                iz += sz
                tmz += tdz
        key = _pack(ixe, iye, ize)
        store[key] = store.get(key, 0.0) + (l_miss if clipped else l_hit)


@njit(cache=True)
def _cull(store, ox, oy, oz, res, cull_r):
    """Drop leaves whose centers are farther than cull_r from the sensor."""
    limit = cull_r * cull_r
    doomed = np.empty(len(store), dtype=np.int64)
    count = 0
    for key in store:
        rest = key // _KEY_BASE
        iz = key % _KEY_BASE - _KEY_OFFSET
        iy = rest % _KEY_BASE - _KEY_OFFSET
        ix = rest // _KEY_BASE - _KEY_OFFSET
        cx = (ix + 0.5) * res - ox
        cy = (iy + 0.5) * res - oy
        cz = (iz + 0.5) * res - oz
        if cx * cx + cy * cy + cz * cz > limit:
            doomed[count] = key
            count += 1
    for i in range(count):
        del store[doomed[i]]


@njit(cache=True)
def _export(store):
    keys = np.empty(len(store), dtype=np.int64)
    vals = np.empty(len(store), dtype=np.float64)
    i = 0
    for key, value in store.items():
        keys[i] = key
        vals[i] = value
        i += 1
    return keys, vals


@njit(cache=True)
def _lookup(store, key):
    if key in store:
        return True, store[key]
    return False, 0.0


def _keys_to_centers(keys: np.ndarray, res: float) -> np.ndarray:
    rest = keys // _KEY_BASE
    iz = keys % _KEY_BASE - _KEY_OFFSET
    iy = rest % _KEY_BASE - _KEY_OFFSET
    ix = rest // _KEY_BASE - _KEY_OFFSET
    return (np.stack([ix, iy, iz], axis=1) + 0.5) * res


class LocalOctree:
    """Sliding local occupancy map around the most recent sensor pose."""

    def __init__(self, config: OctreeConfig = OctreeConfig()):
        self.config = config
        self.sensor_pose: Pose | None = None
        self._store = _new_store()
        self._cache = None

    def __len__(self) -> int:
        return len(self._store)

    def update_with_scan(self, cloud: PointCloud, pose: Pose) -> "LocalOctree":
        """Integrate one sensor-frame scan taken at pose, then cull."""
        cfg = self.config
        pts = pose.transform(cloud.xyz.astype(np.float64))
        ox, oy, oz = pose.translation
        _integrate(
            self._store, ox, oy, oz, np.ascontiguousarray(pts),
            cfg.leaf_resolution, cfg.l_hit, cfg.l_miss, cfg.cull_radius,
        )
        _cull(self._store, ox, oy, oz, cfg.leaf_resolution, cfg.cull_radius)
        self.sensor_pose = pose
        self._cache = None
        return self

    def leaf_arrays(self):
        """All leaves as (centers (N, 3) float64, clamped log-odds (N,))."""
        if self._cache is None:
            keys, vals = _export(self._store)
            centers = _keys_to_centers(keys, self.config.leaf_resolution)
            self._cache = (centers, vals)
        centers, vals = self._cache
        return centers, np.clip(vals, self.config.l_min, self.config.l_max)

    def occupied_centers(self) -> np.ndarray:
        """Centers of leaves whose occupancy probability exceeds the threshold."""
        centers, log_odds = self.leaf_arrays()
        return centers[log_odds > self.config.occ_log_odds]

    def log_odds_at(self, point) -> float | None:
        """Clamped log-odds of the leaf containing a world point, None if unknown."""
        idx = np.floor(
            np.asarray(point, dtype=np.float64) / self.config.leaf_resolution
        ).astype(np.int64)
        found, value = _lookup(self._store, int(_pack(*idx)))
        if not found:
            return None
        return float(np.clip(value, self.config.l_min, self.config.l_max))

    def occupancy_probability_at(self, point) -> float | None:
        log_odds = self.log_odds_at(point)
        if log_odds is None:
            return None
        return 1.0 - 1.0 / (1.0 + math.exp(log_odds))


# ---------------------------------------------------------------------------
# map extraction

@dataclass(eq=False)
class VoxelGrid3D:
    """Cubic binary grid covering the cull cube, centered on the sensor.

    origin is the world position of the grid center (the extraction pose);
    axes follow the extraction frame (sensor yaw by default).
    """

    occupancy: np.ndarray  # (G, G, G) uint8
    origin: np.ndarray
    cell_size: float


@dataclass(eq=False)
class TopViewImage:
    """Top-down projection of a voxel grid; pixel (i, j) covers grid (i, j, :)."""

    pixels: np.ndarray  # (H, W) float32
    origin: np.ndarray
    cell_size: float


def extract_voxel_grid(tree: LocalOctree, grid_size: int = 32,
                       frame: str = "yaw", pose: Pose | None = None) -> VoxelGrid3D:
    """Rasterize occupied leaves into a (G, G, G) binary grid.

    The grid spans exactly the cull cube (side 2 * cull_radius) around the
    extraction pose.  frame "yaw" rotates the grid into the sensor heading so
    the map is viewpoint-normalized in rotation; "world" keeps world axes.
    A cell is 1 iff some occupied leaf's center falls inside it (half-open
    cell bounds).
    """
    if frame not in ("yaw", "world"):
        raise ValueError(f"unknown extraction frame {frame!r}")
    cfg = tree.config
    radius = cfg.cull_radius
    cell = 2.0 * radius / grid_size
    grid = np.zeros((grid_size, grid_size, grid_size), dtype=np.uint8)
    pose = pose if pose is not None else tree.sensor_pose
    if pose is None:
        return VoxelGrid3D(grid, np.zeros(3), cell)

    occ = tree.occupied_centers()
    if len(occ):
        rel = occ - pose.translation
        if frame == "yaw":
            rel = rel @ rotation_z(pose.yaw())
        idx = np.floor((rel + radius) / cell).astype(np.int64)
        ok = np.all((idx >= 0) & (idx < grid_size), axis=1)
        idx = idx[ok]
        grid[idx[:, 0], idx[:, 1], idx[:, 2]] = 1
    return VoxelGrid3D(grid, pose.translation.copy(), cell)


def project_top_view(grid: VoxelGrid3D, out_shape: tuple | None = None,
                     mode: str = "binary") -> TopViewImage:
    """Project a voxel grid down the z axis.

    mode "binary" is the column-max occupancy; "height" encodes the topmost
    occupied layer as (k_top + 1) / G, 0 for empty columns.  out_shape=None
    keeps the native (G, G); a smaller shape must divide it evenly and uses
    block max pooling; a larger one centers the native image in zero padding.
    """
    occ = grid.occupancy
    g = occ.shape[0]
    if mode == "binary":
        pix = occ.max(axis=2).astype(np.float32)
    elif mode == "height":
        any_occ = occ.max(axis=2).astype(bool)
        k_top = (g - 1) - np.argmax(occ[:, :, ::-1], axis=2)
        pix = np.where(any_occ, (k_top + 1) / g, 0.0).astype(np.float32)
    else:
        raise ValueError(f"unknown projection mode {mode!r}")

    cell = grid.cell_size
    if out_shape is not None and tuple(out_shape) != (g, g):
        h, w = out_shape
        if h != w:
            raise ValueError(f"top view must be square, got {out_shape}")
        if h < g:
            if g % h != 0:
                raise ValueError(f"cannot pool {g} down to {h}")
            f = g // h
            pix = pix.reshape(h, f, h, f).max(axis=(1, 3))
            cell = cell * f
        else:
            pad = np.zeros((h, w), dtype=np.float32)
            off = (h - g) // 2
            pad[off:off + g, off:off + g] = pix
            pix = pad
    return TopViewImage(pix, grid.origin.copy(), cell)


def warmup_kernels() -> None:
    """Force JIT compilation of the mapping kernels on a throwaway map."""
    tree = LocalOctree(OctreeConfig())
    cloud = PointCloud(np.array([[1.0, 0.5, 0.2, 0.5]], dtype=np.float32))
    pose = Pose(np.eye(3), np.zeros(3))
    tree.update_with_scan(cloud, pose)
    tree.log_odds_at([1.0, 0.5, 0.2])
    extract_voxel_grid(tree, grid_size=4)


def mapper_throughput(clouds, poses, config: OctreeConfig = OctreeConfig(),
                      grid_size: int = 32, projection_grid: int = 64) -> float:
    """Wall-clock frames-per-second of the full per-frame mapping step.

    Each frame is integrated, culled, and both map products are extracted
    (the 3-D grid and the top view from its own finer grid).  Kernels are
    JIT-warmed on a separate map before timing starts.
    """
    if len(clouds) < 10:
        raise ValueError("throughput needs at least 10 frames")
    warmup_kernels()
    tree = LocalOctree(config)
    start = time.perf_counter()
    for cloud, pose in zip(clouds, poses):
        tree.update_with_scan(cloud, pose)
        extract_voxel_grid(tree, grid_size=grid_size)
        grid = extract_voxel_grid(tree, grid_size=projection_grid)
        project_top_view(grid)
    elapsed = time.perf_counter() - start
    return len(clouds) / elapsed
