"""Maintain a sliding local occupancy map and extract its map products.

Each scan is integrated into a hashed octree with additive log-odds
(clamped hits and misses along each ray), then leaves outside the cull
radius around the sensor are dropped — memory stays bounded no matter how
long the run.  From the tree we extract the two learning inputs: a binary
3-D voxel grid and a 2-D top view, both axis-aligned with the sensor
heading so that pure rotation of the viewpoint mostly renames axes
instead of scrambling content.

Run:  python3 demos/02_local_mapping.py
"""

import pathlib
import time

import numpy as np

from safl.mapping import (LocalOctree, OctreeConfig, extract_voxel_grid,
                          mapper_throughput, project_top_view)
from safl.synth import SyntheticWorldSpec, generate_synthetic_sequence

OUT = pathlib.Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

spec = SyntheticWorldSpec(
    n_frames=60,
    trajectory=((0, 0), (60, 0)),
    rays_azimuth=128,
    rays_elevation=8,
)
clouds, poses = generate_synthetic_sequence(spec)

config = OctreeConfig()
print(f"leaf resolution {config.leaf_resolution} m, "
      f"cull radius {config.cull_radius} m")
print(f"log-odds: hit {config.l_hit:+}, miss {config.l_miss:+}, "
      f"clamp [{config.l_min}, {config.l_max}]")

tree = LocalOctree(config)
sizes = []
for cloud, pose in zip(clouds, poses):
    tree.update_with_scan(cloud, pose)
    sizes.append(len(tree))
print(f"leaves after each scan: first {sizes[0]}, last {sizes[-1]}, "
      f"max {max(sizes)}  (culling keeps the map local)")

# log-odds accumulate per leaf and saturate at the clamp
centers, log_odds = tree.leaf_arrays()
print(f"log-odds range observed: [{log_odds.min():.2f}, {log_odds.max():.2f}]")
occupied = tree.occupied_centers()
print(f"occupied leaves: {len(occupied)} of {len(tree)}")

# the two map products used by the feature learners
t0 = time.time()
grid = extract_voxel_grid(tree, grid_size=32, pose=poses[-1])
top = project_top_view(grid, out_shape=(64, 64))
dt = 1000 * (time.time() - t0)
print(f"voxel grid {grid.occupancy.shape} ({grid.occupancy.mean():.3f} full), "
      f"top view {top.pixels.shape}, extraction {dt:.1f} ms")

hz = mapper_throughput(clouds[:20], poses[:20], config, grid_size=32,
                       projection_grid=64)
print(f"mapping throughput: {hz:.1f} frames/s")

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

fig, axes = plt.subplots(1, 2, figsize=(8, 4))
axes[0].imshow(grid.occupancy.max(axis=2).T, origin="lower", cmap="gray_r")
axes[0].set_title("voxel grid (column max)")
axes[1].imshow(top.pixels.T, origin="lower", cmap="gray_r")
axes[1].set_title("top view")
fig.tight_layout()
fig.savefig(OUT / "maps.svg")
print(f"wrote {OUT / 'maps.svg'}")
