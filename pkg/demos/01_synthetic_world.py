"""Generate a synthetic LiDAR sequence with a planted loop closure.

A flat world of boxes and cylinders is scattered around a rectangular
trajectory.  The final 40 frames are re-placed onto the poses of frames
20..59, so the sequence genuinely revisits known ground — the raw material
for every loop-closure experiment in this package.

Run:  python3 demos/01_synthetic_world.py
"""

import pathlib

import numpy as np

from safl.synth import (SyntheticWorldSpec, build_obstacles,
                        generate_synthetic_sequence)

OUT = pathlib.Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

spec = SyntheticWorldSpec(
    n_frames=200,
    trajectory=((0, 0), (70, 0), (70, 25), (0, 25), (0, 0)),
    loop_segments=(((160, 199), (20, 59)),),
    rays_azimuth=128,
    rays_elevation=8,
)

field = build_obstacles(spec)
print(f"world: {len(field.boxes)} boxes, {len(field.cylinders)} cylinders")

clouds, poses = generate_synthetic_sequence(spec)
points = np.array([len(c) for c in clouds])
print(f"frames: {len(clouds)}, returns/frame min={points.min()} "
      f"mean={points.mean():.0f} max={points.max()}")

# the planted loop: late frames sit on early poses
for query, ref in ((160, 20), (180, 40), (199, 59)):
    d = np.linalg.norm(poses[query].translation[:2] - poses[ref].translation[:2])
    print(f"frame {query} sits {d:.2f} m from frame {ref} (planted revisit)")

# an unrelated pair stays far apart
d = np.linalg.norm(poses[100].translation[:2] - poses[0].translation[:2])
print(f"frame 100 sits {d:.2f} m from frame 0 (no revisit)")

# render the trajectory over the obstacle footprint
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

fig, ax = plt.subplots(figsize=(7, 4))
if len(field.boxes):
    ax.scatter(field.boxes[:, 0], field.boxes[:, 1], s=8, marker="s",
               color="0.6", label="boxes")
if len(field.cylinders):
    ax.scatter(field.cylinders[:, 0], field.cylinders[:, 1], s=8, marker="o",
               color="0.3", label="cylinders")
xy = np.array([p.translation[:2] for p in poses])
ax.plot(xy[:120, 0], xy[:120, 1], "-", color="tab:blue", label="reference run")
ax.plot(xy[120:, 0], xy[120:, 1], "--", color="tab:red", label="query run")
ax.set_aspect("equal")
ax.legend(loc="upper right", fontsize=8)
ax.set_title("trajectory and obstacle field")
fig.tight_layout()
fig.savefig(OUT / "world.svg")
print(f"wrote {OUT / 'world.svg'}")
