"""Score loop-closure proposals: precision-recall, ROC/AUC and storage cost.

Runs a compact end-to-end experiment — map a world with a planted revisit,
train both feature learners on the reference half, then match viewpoint-
perturbed queries against the reference bank — and compares the learned
mixture features with their single-domain halves and the grid-of-tiles
appearance baseline.  Also projects the storage cost of keeping one
stitched latent code per frame for a full day of driving.

Run:  python3 demos/05_evaluation.py   (about two minutes on one core)
"""

import pathlib

import numpy as np

from safl.bigan import BranchArchitecture
from safl.dataset import NoiseSpec
from safl.evaluation import compare_methods, storage_projection
from safl.matching import SeqMatchConfig
from safl.pipeline import (ExperimentConfig, MapExtractionConfig,
                           loop_closure_experiment)
from safl.synth import SyntheticWorldSpec, generate_synthetic_sequence
from safl.training import TrainConfig

OUT = pathlib.Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

spec = SyntheticWorldSpec(
    n_frames=100,
    trajectory=((0, 0), (50, 0), (50, 20), (0, 20), (0, 0)),
    loop_segments=(((80, 99), (10, 29)),),
    rays_azimuth=128,
    rays_elevation=8,
)
clouds, poses = generate_synthetic_sequence(spec)

maps = MapExtractionConfig(voxel_grid_size=16, projection_grid_size=32,
                           top_view_shape=(32, 32))
config = ExperimentConfig(
    maps=maps,
    arch2d=BranchArchitecture("map2d", input_shape=(32, 32), latent_dim=32,
                              channels=(4, 8, 16), disc_hidden=32),
    arch3d=BranchArchitecture("map3d", input_shape=(16, 16, 16), latent_dim=32,
                              channels=(4, 8, 16), disc_hidden=32),
    train=TrainConfig(epochs=8, batch_size=8, seed=0),
    match=SeqMatchConfig(ds=5, exclusion_window=10),
    noise=NoiseSpec(r_amp=0.8, seed=50),
    train_augment=(NoiseSpec(r_amp=0.8, seed=1000),),
    reference_slice=(0, 60),
    query_slice=(60, 100),
)

print("mapping, training and matching (one core, please hold) ...")
result = loop_closure_experiment(clouds, poses, config)

print(f"\nencode latency per frame: 3d {result.latency.mean_3d_ms:.1f} ms, "
      f"2d {result.latency.mean_2d_ms:.1f} ms")

rows = compare_methods({name: {"default": rep}
                        for name, rep in result.reports.items()}, "sad")
print(f"\n{'method':10s} {'auc':>6s} {'recall@100%P':>13s} {'vs sad':>7s}")
for row in rows:
    print(f"{row['method']:10s} {row['auc']:6.3f} "
          f"{row['recall_at_full_precision']:13.3f} "
          f"{row['auc_vs_baseline']:7.3f}")

report = result.reports["mixture"]
print(f"\nmixture populations: {report.n_positive} positives, "
      f"{report.n_negative} negatives of {report.n_proposals} proposals")

storage = storage_projection(rate_hz=5.0, hours=24.0)
print(f"\nstorage for 24 h at 5 Hz: {storage['bytes_per_frame']} B/frame x "
      f"{storage['frames']} frames = {storage['gib']:.2f} GiB")

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

fig, axes = plt.subplots(1, 2, figsize=(9, 4))
for name, rep in sorted(result.reports.items()):
    pr = np.array(rep.pr_points)
    roc = np.array(rep.roc_points)
    axes[0].plot(pr[:, 2], pr[:, 1], marker=".", label=name)
    axes[1].plot(roc[:, 1], roc[:, 2], marker=".",
                 label=f"{name} (auc={rep.auc:.2f})")
axes[0].set_xlabel("recall")
axes[0].set_ylabel("precision")
axes[1].set_xlabel("false positive rate")
axes[1].set_ylabel("true positive rate")
for ax in axes:
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
fig.tight_layout()
fig.savefig(OUT / "curves.svg")
print(f"wrote {OUT / 'curves.svg'}")
