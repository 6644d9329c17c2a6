"""Train the dual adversarial feature learners with synchronous reweighting.

One bidirectional adversarial pair (encoder, decoder, joint discriminator)
learns the 3-D voxel grids, a second learns the 2-D top views.  After every
epoch each training sample is scored by how unfamiliar it still looks
across BOTH domains at once — U = 2 / (d3d + d2d), the reciprocal of its
mean discrimination — and a softmax over the unfamiliarities reallocates
the next epoch's sampling weight toward the frames the pair of models
handles worst.  A fresh, undecided discriminator answers 1/2 everywhere,
so the adversarial value starts at -2 ln 2; how far it climbs above that
floor measures how far ahead of the generators the discriminator is, and
long training pulls it back down as the two sides equilibrate.

Run:  python3 demos/03_feature_learning.py
"""

import pathlib

import numpy as np

from safl import training
from safl.bigan import BiGANBranch, BranchArchitecture
from safl.dataset import NoiseSpec, inject_viewpoint_noise
from safl.mapping import OctreeConfig
from safl.pipeline import MapExtractionConfig, extract_map_passes
from safl.synth import SyntheticWorldSpec, generate_synthetic_sequence
from safl.training import TrainConfig, TrainingPairSet, reweight, unfamiliarity

OUT = pathlib.Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

# a small mapped sequence: 40 frames, 16^3 voxel grids, 32x32 top views
spec = SyntheticWorldSpec(n_frames=40, trajectory=((0, 0), (40, 0)),
                          rays_azimuth=96, rays_elevation=6)
clouds, poses = generate_synthetic_sequence(spec)
maps = MapExtractionConfig(voxel_grid_size=16, projection_grid_size=32,
                           top_view_shape=(32, 32))
noisy = inject_viewpoint_noise(poses, NoiseSpec(r_amp=1.0, seed=7))
clean_pass, noisy_pass = extract_map_passes(
    clouds, poses, OctreeConfig(), maps, [list(poses), noisy])
pairs = TrainingPairSet(
    np.concatenate([clean_pass.voxels, noisy_pass.voxels]),
    np.concatenate([clean_pass.top_views, noisy_pass.top_views]),
)
print(f"training set: {len(pairs)} (voxel, top-view) pairs")

arch3d = BranchArchitecture("map3d", input_shape=(16, 16, 16), latent_dim=32,
                            channels=(4, 8, 16), disc_hidden=32)
arch2d = BranchArchitecture("map2d", input_shape=(32, 32), latent_dim=32,
                            channels=(4, 8, 16), disc_hidden=32)
branch3d = BiGANBranch.create(arch3d, seed=0)
branch2d = BiGANBranch.create(arch2d, seed=1)

# the unfamiliarity score and its softmax reweighting, on a toy example:
# a sample both discriminators rate at 1/2 scores exactly 2.0
print(f"U(0.5, 0.5) = {unfamiliarity(0.5, 0.5):.1f}")
u = np.array([1.0, 2.0, 4.0])
print(f"reweight({u}) = {np.round(reweight(u), 4)}")

result = training.train(pairs, branch3d, branch2d,
                        TrainConfig(epochs=3, batch_size=8, seed=0))

for epoch, weights in enumerate(result.weights_history):
    top = np.argsort(weights)[-3:][::-1]
    print(f"epoch {epoch}: weight spread {weights.min():.4f}.."
          f"{weights.max():.4f}, heaviest samples {top.tolist()}")

for domain, history in (("3d", result.value_history_3d),
                        ("2d", result.value_history_2d)):
    first, last = history[0][0], history[-1][-1]
    floor = -2 * np.log(2)
    print(f"{domain}: value {first.value:+.3f} -> {last.value:+.3f} "
          f"(undecided floor {floor:.3f}; discriminator ahead by "
          f"{last.value - floor:+.3f}), "
          f"D(real) {last.d_real_mean:.3f}, D(fake) {last.d_fake_mean:.3f}")

# encode the mapped sequence into stitched 2d+3d latent codes
features, latency = training.infer_sequence(clean_pass, branch3d, branch2d)
print(f"features: {features.shape} {features.dtype}, "
      f"encode latency 3d {latency.mean_3d_ms:.1f} ms, "
      f"2d {latency.mean_2d_ms:.1f} ms per frame")

ckpt = OUT / "branch3d.ckpt"
branch3d.save(ckpt)
reloaded = BiGANBranch.load(ckpt)
codes_a = branch3d.encode(pairs.voxels[:4])
codes_b = reloaded.encode(pairs.voxels[:4])
print(f"checkpoint round-trip exact: {np.array_equal(codes_a, codes_b)}")
