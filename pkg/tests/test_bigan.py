"""Adversarial branch tests.

The joint value function is pinned at an analytically known point (a
zero-weight discriminator outputs exactly 0.5, giving -2 ln 2) and shown to
be a stable attractor when the real and synthetic joint distributions are
constructed to be identical.  Step functions are checked for the directions
they must move the value in when overfitting a fixed batch.
"""

import math

import numpy as np
import pytest
import torch
from torch import nn

from safl import autodiff, bigan
from safl.autodiff import MissingGrad, ShapeMismatch
from safl.bigan import (
    BiGANBranch,
    BranchArchitecture,
    DimensionMismatch,
    JointDiscriminator,
    MapDecoder,
    MapEncoder,
    bigan_value,
    discriminator_step,
    generator_step,
    stitch,
)

TWO_LN_TWO = 2 * math.log(2.0)


def tiny_arch(domain="map2d"):
    shape = (16, 16) if domain == "map2d" else (16, 16, 16)
    return BranchArchitecture(
        domain, shape, latent_dim=8, channels=(2, 4, 6, 8), disc_hidden=8
    )


def random_maps(rng, arch, n):
    return rng.random((n,) + arch.input_shape)


class TestArchitecture:
    def test_domain_defaults(self):
        assert BranchArchitecture("map2d").input_shape == (64, 64)
        assert BranchArchitecture("map3d").input_shape == (32, 32, 32)
        assert BranchArchitecture("map2d").latent_dim == 512

    def test_rejects_unknown_domain(self):
        with pytest.raises(ValueError, match="domain"):
            BranchArchitecture("audio")

    def test_rejects_indivisible_sides(self):
        with pytest.raises(ValueError, match="divisible"):
            BranchArchitecture("map2d", (48, 48), channels=(2, 4, 6, 8, 10))

    def test_final_side(self):
        arch = BranchArchitecture("map2d", (64, 64))
        assert arch.final_side == 4
        assert tiny_arch().final_side == 1


class TestModuleShapes:
    @pytest.mark.parametrize("domain", ["map2d", "map3d"])
    def test_full_cycle_shapes(self, domain):
        arch = tiny_arch(domain)
        en, de, disc = MapEncoder(arch), MapDecoder(arch), JointDiscriminator(arch)
        x = torch.rand((3, 1) + arch.input_shape)
        z = en(x)
        assert z.shape == (3, arch.latent_dim)
        y = de(z)
        assert y.shape == x.shape
        assert y.min() >= 0.0 and y.max() <= 1.0  # logistic output layer
        d = disc(x, z)
        assert d.shape == (3,)

    def test_discriminator_output_strictly_inside_unit_interval(self):
        arch = tiny_arch()
        disc = JointDiscriminator(arch)
        autodiff.init_parameters(disc, 0)
        # saturate the final affine so the clamp must engage
        with torch.no_grad():
            disc.joint[-2].bias.fill_(50.0)
        x = torch.rand((4, 1) + arch.input_shape)
        z = torch.randn(4, arch.latent_dim)
        d = disc(x, z)
        assert 0.999998 < d.max().item() < 1.0
        with torch.no_grad():
            disc.joint[-2].bias.fill_(-50.0)
        d = disc(x, z)
        assert 0.0 < d.min().item() < 2e-6


class TestBranchPlumbing:
    def test_create_is_deterministic_per_seed(self):
        a = BiGANBranch.create(tiny_arch(), seed=3)
        b = BiGANBranch.create(tiny_arch(), seed=3)
        for p, q in zip(a.encoder.parameters(), b.encoder.parameters()):
            assert torch.equal(p, q)
        c = BiGANBranch.create(tiny_arch(), seed=4)
        assert any(
            not torch.equal(p, q)
            for p, q in zip(a.encoder.parameters(), c.encoder.parameters())
        )

    def test_as_batch_accepts_single_and_stacked_maps(self):
        branch = BiGANBranch.create(tiny_arch(), seed=0)
        single = branch.as_batch(np.zeros((16, 16)))
        assert tuple(single.shape) == (1, 1, 16, 16)
        stacked = branch.as_batch(np.zeros((5, 16, 16)))
        assert tuple(stacked.shape) == (5, 1, 16, 16)

    def test_as_batch_rejects_wrong_spatial_shape(self):
        branch = BiGANBranch.create(tiny_arch(), seed=0)
        with pytest.raises(ShapeMismatch, match="16"):
            branch.as_batch(np.zeros((5, 8, 8)))

    def test_latent_sampling_deterministic_stream(self):
        a = BiGANBranch.create(tiny_arch(), seed=5)
        b = BiGANBranch.create(tiny_arch(), seed=5)
        assert torch.equal(a.sample_latent(4), b.sample_latent(4))
        # the stream advances rather than repeating
        assert not torch.equal(a.sample_latent(4), a.sample_latent(4))

    def test_encode_returns_float32_codes(self):
        rng = np.random.default_rng(0)
        branch = BiGANBranch.create(tiny_arch(), seed=1)
        codes = branch.encode(random_maps(rng, branch.arch, 6))
        assert codes.shape == (6, 8)
        assert codes.dtype == np.float32

    def test_encode_is_batch_size_invariant(self):
        """Eval-mode encoding of a frame ignores its batch companions."""
        rng = np.random.default_rng(1)
        branch = BiGANBranch.create(tiny_arch(), seed=2)
        maps = random_maps(rng, branch.arch, 5)
        batch = branch.encode(maps)
        singles = np.stack([branch.encode(m)[0] for m in maps])
        np.testing.assert_allclose(batch, singles, atol=1e-5)

    def test_discrimination_shape_and_range(self):
        rng = np.random.default_rng(2)
        branch = BiGANBranch.create(tiny_arch(), seed=3)
        d = branch.discrimination(random_maps(rng, branch.arch, 4))
        assert d.shape == (4,)
        assert np.all((d > 0) & (d < 1))


class TestValueFunction:
    def test_zeroed_discriminator_sits_at_minus_two_ln_two(self):
        """D = 0.5 exactly makes the value log(1/2) + log(1/2)."""
        branch = BiGANBranch.create(tiny_arch(), seed=0)
        with torch.no_grad():
            disc = branch.discriminator
            disc.joint[-2].weight.zero_()
            disc.joint[-2].bias.zero_()
        rng = np.random.default_rng(3)
        est = bigan_value(branch, random_maps(rng, branch.arch, 8))
        assert est.d_real_mean == pytest.approx(0.5, abs=1e-7)
        assert est.d_fake_mean == pytest.approx(0.5, abs=1e-7)
        assert est.value == pytest.approx(-TWO_LN_TWO, abs=1e-6)

    def test_value_estimate_has_no_training_side_effects(self):
        rng = np.random.default_rng(4)
        branch = BiGANBranch.create(tiny_arch(), seed=1)
        before = [p.detach().clone() for p in branch.encoder.parameters()]
        bigan_value(branch, random_maps(rng, branch.arch, 4))
        for p, q in zip(before, branch.encoder.parameters()):
            assert torch.equal(p, q)
        assert autodiff.step_count(branch.opt_disc) == 0

    def test_matched_joint_distributions_are_a_stable_fixed_point(self):
        """With identical real and synthetic joints, D returns to 0.5.

        The encoder flattens and the decoder unflattens (exact inverses), and
        the data distribution equals the latent prior, so the two joint
        distributions coincide.  The discriminator is first biased away on a
        separable problem, then trained on the matched one; it must come back
        to 0.5 and the value to -2 ln 2.
        """
        arch = BranchArchitecture(
            "map2d", (16, 16), latent_dim=256, channels=(4, 8, 16, 32),
            disc_hidden=32,
        )
        disc = JointDiscriminator(arch)
        autodiff.init_parameters(disc, 2)
        branch = BiGANBranch(
            arch, nn.Flatten(), nn.Unflatten(1, (1, 16, 16)), disc, seed=0
        )
        assert branch.opt_gen is None  # nothing trainable in the generators
        rng = np.random.default_rng(42)

        for _ in range(400):
            discriminator_step(branch, 3.0 * rng.standard_normal((64, 16, 16)))
        biased = bigan_value(branch, 3.0 * rng.standard_normal((256, 16, 16)))
        assert biased.d_real_mean > 0.9  # separable problem: D locked on

        for _ in range(1500):
            discriminator_step(branch, rng.standard_normal((64, 16, 16)))
        est = bigan_value(branch, rng.standard_normal((512, 16, 16)))
        assert 0.45 <= est.d_real_mean <= 0.55
        assert 0.45 <= est.d_fake_mean <= 0.55
        assert est.value == pytest.approx(-TWO_LN_TWO, abs=0.1)


class TestStepFunctions:
    def test_discriminator_step_climbs_value_on_fixed_batch(self):
        rng = np.random.default_rng(5)
        branch = BiGANBranch.create(tiny_arch(), seed=2)
        maps = random_maps(rng, branch.arch, 8)
        z = branch.sample_latent(8)
        start = bigan_value(branch, maps, z).value
        for _ in range(30):
            discriminator_step(branch, maps, z)
        assert bigan_value(branch, maps, z).value > start
        assert autodiff.step_count(branch.opt_disc) == 30
        assert autodiff.step_count(branch.opt_gen) == 0

    def test_generator_step_descends_surrogate_on_fixed_batch(self):
        """G-steps push D(x, En(x)) down and D(De(z), z) up."""
        rng = np.random.default_rng(6)
        branch = BiGANBranch.create(tiny_arch(), seed=3)
        maps = random_maps(rng, branch.arch, 8)
        z = branch.sample_latent(8)
        for _ in range(300):
            discriminator_step(branch, maps, z)  # give D an opinion first
        start = bigan_value(branch, maps, z)
        assert start.d_real_mean > 0.52 > 0.48 > start.d_fake_mean
        for _ in range(60):
            generator_step(branch, maps, z)
        end = bigan_value(branch, maps, z)
        assert end.d_real_mean < start.d_real_mean
        assert end.d_fake_mean > start.d_fake_mean
        assert autodiff.step_count(branch.opt_gen) == 60

    def test_generator_step_leaves_discriminator_untouched(self):
        rng = np.random.default_rng(7)
        branch = BiGANBranch.create(tiny_arch(), seed=4)
        maps = random_maps(rng, branch.arch, 4)
        before = [p.detach().clone() for p in branch.discriminator.parameters()]
        generator_step(branch, maps)
        for p, q in zip(before, branch.discriminator.parameters()):
            assert torch.equal(p, q)
        assert all(
            p.grad is None for p in branch.discriminator.parameters()
        )

    def test_discriminator_step_leaves_generator_untouched(self):
        rng = np.random.default_rng(8)
        branch = BiGANBranch.create(tiny_arch(), seed=5)
        maps = random_maps(rng, branch.arch, 4)
        before = [p.detach().clone() for p in branch.encoder.parameters()]
        discriminator_step(branch, maps)
        for p, q in zip(before, branch.encoder.parameters()):
            assert torch.equal(p, q)

    def test_generator_step_requires_trainable_generators(self):
        arch = BranchArchitecture(
            "map2d", (16, 16), latent_dim=256, channels=(2, 4, 6, 8),
            disc_hidden=8,
        )
        disc = JointDiscriminator(arch)
        autodiff.init_parameters(disc, 0)
        branch = BiGANBranch(
            arch, nn.Flatten(), nn.Unflatten(1, (1, 16, 16)), disc, seed=0
        )
        with pytest.raises(MissingGrad):
            generator_step(branch, np.zeros((2, 16, 16)))

    def test_saturating_and_surrogate_losses_share_fixed_points(self):
        """Both generator modes move the same readings in the same direction."""
        for saturating in (False, True):
            rng = np.random.default_rng(9)
            branch = BiGANBranch.create(tiny_arch(), seed=6)
            maps = random_maps(rng, branch.arch, 8)
            z = branch.sample_latent(8)
            for _ in range(300):
                discriminator_step(branch, maps, z)
            start = bigan_value(branch, maps, z)
            for _ in range(60):
                generator_step(branch, maps, z, saturating=saturating)
            end = bigan_value(branch, maps, z)
            assert end.d_real_mean < start.d_real_mean

    def test_zero_loss_scale_counts_a_step_but_moves_nothing(self):
        """Scaling the loss by an unfamiliarity weight of 0 silences a batch."""
        rng = np.random.default_rng(10)
        branch = BiGANBranch.create(tiny_arch(), seed=7)
        maps = random_maps(rng, branch.arch, 4)
        before = [p.detach().clone() for p in branch.discriminator.parameters()]
        discriminator_step(branch, maps, loss_scale=0.0)
        for p, q in zip(before, branch.discriminator.parameters()):
            assert torch.equal(p, q)
        assert autodiff.step_count(branch.opt_disc) == 1
        discriminator_step(branch, maps, loss_scale=1.0)
        assert any(
            not torch.equal(p, q)
            for p, q in zip(before, branch.discriminator.parameters())
        )


class TestPersistence:
    def test_save_load_bit_exact(self, tmp_path):
        rng = np.random.default_rng(11)
        branch = BiGANBranch.create(tiny_arch("map3d"), seed=8)
        maps = random_maps(rng, branch.arch, 4)
        for _ in range(3):
            discriminator_step(branch, maps)
            generator_step(branch, maps)
        path = tmp_path / "branch.ckpt"
        branch.save(path)
        loaded = BiGANBranch.load(path)
        assert loaded.arch == branch.arch
        codes_a = branch.encode(maps)
        codes_b = loaded.encode(maps)
        np.testing.assert_array_equal(codes_a, codes_b)
        assert autodiff.step_count(loaded.opt_disc) == 3
        assert autodiff.step_count(loaded.opt_gen) == 3

    def test_resumed_branch_training_matches_uninterrupted(self, tmp_path):
        rng = np.random.default_rng(12)
        maps = None

        def fresh():
            return BiGANBranch.create(tiny_arch(), seed=9)

        straight = fresh()
        maps = random_maps(rng, straight.arch, 4)
        z = straight.sample_latent(4)
        for _ in range(6):
            discriminator_step(straight, maps, z)

        first = fresh()
        for _ in range(3):
            discriminator_step(first, maps, z)
        first.save(tmp_path / "mid.ckpt")
        resumed = BiGANBranch.load(tmp_path / "mid.ckpt")
        for _ in range(3):
            discriminator_step(resumed, maps, z)

        for p, q in zip(
            straight.discriminator.parameters(),
            resumed.discriminator.parameters(),
        ):
            assert torch.equal(p, q)

    def test_latent_stream_survives_reload(self, tmp_path):
        branch = BiGANBranch.create(tiny_arch(), seed=10)
        branch.sample_latent(3)  # advance the stream
        branch.save(tmp_path / "b.ckpt")
        loaded = BiGANBranch.load(tmp_path / "b.ckpt")
        assert torch.equal(branch.sample_latent(5), loaded.sample_latent(5))


class TestStitch:
    def test_concatenates_2d_then_3d(self):
        a = np.arange(4, dtype=np.float32)
        b = np.arange(10, 13, dtype=np.float32)
        joint = stitch(a, b)
        np.testing.assert_array_equal(joint, [0, 1, 2, 3, 10, 11, 12])
        assert joint.dtype == np.float32

    def test_rejects_non_vector_codes(self):
        with pytest.raises(DimensionMismatch):
            stitch(np.zeros((2, 3), np.float32), np.zeros(3, np.float32))
        with pytest.raises(DimensionMismatch):
            stitch(np.zeros(3, np.float32), np.zeros((2, 3), np.float32))
