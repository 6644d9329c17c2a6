"""Synchronized reweighted training loop tests.

Unfamiliarity and its softmax reweighting are pinned against hand values and
scipy's softmax; the epoch loop is checked for determinism, carry-over of
unfamiliarity for undrawn samples, and bookkeeping shapes; inference is
checked for stitched feature layout.
"""

import numpy as np
import pytest
from scipy.special import softmax as scipy_softmax

from safl import bigan, training
from safl.bigan import BiGANBranch, BranchArchitecture, ValueEstimate
from safl.training import (
    LatencyReport,
    NonFiniteLoss,
    TrainConfig,
    TrainingPairSet,
    infer_sequence,
    reweight,
    train,
    train_epoch,
    unfamiliarity,
)


def tiny_branches(seed=0):
    arch3d = BranchArchitecture(
        "map3d", (16, 16, 16), latent_dim=8, channels=(2, 4, 6, 8),
        disc_hidden=8,
    )
    arch2d = BranchArchitecture(
        "map2d", (16, 16), latent_dim=8, channels=(2, 4, 6, 8), disc_hidden=8
    )
    return (
        BiGANBranch.create(arch3d, seed=seed),
        BiGANBranch.create(arch2d, seed=seed + 1),
    )


def tiny_pairs(n=6, seed=0):
    rng = np.random.default_rng(seed)
    return TrainingPairSet(
        rng.random((n, 16, 16, 16)), rng.random((n, 16, 16))
    )


class TestUnfamiliarity:
    def test_balanced_half_discriminations_score_two(self):
        """A sample both discriminators rate 0.5 has unfamiliarity exactly 2."""
        assert unfamiliarity(0.5, 0.5) == 2.0

    def test_hand_values(self):
        assert unfamiliarity(1.0, 1.0) == 1.0
        assert unfamiliarity(0.25, 0.75) == 2.0
        assert unfamiliarity(1.0, 0.5) == pytest.approx(4.0 / 3.0, rel=1e-15)

    def test_monotone_decreasing_in_each_domain(self):
        for d in (0.1, 0.4, 0.9):
            assert unfamiliarity(d + 0.05, d) < unfamiliarity(d, d)
            assert unfamiliarity(d, d + 0.05) < unfamiliarity(d, d)

    def test_floor_prevents_division_blowup(self):
        assert unfamiliarity(0.0, 0.0) == pytest.approx(1e6, rel=1e-12)
        assert np.isfinite(unfamiliarity(-3.0, 0.0))


class TestReweight:
    def test_matches_scipy_softmax_over_many_vectors(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            u = rng.normal(0.0, 3.0, size=rng.integers(1, 40))
            w = reweight(u)
            np.testing.assert_allclose(w, scipy_softmax(u), atol=1e-12)
            assert abs(w.sum() - 1.0) <= 1e-9

    def test_shift_invariant(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            u = rng.normal(0.0, 2.0, size=12)
            np.testing.assert_allclose(
                reweight(u), reweight(u + 37.25), atol=1e-12
            )

    def test_preserves_ordering(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            u = rng.normal(size=15)
            np.testing.assert_array_equal(
                np.argsort(reweight(u)), np.argsort(u)
            )

    def test_single_sample_gets_full_weight(self):
        np.testing.assert_array_equal(reweight([3.7]), [1.0])

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError, match="non-empty"):
            reweight([])
        with pytest.raises(ValueError, match="non-empty"):
            reweight([[1.0, 2.0]])
        with pytest.raises(ValueError, match="finite"):
            reweight([1.0, np.nan])


class TestPairSet:
    def test_coerces_to_float32_and_defaults_ids(self):
        pairs = TrainingPairSet(
            np.zeros((3, 4, 4, 4), np.float64), np.zeros((3, 4, 4), np.float64)
        )
        assert pairs.voxels.dtype == np.float32
        assert pairs.top_views.dtype == np.float32
        np.testing.assert_array_equal(pairs.sample_ids, [0, 1, 2])
        assert len(pairs) == 3

    def test_rejects_mismatched_lengths(self):
        with pytest.raises(ValueError, match="voxel"):
            TrainingPairSet(np.zeros((3, 4, 4, 4)), np.zeros((2, 4, 4)))


class TestConfigValidation:
    def test_rejects_negative_epochs_and_empty_batches(self):
        with pytest.raises(ValueError, match="epochs"):
            TrainConfig(epochs=-1)
        with pytest.raises(ValueError, match="batch_size"):
            TrainConfig(batch_size=0)

    def test_rejects_unknown_reweight_mode(self):
        with pytest.raises(ValueError, match="reweight_mode"):
            TrainConfig(reweight_mode="bogus")


class TestFiniteGuard:
    def test_error_names_epoch_sample_and_domain(self):
        bad = ValueEstimate(float("nan"), 0.5, 0.5)
        with pytest.raises(NonFiniteLoss, match="epoch 3, sample 7, 3d/disc"):
            training._check_finite(bad, epoch=3, sample=7, domain="3d/disc")
        training._check_finite(ValueEstimate(-1.4, 0.5, 0.5), 0, 0, "2d/gen")


class TestTrainEpoch:
    def test_deterministic_under_seeded_rng(self):
        pairs = tiny_pairs()
        weights = np.full(len(pairs), 1.0 / len(pairs))
        records = []
        finals = []
        for _ in range(2):
            b3, b2 = tiny_branches(seed=4)
            rec = train_epoch(pairs, weights, b3, b2,
                              np.random.default_rng(11), batch_size=2)
            records.append(rec)
            finals.append(b3.encode(pairs.voxels))
        np.testing.assert_array_equal(records[0].drawn, records[1].drawn)
        np.testing.assert_array_equal(records[0].u, records[1].u)
        np.testing.assert_array_equal(finals[0], finals[1])

    def test_records_one_value_pair_per_draw(self):
        pairs = tiny_pairs(n=5)
        b3, b2 = tiny_branches()
        rec = train_epoch(pairs, np.full(5, 0.2), b3, b2,
                          np.random.default_rng(0), batch_size=2)
        assert len(rec.drawn) == 5
        assert len(rec.values_3d) == 5 and len(rec.values_2d) == 5
        assert all(np.isfinite(v.value) for v in rec.values_3d)

    def test_recorded_discriminations_match_post_epoch_readback(self):
        """With all weight on one sample, its stored d-values are the final
        eval-mode discriminations of each branch."""
        pairs = tiny_pairs(n=4)
        weights = np.array([1.0, 0.0, 0.0, 0.0])
        b3, b2 = tiny_branches(seed=5)
        rec = train_epoch(pairs, weights, b3, b2,
                          np.random.default_rng(1), batch_size=2)
        np.testing.assert_array_equal(rec.drawn, [0, 0, 0, 0])
        assert rec.d3d[0] == pytest.approx(
            float(b3.discrimination(pairs.voxels[0])[0]), abs=1e-7
        )
        assert rec.d2d[0] == pytest.approx(
            float(b2.discrimination(pairs.top_views[0])[0]), abs=1e-7
        )
        assert rec.u[0] == unfamiliarity(rec.d3d[0], rec.d2d[0])

    def test_undrawn_samples_keep_previous_unfamiliarity(self):
        pairs = tiny_pairs(n=4)
        weights = np.array([1.0, 0.0, 0.0, 0.0])
        prev = np.array([9.0, 1.25, 1.5, 1.75])
        b3, b2 = tiny_branches(seed=6)
        rec = train_epoch(pairs, weights, b3, b2,
                          np.random.default_rng(2), batch_size=2, prev_u=prev)
        np.testing.assert_array_equal(rec.u[1:], prev[1:])
        assert rec.u[0] != 9.0  # the drawn sample was re-scored

    def test_undrawn_samples_without_history_get_epoch_median(self):
        pairs = tiny_pairs(n=4)
        weights = np.array([1.0, 0.0, 0.0, 0.0])
        b3, b2 = tiny_branches(seed=7)
        rec = train_epoch(pairs, weights, b3, b2,
                          np.random.default_rng(3), batch_size=2)
        np.testing.assert_array_equal(rec.u[1:], np.full(3, rec.u[0]))

    def test_loss_scaling_mode_visits_every_sample_once(self):
        pairs = tiny_pairs(n=5)
        b3, b2 = tiny_branches(seed=8)
        rec = train_epoch(pairs, np.full(5, 0.2), b3, b2,
                          np.random.default_rng(4), batch_size=2,
                          loss_scaling=True)
        np.testing.assert_array_equal(np.sort(rec.drawn), np.arange(5))
        assert not np.isnan(rec.u).any()

    def test_rejects_wrong_weight_shape(self):
        pairs = tiny_pairs(n=3)
        b3, b2 = tiny_branches()
        with pytest.raises(ValueError, match="weights"):
            train_epoch(pairs, np.full(4, 0.25), b3, b2,
                        np.random.default_rng(0))


class TestTrain:
    def test_history_shapes_and_uniform_start(self):
        pairs = tiny_pairs(n=5)
        b3, b2 = tiny_branches(seed=9)
        result = train(pairs, b3, b2,
                       TrainConfig(epochs=2, batch_size=2, seed=0))
        assert result.weights_history.shape == (3, 5)
        np.testing.assert_array_equal(result.weights_history[0],
                                      np.full(5, 0.2))
        assert result.u_history.shape == (2, 5)
        np.testing.assert_allclose(result.weights_history.sum(axis=1),
                                   np.ones(3), atol=1e-12)
        for row in range(2):
            np.testing.assert_array_equal(
                result.weights_history[row + 1],
                reweight(result.u_history[row]),
            )

    def test_zero_epochs_only_records_uniform_weights(self):
        pairs = tiny_pairs(n=3)
        b3, b2 = tiny_branches(seed=10)
        before = b3.encode(pairs.voxels)
        result = train(pairs, b3, b2, TrainConfig(epochs=0))
        assert result.weights_history.shape == (1, 3)
        assert result.u_history.shape == (0, 3)
        np.testing.assert_array_equal(before, b3.encode(pairs.voxels))

    def test_rejects_empty_training_set(self):
        pairs = TrainingPairSet(np.zeros((0, 16, 16, 16)),
                                np.zeros((0, 16, 16)))
        b3, b2 = tiny_branches()
        with pytest.raises(ValueError, match="empty"):
            train(pairs, b3, b2)

    def test_checkpoint_files_cover_init_epochs_and_final(self, tmp_path):
        pairs = tiny_pairs(n=3)
        b3, b2 = tiny_branches(seed=11)
        train(pairs, b3, b2,
              TrainConfig(epochs=2, batch_size=2, checkpoint_every=1,
                          out_dir=str(tmp_path)))
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == [
            "branch2d.ckpt", "branch2d.epoch0001.ckpt",
            "branch2d.epoch0002.ckpt", "branch2d.init.ckpt",
            "branch3d.ckpt", "branch3d.epoch0001.ckpt",
            "branch3d.epoch0002.ckpt", "branch3d.init.ckpt",
        ]
        loaded = BiGANBranch.load(tmp_path / "branch3d.ckpt")
        np.testing.assert_array_equal(
            loaded.encode(pairs.voxels), b3.encode(pairs.voxels)
        )

    def test_training_runs_are_reproducible(self):
        encodes = []
        for _ in range(2):
            pairs = tiny_pairs(n=4)
            b3, b2 = tiny_branches(seed=12)
            train(pairs, b3, b2, TrainConfig(epochs=2, batch_size=2, seed=3))
            encodes.append(
                np.concatenate([b3.encode(pairs.voxels),
                                b2.encode(pairs.top_views)], axis=1)
            )
        np.testing.assert_array_equal(encodes[0], encodes[1])


class TestInferSequence:
    def test_feature_layout_is_2d_then_3d(self):
        pairs = tiny_pairs(n=4)
        b3, b2 = tiny_branches(seed=13)
        features, latency = infer_sequence(pairs, b3, b2)
        assert features.shape == (4, 16)
        assert features.dtype == np.float32
        np.testing.assert_allclose(features[:, :8],
                                   b2.encode(pairs.top_views), atol=1e-5)
        np.testing.assert_allclose(features[:, 8:],
                                   b3.encode(pairs.voxels), atol=1e-5)

    def test_latency_report_has_positive_means(self):
        pairs = tiny_pairs(n=3)
        b3, b2 = tiny_branches(seed=14)
        _, latency = infer_sequence(pairs, b3, b2)
        assert isinstance(latency, LatencyReport)
        assert latency.mean_3d_ms > 0
        assert latency.mean_2d_ms > 0
        assert latency.mean_stitch_ms >= 0

    def test_empty_sequence(self):
        pairs = TrainingPairSet(np.zeros((0, 16, 16, 16)),
                                np.zeros((0, 16, 16)))
        b3, b2 = tiny_branches(seed=15)
        features, latency = infer_sequence(pairs, b3, b2)
        assert features.shape[0] == 0
        assert latency.mean_3d_ms == 0.0
