"""Synchronized training of the two map branches with sample reweighting.

Both branches train on the same drawn sample order.  After each drawn
sample's updates, the discriminators are read back in eval mode to score how
familiar the sample looks; the unfamiliarity

    u = 2 / (d3d + d2d)

(the reciprocal of the average discrimination) drives a softmax reweighting
at the end of every epoch, so samples both models still find unfamiliar are
drawn more often in the next epoch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import bigan
from .bigan import BiGANBranch, stitch

_D_FLOOR = 1e-6


class NonFiniteLoss(RuntimeError):
    """Raised when a value estimate stops being finite during training."""


@dataclass(eq=False)
class TrainingPairSet:
    """Aligned per-frame map pairs: voxel grids and top views."""

    voxels: np.ndarray     # (N, G, G, G) float32 in [0, 1]
    top_views: np.ndarray  # (N, H, W) float32 in [0, 1]
    sample_ids: np.ndarray = None

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        self.top_views = np.asarray(self.top_views, dtype=np.float32)
        if len(self.voxels) != len(self.top_views):
            raise ValueError(
                f"{len(self.voxels)} voxel grids vs "
                f"{len(self.top_views)} top views"
            )
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.voxels))
        self.sample_ids = np.asarray(self.sample_ids)

    def __len__(self) -> int:
        return len(self.voxels)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    lr: float = 2e-4
    betas: tuple = (0.5, 0.999)
    saturating: bool = False
    reweight_mode: str = "resample"  # or "loss_scale"
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    augment_passes: int = 0  # extra viewpoint-jittered training extractions
    out_dir: str | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.reweight_mode not in ("resample", "loss_scale"):
            raise ValueError(f"unknown reweight_mode {self.reweight_mode!r}")


def unfamiliarity(d3d: float, d2d: float) -> float:
    """Reciprocal of the mean discrimination of a sample across domains."""
    d3d = max(float(d3d), _D_FLOOR)
    d2d = max(float(d2d), _D_FLOOR)
    return 2.0 / (d3d + d2d)


def reweight(u_values: np.ndarray) -> np.ndarray:
    """Softmax of unfamiliarity scores, computed max-shifted for stability."""
    u = np.asarray(u_values, dtype=np.float64)
    if u.ndim != 1 or len(u) == 0:
        raise ValueError("u_values must be a non-empty vector")
    if not np.all(np.isfinite(u)):
        raise ValueError("u_values must be finite")
    shifted = np.exp(u - u.max())
    return shifted / shifted.sum()


@dataclass(eq=False)
class EpochRecord:
    """Per-sample read-backs of one epoch (last record wins per sample)."""

    u: np.ndarray
    d3d: np.ndarray
    d2d: np.ndarray
    drawn: np.ndarray
    values_3d: list = field(default_factory=list)
    values_2d: list = field(default_factory=list)


def _check_finite(estimate: bigan.ValueEstimate, epoch: int, sample: int,
                  domain: str) -> None:
    if not np.isfinite(estimate.value):
        raise NonFiniteLoss(
            f"epoch {epoch}, sample {sample}, {domain}: value "
            f"{estimate.value}"
        )


def train_epoch(pairs: TrainingPairSet, weights: np.ndarray,
                branch3d: BiGANBranch, branch2d: BiGANBranch,
                rng: np.random.Generator, batch_size: int = 32,
                prev_u: np.ndarray | None = None, saturating: bool = False,
                loss_scaling: bool = False, epoch: int = 0) -> EpochRecord:
    """One synchronized epoch over N weighted draws (with replacement).

    Each drawn sample leads its own mini batch (the rest is filled with
    further weighted draws), gets one discriminator and one generator step in
    each domain, and its post-update discriminations are recorded.  Samples
    drawn multiple times keep the last record; samples never drawn keep their
    previous unfamiliarity, or the epoch median if they have none yet.

    With loss_scaling, draws are a uniform permutation instead and each
    sample's losses are scaled by N * weight.
    """
    n = len(pairs)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise ValueError(f"weights shape {weights.shape} for {n} samples")
    if loss_scaling:
        drawn = rng.permutation(n)
    else:
        drawn = rng.choice(n, size=n, replace=True, p=weights)
        rng.shuffle(drawn)

    u = np.full(n, np.nan) if prev_u is None else prev_u.astype(np.float64).copy()
    d3d = np.full(n, np.nan)
    d2d = np.full(n, np.nan)
    record = EpochRecord(u=u, d3d=d3d, d2d=d2d, drawn=drawn)

    for idx in drawn:
        if batch_size > 1:
            fill = rng.choice(n, size=batch_size - 1, replace=True, p=weights)
            batch = np.concatenate([[idx], fill])
        else:
            batch = np.array([idx])
        scale = float(n * weights[idx]) if loss_scaling else 1.0

        x3 = pairs.voxels[batch]
        est = bigan.discriminator_step(branch3d, x3, loss_scale=scale)
        _check_finite(est, epoch, int(idx), "3d/disc")
        est = bigan.generator_step(branch3d, x3, saturating=saturating,
                                   loss_scale=scale)
        _check_finite(est, epoch, int(idx), "3d/gen")
        record.values_3d.append(est)
        d3 = float(branch3d.discrimination(pairs.voxels[idx])[0])

        x2 = pairs.top_views[batch]
        est = bigan.discriminator_step(branch2d, x2, loss_scale=scale)
        _check_finite(est, epoch, int(idx), "2d/disc")
        est = bigan.generator_step(branch2d, x2, saturating=saturating,
                                   loss_scale=scale)
        _check_finite(est, epoch, int(idx), "2d/gen")
        record.values_2d.append(est)
        d2 = float(branch2d.discrimination(pairs.top_views[idx])[0])

        u[idx] = unfamiliarity(d3, d2)
        d3d[idx] = d3
        d2d[idx] = d2

    unseen = np.isnan(u)
    if unseen.any():
        seen = u[~unseen]
        u[unseen] = np.median(seen) if len(seen) else 1.0
    return record


@dataclass(eq=False)
class TrainResult:
    weights_history: np.ndarray  # (epochs + 1, N), row 0 is the uniform init
    u_history: np.ndarray        # (epochs, N)
    value_history_3d: list
    value_history_2d: list


def train(pairs: TrainingPairSet, branch3d: BiGANBranch, branch2d: BiGANBranch,
          config: TrainConfig = TrainConfig()) -> TrainResult:
    """Run the synchronized reweighted training loop."""
    n = len(pairs)
    if n == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    weights = np.full(n, 1.0 / n)
    weights_history = [weights.copy()]
    u_history = []
    values_3d = []
    values_2d = []
    u = None

    if config.out_dir and config.checkpoint_every >= 0:
        _save_branches(branch3d, branch2d, config.out_dir, tag="init")

    for epoch in range(config.epochs):
        record = train_epoch(
            pairs, weights, branch3d, branch2d, rng,
            batch_size=config.batch_size, prev_u=u,
            saturating=config.saturating,
            loss_scaling=config.reweight_mode == "loss_scale", epoch=epoch,
        )
        u = record.u
        weights = reweight(u)
        weights_history.append(weights.copy())
        u_history.append(u.copy())
        values_3d.append(record.values_3d)
        values_2d.append(record.values_2d)
        if (
            config.out_dir and config.checkpoint_every
            and (epoch + 1) % config.checkpoint_every == 0
        ):
            _save_branches(branch3d, branch2d, config.out_dir,
                           tag=f"epoch{epoch + 1:04d}")

    if config.out_dir:
        _save_branches(branch3d, branch2d, config.out_dir, tag=None)
    return TrainResult(
        weights_history=np.stack(weights_history),
        u_history=(
            np.stack(u_history) if u_history else np.zeros((0, n))
        ),
        value_history_3d=values_3d,
        value_history_2d=values_2d,
    )


def _save_branches(branch3d, branch2d, out_dir, tag) -> None:
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    suffix = f".{tag}" if tag else ""
    branch3d.save(out / f"branch3d{suffix}.ckpt")
    branch2d.save(out / f"branch2d{suffix}.ckpt")


# ---------------------------------------------------------------------------
# inference

@dataclass
class LatencyReport:
    """Mean per-frame encode latency in milliseconds."""

    mean_3d_ms: float
    mean_2d_ms: float
    mean_stitch_ms: float


def infer_sequence(pairs: TrainingPairSet, branch3d: BiGANBranch,
                   branch2d: BiGANBranch):
    """Encode every frame pair into a stitched feature vector.

    Frames are encoded one at a time (the online setting), timing each
    domain separately.  Returns (features (N, latent2d + latent3d) float32,
    LatencyReport).
    """
    features = []
    t3 = t2 = ts = 0.0
    for i in range(len(pairs)):
        start = time.perf_counter()
        code3d = branch3d.encode(pairs.voxels[i])[0]
        mid = time.perf_counter()
        code2d = branch2d.encode(pairs.top_views[i])[0]
        end = time.perf_counter()
        feat = stitch(code2d, code3d)
        t3 += mid - start
        t2 += end - mid
        ts += time.perf_counter() - end
        features.append(feat)
    n = max(len(pairs), 1)
    report = LatencyReport(
        mean_3d_ms=1e3 * t3 / n, mean_2d_ms=1e3 * t2 / n,
        mean_stitch_ms=1e3 * ts / n,
    )
    return np.stack(features) if features else np.zeros((0, 0), np.float32), report
