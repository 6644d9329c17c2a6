"""Bidirectional adversarial feature learners for the two map domains.

Each domain (3-D voxel grid, 2-D top view) gets one branch consisting of an
encoder En: map -> latent code, a decoder De: latent -> map, and a joint
discriminator D(map, code) -> (0, 1).  The value function is

    v = E[log D(x, En(x))] + E[log(1 - D(De(z), z))]

with z drawn from a standard normal prior.  The discriminator ascends v; the
generator pair (En, De) descends it, by default through the non-saturating
surrogate.  Discriminator outputs are clamped away from {0, 1} so the logs
stay finite.

Loop-closure features are the stitched latent codes [code2d | code3d].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import autodiff
from .autodiff import ShapeMismatch, backward, optimizer_step, zero_gradients

D_CLAMP_EPS = 1e-6


class DimensionMismatch(ValueError):
    """Raised when latent codes cannot be stitched or compared."""


@dataclass(frozen=True)
class BranchArchitecture:
    """Hyperparameters of one branch.  domain is "map2d" or "map3d".

    input_shape is the spatial map shape; channels are the encoder stage
    widths (the decoder mirrors them).  Every conv stage halves each spatial
    side (kernel 4, stride 2, padding 1), so each side of input_shape must be
    divisible by 2**len(channels).
    """

    domain: str
    input_shape: tuple = ()
    latent_dim: int = 512
    channels: tuple = (32, 64, 128, 256)
    disc_hidden: int = 512

    def __post_init__(self):
        if self.domain not in ("map2d", "map3d"):
            raise ValueError(f"unknown domain {self.domain!r}")
        if not self.input_shape:
            default = (64, 64) if self.domain == "map2d" else (32, 32, 32)
            object.__setattr__(self, "input_shape", default)
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "channels", tuple(self.channels))
        factor = 2 ** len(self.channels)
        for side in self.input_shape:
            if side % factor != 0:
                raise ValueError(
                    f"side {side} not divisible by {factor} "
                    f"({len(self.channels)} halving stages)"
                )

    @property
    def dim(self) -> int:
        return len(self.input_shape)

    @property
    def final_side(self) -> int:
        return self.input_shape[0] // 2 ** len(self.channels)


class MapEncoder(nn.Module):
    """Strided conv stack ending in an affine projection to the latent code."""

    def __init__(self, arch: BranchArchitecture, dtype=torch.float32):
        super().__init__()
        layers = []
        prev = 1
        for i, ch in enumerate(arch.channels):
            layers.append(autodiff.conv(arch.dim, prev, ch, dtype=dtype))
            if i > 0:
                layers.append(autodiff.batch_norm(arch.dim, ch, dtype=dtype))
            layers.append(autodiff.leaky_relu())
            prev = ch
        layers.append(nn.Flatten())
        flat = arch.channels[-1] * arch.final_side ** arch.dim
        layers.append(autodiff.affine(flat, arch.latent_dim, dtype=dtype))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class MapDecoder(nn.Module):
    """Mirror of the encoder: affine, then transposed convs up to map size."""

    def __init__(self, arch: BranchArchitecture, dtype=torch.float32):
        super().__init__()
        side = arch.final_side
        widths = arch.channels[::-1]
        flat = widths[0] * side ** arch.dim
        layers = [
            autodiff.affine(arch.latent_dim, flat, dtype=dtype),
            nn.Unflatten(1, (widths[0],) + (side,) * arch.dim),
        ]
        for i in range(len(widths)):
            out_ch = widths[i + 1] if i + 1 < len(widths) else 1
            layers.append(autodiff.deconv(arch.dim, widths[i], out_ch, dtype=dtype))
            if i + 1 < len(widths):
                layers.append(autodiff.batch_norm(arch.dim, out_ch, dtype=dtype))
                layers.append(autodiff.leaky_relu())
        layers.append(autodiff.logistic())
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


class JointDiscriminator(nn.Module):
    """D(map, code): conv path (no batch norm) joined with an affine code path."""

    def __init__(self, arch: BranchArchitecture, dtype=torch.float32):
        super().__init__()
        layers = []
        prev = 1
        for ch in arch.channels:
            layers.append(autodiff.conv(arch.dim, prev, ch, dtype=dtype))
            layers.append(autodiff.leaky_relu())
            prev = ch
        layers.append(nn.Flatten())
        self.map_path = nn.Sequential(*layers)
        self.code_path = nn.Sequential(
            autodiff.affine(arch.latent_dim, arch.disc_hidden, dtype=dtype),
            autodiff.leaky_relu(),
        )
        flat = arch.channels[-1] * arch.final_side ** arch.dim
        self.joint = nn.Sequential(
            autodiff.affine(flat + arch.disc_hidden, arch.disc_hidden,
                            dtype=dtype),
            autodiff.leaky_relu(),
            autodiff.affine(arch.disc_hidden, 1, dtype=dtype),
            autodiff.logistic(),
        )

    def forward(self, x, z):
        joint = torch.cat([self.map_path(x), self.code_path(z)], dim=1)
        prob = self.joint(joint).squeeze(1)
        return torch.clamp(prob, D_CLAMP_EPS, 1.0 - D_CLAMP_EPS)


@dataclass
class ValueEstimate:
    """Value-function reading from one batch."""

    value: float
    d_real_mean: float  # mean D(x, En(x))
    d_fake_mean: float  # mean D(De(z), z)


class BiGANBranch:
    """One domain's encoder/decoder/discriminator plus their optimizers.

    Custom modules may be injected (e.g. frozen generators for analysis);
    save()/load() round-trips are supported for create()-built branches.
    """

    def __init__(self, arch: BranchArchitecture, encoder, decoder,
                 discriminator, seed: int = 0, lr: float = autodiff.ADAM_LR,
                 betas=autodiff.ADAM_BETAS, dtype=torch.float32):
        self.arch = arch
        self.encoder = encoder
        self.decoder = decoder
        self.discriminator = discriminator
        self.dtype = dtype
        self.lr = lr
        self.betas = betas
        self.seed = seed
        gen_named = [
            (f"encoder.{n}", p) for n, p in encoder.named_parameters()
            if p.requires_grad
        ] + [
            (f"decoder.{n}", p) for n, p in decoder.named_parameters()
            if p.requires_grad
        ]
        self.gen_names = [n for n, _ in gen_named]
        self.opt_gen = (
            autodiff.make_adam((p for _, p in gen_named), lr=lr, betas=betas)
            if gen_named else None
        )
        disc_named = list(discriminator.named_parameters())
        self.disc_names = [f"discriminator.{n}" for n, _ in disc_named]
        self.opt_disc = autodiff.make_adam(
            (p for _, p in disc_named), lr=lr, betas=betas
        )
        self._z_generator = torch.Generator().manual_seed(seed + 7919)

    @classmethod
    def create(cls, arch: BranchArchitecture, seed: int = 0,
               lr: float = autodiff.ADAM_LR, betas=autodiff.ADAM_BETAS,
               dtype=torch.float32) -> "BiGANBranch":
        encoder = MapEncoder(arch, dtype=dtype)
        decoder = MapDecoder(arch, dtype=dtype)
        discriminator = JointDiscriminator(arch, dtype=dtype)
        autodiff.init_parameters(encoder, seed)
        autodiff.init_parameters(decoder, seed + 1)
        autodiff.init_parameters(discriminator, seed + 2)
        return cls(arch, encoder, decoder, discriminator, seed=seed, lr=lr,
                   betas=betas, dtype=dtype)

    # -- tensor plumbing ----------------------------------------------------

    def as_batch(self, maps) -> torch.Tensor:
        """Coerce maps into a (B, 1, *spatial) batch, validating the shape."""
        if isinstance(maps, torch.Tensor):
            arr = maps.detach().to(self.dtype)
        else:
            arr = torch.as_tensor(np.asarray(maps), dtype=self.dtype)
        spatial = self.arch.input_shape
        if arr.shape[-len(spatial):] != spatial:
            raise ShapeMismatch(
                f"{self.arch.domain}: map shape {tuple(arr.shape)} does not "
                f"end with {spatial}"
            )
        lead = arr.shape[: arr.ndim - len(spatial)]
        if lead == ():
            batch = arr[None]
        elif len(lead) == 1:
            batch = arr
        elif len(lead) == 2 and lead[1] == 1:
            return arr.reshape(lead[0], 1, *spatial)
        else:
            raise ShapeMismatch(
                f"{self.arch.domain}: cannot batch shape {tuple(arr.shape)}"
            )
        if len(spatial) == 1:
            return batch  # rank-1 toys: feature dim doubles as channel
        return batch[:, None]

    def sample_latent(self, n: int) -> torch.Tensor:
        return torch.randn(
            (n, self.arch.latent_dim), generator=self._z_generator,
            dtype=self.dtype,
        )

    def as_latent(self, z) -> torch.Tensor:
        if isinstance(z, torch.Tensor):
            return z.detach().to(self.dtype)
        return torch.as_tensor(np.asarray(z), dtype=self.dtype)

    def train_mode(self) -> None:
        self.encoder.train()
        self.decoder.train()
        self.discriminator.train()

    def eval_mode(self) -> None:
        self.encoder.eval()
        self.decoder.eval()
        self.discriminator.eval()

    # -- inference ----------------------------------------------------------

    def encode(self, maps) -> np.ndarray:
        """Latent codes, (B, latent_dim) float32, computed in eval mode."""
        batch = self.as_batch(maps)
        self.eval_mode()
        with torch.no_grad():
            codes = autodiff.run_forward(self.encoder, batch)
        return codes.to(torch.float32).numpy()

    def discrimination(self, maps) -> np.ndarray:
        """D(x, En(x)) per map, in eval mode: familiarity of each sample."""
        batch = self.as_batch(maps)
        self.eval_mode()
        with torch.no_grad():
            codes = autodiff.run_forward(self.encoder, batch)
            probs = autodiff.run_forward(self.discriminator, batch, codes)
        return probs.to(torch.float32).numpy()

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        tensors = {
            "meta.domain": np.float32(0.0 if self.arch.domain == "map2d" else 1.0),
            "meta.input_shape": np.asarray(self.arch.input_shape, np.float32),
            "meta.latent_dim": np.float32(self.arch.latent_dim),
            "meta.channels": np.asarray(self.arch.channels, np.float32),
            "meta.disc_hidden": np.float32(self.arch.disc_hidden),
            "meta.seed": np.float32(self.seed),
            # lr/betas as float64 bit patterns: rounding them to float32 would
            # perturb 1 - beta2 and break bit-exact training resumption
            "meta.lr": np.asarray([self.lr], "<f8").view("<f4"),
            "meta.betas": np.asarray(self.betas, "<f8").view("<f4"),
            "meta.z_state": np.frombuffer(
                self._z_generator.get_state().numpy().tobytes(), np.uint8
            ).astype(np.float32),
        }
        tensors.update(autodiff.named_tensors(self.encoder, "encoder"))
        tensors.update(autodiff.named_tensors(self.decoder, "decoder"))
        tensors.update(autodiff.named_tensors(self.discriminator, "discriminator"))
        if self.opt_gen is not None:
            tensors.update(
                autodiff.optimizer_tensors(self.opt_gen, self.gen_names, "opt_gen")
            )
        tensors.update(
            autodiff.optimizer_tensors(self.opt_disc, self.disc_names, "opt_disc")
        )
        autodiff.save_checkpoint(path, tensors)

    @classmethod
    def load(cls, path) -> "BiGANBranch":
        tensors = autodiff.load_checkpoint(path)
        arch = BranchArchitecture(
            domain="map2d" if float(tensors["meta.domain"]) == 0.0 else "map3d",
            input_shape=tuple(int(v) for v in tensors["meta.input_shape"]),
            latent_dim=int(tensors["meta.latent_dim"]),
            channels=tuple(int(v) for v in tensors["meta.channels"]),
            disc_hidden=int(tensors["meta.disc_hidden"]),
        )
        branch = cls.create(
            arch, seed=int(tensors["meta.seed"]),
            lr=float(np.ascontiguousarray(tensors["meta.lr"]).view("<f8")[0]),
            betas=tuple(
                float(b)
                for b in np.ascontiguousarray(tensors["meta.betas"]).view("<f8")
            ),
        )
        autodiff.load_named_tensors(branch.encoder, tensors, "encoder")
        autodiff.load_named_tensors(branch.decoder, tensors, "decoder")
        autodiff.load_named_tensors(branch.discriminator, tensors, "discriminator")
        if branch.opt_gen is not None:
            autodiff.load_optimizer_tensors(
                branch.opt_gen, branch.gen_names, tensors, "opt_gen"
            )
        autodiff.load_optimizer_tensors(
            branch.opt_disc, branch.disc_names, tensors, "opt_disc"
        )
        state = tensors["meta.z_state"].astype(np.uint8).tobytes()
        branch._z_generator.set_state(
            torch.from_numpy(np.frombuffer(state, np.uint8).copy())
        )
        return branch


# ---------------------------------------------------------------------------
# value function and adversarial steps

def _value_terms(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    return torch.log(d_real).mean() + torch.log(1.0 - d_fake).mean()


def bigan_value(branch: BiGANBranch, maps, z=None) -> ValueEstimate:
    """Measure the value function on one batch without any side effects."""
    x = branch.as_batch(maps)
    z = branch.sample_latent(x.shape[0]) if z is None else branch.as_latent(z)
    branch.eval_mode()
    with torch.no_grad():
        ex = autodiff.run_forward(branch.encoder, x)
        gz = autodiff.run_forward(branch.decoder, z)
        d_real = autodiff.run_forward(branch.discriminator, x, ex)
        d_fake = autodiff.run_forward(branch.discriminator, gz, z)
        v = _value_terms(d_real, d_fake)
    return ValueEstimate(float(v), float(d_real.mean()), float(d_fake.mean()))


def discriminator_step(branch: BiGANBranch, maps, z=None,
                       loss_scale: float = 1.0) -> ValueEstimate:
    """One ascent step of D on the value function.  En/De stay untouched."""
    x = branch.as_batch(maps)
    z = branch.sample_latent(x.shape[0]) if z is None else branch.as_latent(z)
    branch.train_mode()
    zero_gradients(branch.encoder, branch.decoder, branch.discriminator)
    with torch.no_grad():
        ex = autodiff.run_forward(branch.encoder, x)
        gz = autodiff.run_forward(branch.decoder, z)
    d_real = autodiff.run_forward(branch.discriminator, x, ex)
    d_fake = autodiff.run_forward(branch.discriminator, gz, z)
    v = _value_terms(d_real, d_fake)
    backward(-v * loss_scale)
    optimizer_step(branch.opt_disc, branch.disc_names)
    return ValueEstimate(float(v.detach()), float(d_real.mean().detach()),
                         float(d_fake.mean().detach()))


def generator_step(branch: BiGANBranch, maps, z=None, saturating: bool = False,
                   loss_scale: float = 1.0) -> ValueEstimate:
    """One descent step of (En, De) on the value function.

    The default non-saturating surrogate minimizes
    -E[log(1 - D(x, En(x)))] - E[log D(De(z), z)], which has the same fixed
    points but useful gradients when D is confident; saturating=True descends
    the value function directly.  D's parameters stay untouched.
    """
    if branch.opt_gen is None:
        raise autodiff.MissingGrad("branch has no trainable generator parameters")
    x = branch.as_batch(maps)
    z = branch.sample_latent(x.shape[0]) if z is None else branch.as_latent(z)
    branch.train_mode()
    zero_gradients(branch.encoder, branch.decoder, branch.discriminator)
    ex = autodiff.run_forward(branch.encoder, x)
    gz = autodiff.run_forward(branch.decoder, z)
    d_real = autodiff.run_forward(branch.discriminator, x, ex)
    d_fake = autodiff.run_forward(branch.discriminator, gz, z)
    v = _value_terms(d_real, d_fake)
    if saturating:
        loss = v
    else:
        loss = -(torch.log(1.0 - d_real).mean() + torch.log(d_fake).mean())
    backward(loss * loss_scale)
    zero_gradients(branch.discriminator)  # the surrogate also touches D
    optimizer_step(branch.opt_gen, branch.gen_names)
    return ValueEstimate(float(v.detach()), float(d_real.mean().detach()),
                         float(d_fake.mean().detach()))


def stitch(code2d: np.ndarray, code3d: np.ndarray) -> np.ndarray:
    """Concatenate per-domain codes into one loop-closure feature vector."""
    a = np.asarray(code2d, dtype=np.float32)
    b = np.asarray(code3d, dtype=np.float32)
    if a.ndim != 1 or b.ndim != 1:
        raise DimensionMismatch(
            f"codes must be 1-D, got {a.shape} and {b.shape}"
        )
    return np.concatenate([a, b])
