"""Differentiable-layer toolkit used by the adversarial models.

Thin adapters over torch (CPU) fixing the layer set, the initialization
scheme and the optimizer defaults used everywhere in this package, plus a
finite-difference gradient probe and checkpoint (de)serialization into the
'C' container.  Layers support float64 so gradient checks can run at high
precision.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from . import formats

LEAKY_SLOPE = 0.2
INIT_STD = 0.02
ADAM_LR = 2e-4
ADAM_BETAS = (0.5, 0.999)
ADAM_EPS = 1e-8


class ShapeMismatch(ValueError):
    """Raised when an input does not match a layer stack's expected shape."""


class NotScalar(ValueError):
    """Raised when backward() is called on a non-scalar value."""


class NoTrace(ValueError):
    """Raised when backward() is called on a value with no recorded graph."""


class MissingGrad(ValueError):
    """Raised when an optimizer step finds a parameter without a gradient."""


# ---------------------------------------------------------------------------
# layer builders

def affine(in_features: int, out_features: int, dtype=torch.float32):
    return nn.Linear(in_features, out_features, dtype=dtype)


def conv(dim: int, in_ch: int, out_ch: int, kernel: int = 4, stride: int = 2,
         padding: int = 1, dtype=torch.float32):
    cls = {2: nn.Conv2d, 3: nn.Conv3d}[dim]
    return cls(in_ch, out_ch, kernel, stride=stride, padding=padding,
               dtype=dtype)


def deconv(dim: int, in_ch: int, out_ch: int, kernel: int = 4, stride: int = 2,
           padding: int = 1, dtype=torch.float32):
    cls = {2: nn.ConvTranspose2d, 3: nn.ConvTranspose3d}[dim]
    return cls(in_ch, out_ch, kernel, stride=stride, padding=padding,
               dtype=dtype)


def batch_norm(dim: int, channels: int, dtype=torch.float32):
    cls = {1: nn.BatchNorm1d, 2: nn.BatchNorm2d, 3: nn.BatchNorm3d}[dim]
    return cls(channels, dtype=dtype)


def leaky_relu():
    return nn.LeakyReLU(LEAKY_SLOPE)


def logistic():
    return nn.Sigmoid()


def init_parameters(module: nn.Module, seed: int, std: float = INIT_STD) -> None:
    """Gaussian(0, std) weights, zero biases, identity batch-norm affines."""
    generator = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.Conv3d,
                          nn.ConvTranspose2d, nn.ConvTranspose3d)):
            with torch.no_grad():
                m.weight.copy_(
                    torch.randn(m.weight.shape, generator=generator,
                                dtype=m.weight.dtype) * std
                )
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d, nn.BatchNorm3d)):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.running_mean.zero_()
                m.running_var.fill_(1.0)


def run_forward(module: nn.Module, *inputs):
    """Apply a module, converting shape errors into ShapeMismatch."""
    try:
        return module(*inputs)
    except RuntimeError as exc:
        raise ShapeMismatch(f"{type(module).__name__}: {exc}") from exc


# ---------------------------------------------------------------------------
# backward / optimizer

def backward(value: torch.Tensor) -> None:
    """Backpropagate from a scalar with a recorded graph."""
    if not isinstance(value, torch.Tensor) or value.numel() != 1:
        raise NotScalar(f"backward needs a scalar, got {getattr(value, 'shape', None)}")
    if value.grad_fn is None:
        raise NoTrace("value has no recorded computation graph")
    value.backward()


def make_adam(params, lr: float = ADAM_LR, betas=ADAM_BETAS,
              eps: float = ADAM_EPS) -> torch.optim.Adam:
    return torch.optim.Adam(list(params), lr=lr, betas=betas, eps=eps)


def zero_gradients(*modules) -> None:
    for module in modules:
        for p in module.parameters():
            p.grad = None


def optimizer_step(optimizer: torch.optim.Optimizer, names=None) -> int:
    """Apply one update; every managed parameter must hold a gradient.

    Returns the post-step step count of the first parameter group.
    """
    params = [p for group in optimizer.param_groups for p in group["params"]]
    for i, p in enumerate(params):
        if p.grad is None:
            label = names[i] if names and i < len(names) else f"parameter {i}"
            raise MissingGrad(f"no gradient for {label}")
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    state = optimizer.state[params[0]]
    return int(state["step"])


def step_count(optimizer: torch.optim.Optimizer) -> int:
    """Steps taken so far (0 before the first update)."""
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if state and "step" in state:
                return int(state["step"])
    return 0


# ---------------------------------------------------------------------------
# finite differences

def finite_difference_gradients(fn, inputs, h: float = 1e-5):
    """Central-difference gradients of a scalar fn w.r.t. each input tensor."""
    grads = []
    with torch.no_grad():
        for tensor in inputs:
            flat = tensor.reshape(-1)
            grad = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus = float(fn(*inputs))
                flat[i] = orig - h
                f_minus = float(fn(*inputs))
                flat[i] = orig
                grad[i] = (f_plus - f_minus) / (2 * h)
            grads.append(grad.reshape(tensor.shape))
    return grads


def gradient_check(fn, inputs, h: float = 1e-5) -> float:
    """Max relative error between autodiff and finite-difference gradients."""
    leaves = [t.detach().clone().requires_grad_(True) for t in inputs]
    value = fn(*leaves)
    backward(value)
    numeric = finite_difference_gradients(fn, [t.detach().clone() for t in leaves], h=h)
    worst = 0.0
    for leaf, num in zip(leaves, numeric):
        denom = np.maximum(
            np.abs(num.numpy()) + np.abs(leaf.grad.numpy()), 1e-8
        )
        err = np.abs(leaf.grad.numpy() - num.numpy()) / denom
        worst = max(worst, float(err.max()))
    return worst


# ---------------------------------------------------------------------------
# checkpointing

def named_tensors(module: nn.Module, prefix: str) -> dict:
    """Parameters and buffers of a module as {prefix.name: float32 ndarray}."""
    out = {}
    for name, p in module.named_parameters():
        out[f"{prefix}.{name}"] = p.detach().numpy().astype(np.float32)
    for name, b in module.named_buffers():
        out[f"{prefix}.{name}"] = b.detach().numpy().astype(np.float32)
    return out


def load_named_tensors(module: nn.Module, tensors: dict, prefix: str) -> None:
    """Load checkpointed arrays back into a module's parameters and buffers."""
    with torch.no_grad():
        for name, p in list(module.named_parameters()) + list(module.named_buffers()):
            key = f"{prefix}.{name}"
            if key not in tensors:
                raise KeyError(f"checkpoint is missing tensor {key}")
            value = torch.from_numpy(np.asarray(tensors[key]))
            p.copy_(value.reshape(p.shape).to(p.dtype))


def optimizer_tensors(optimizer: torch.optim.Optimizer, names,
                      prefix: str) -> dict:
    """Adam moments and step counters as checkpoint tensors."""
    out = {}
    params = [p for group in optimizer.param_groups for p in group["params"]]
    for name, p in zip(names, params):
        state = optimizer.state.get(p)
        if not state:
            continue
        out[f"{prefix}.{name}.step"] = np.array(float(state["step"]), np.float32)
        out[f"{prefix}.{name}.exp_avg"] = state["exp_avg"].numpy().astype(np.float32)
        out[f"{prefix}.{name}.exp_avg_sq"] = (
            state["exp_avg_sq"].numpy().astype(np.float32)
        )
    return out


def load_optimizer_tensors(optimizer: torch.optim.Optimizer, names,
                           tensors: dict, prefix: str) -> None:
    params = [p for group in optimizer.param_groups for p in group["params"]]
    for name, p in zip(names, params):
        key = f"{prefix}.{name}.step"
        if key not in tensors:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(tensors[key])),
            "exp_avg": torch.from_numpy(
                np.asarray(tensors[f"{prefix}.{name}.exp_avg"])
            ).reshape(p.shape).to(p.dtype).clone(),
            "exp_avg_sq": torch.from_numpy(
                np.asarray(tensors[f"{prefix}.{name}.exp_avg_sq"])
            ).reshape(p.shape).to(p.dtype).clone(),
        }


def save_checkpoint(path, tensors: dict) -> None:
    formats.write_checkpoint(path, tensors)


def load_checkpoint(path) -> dict:
    return formats.read_checkpoint(path)
