"""Dense tensor ops used by the pipeline, on top of torch.

Feature maps are NCHW.  Everything here is a thin, checked wrapper so the
rest of the package (and the finite-difference oracle below) has one place
to go for convolution, normalization and gradient bookkeeping.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import torch
import torch.nn.functional as F

Tensor = torch.Tensor

LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class NumericError(FloatingPointError):
    """Raised when a computation produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class GraphConsumedError(RuntimeError):
    pass


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    # one reduction; any NaN/Inf (or overflow to Inf) poisons the sum
    if not torch.isfinite(x.detach().sum()):
        bad = (~torch.isfinite(x)).sum().item()
        if bad:
            raise NumericError(f"{what}: {bad} non-finite value(s)")
    return x


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int | None = None, groups: int = 1) -> Tensor:
    """Cross-correlation with zero padding.

    ``padding=None`` means "same" for odd kernels at stride 1.
    """
    if x.dim() != 4 or kernel.dim() != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {tuple(x.shape)} and {tuple(kernel.shape)}")
    cout, cin_g, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
    if x.shape[1] != cin_g * groups:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernel expects {cin_g}*{groups}={cin_g * groups}")
    if cout % groups:
        raise ShapeError(f"output channels {cout} not divisible by groups {groups}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {tuple(bias.shape)} does not match output channels {cout}")
    if padding is None:
        padding = (kh - 1) // 2
        pw = (kw - 1) // 2
        return F.conv2d(x, kernel, bias, stride=stride, padding=(padding, pw), groups=groups)
    return F.conv2d(x, kernel, bias, stride=stride, padding=padding, groups=groups)


def depthwise_conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int | None = None) -> Tensor:
    c = x.shape[1]
    if kernel.shape[:2] != (c, 1):
        raise ShapeError(f"depthwise kernel must be ({c}, 1, kh, kw), got {tuple(kernel.shape)}")
    return conv2d(x, kernel, bias, stride=stride, padding=padding, groups=c)


relu = torch.relu
sigmoid = torch.sigmoid
tanh = torch.tanh
silu = F.silu


def squared_relu(x: Tensor) -> Tensor:
    return torch.relu(x).square()


def softmax(x: Tensor) -> Tensor:
    # F.softmax subtracts the row max internally
    return F.softmax(x, dim=-1)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = LN_EPS) -> Tensor:
    """Normalize over the channel axis (dim 1) of each spatial token.

    Constant tokens (zero variance) map to 0 before the affine step.  Small
    but nonzero variance is still normalized so low-amplitude residual
    branches keep their gradient.
    """
    mean = x.mean(dim=1, keepdim=True)
    centered = x - mean
    var = centered.square().mean(dim=1, keepdim=True)
    y = centered / torch.sqrt(var + eps)
    y = torch.where(var == 0, torch.zeros_like(y), y)
    shape = (1, -1) + (1,) * (x.dim() - 2)
    if gamma is not None:
        y = y * gamma.reshape(shape)
    if beta is not None:
        y = y + beta.reshape(shape)
    return y


class RunningStats:
    """Mutable BatchNorm running mean/var pair (momentum 0.1)."""

    def __init__(self, mean: Tensor | None = None, var: Tensor | None = None):
        self.mean = mean
        self.var = var

    @property
    def initialized(self) -> bool:
        return self.mean is not None and self.var is not None


def batch_norm(x: Tensor, scale: Tensor | None, shift: Tensor | None,
               running_stats: RunningStats | None, mode: str = "train",
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    dims = [0] + list(range(2, x.dim()))
    shape = (1, -1) + (1,) * (x.dim() - 2)
    if mode == "train":
        mean = x.mean(dim=dims)
        var = x.var(dim=dims, unbiased=False)
        if running_stats is not None:
            n = x.numel() // x.shape[1]
            unbiased = var.detach() * (n / (n - 1)) if n > 1 else var.detach()
            if running_stats.initialized:
                running_stats.mean.mul_(1 - momentum).add_(momentum * mean.detach())
                running_stats.var.mul_(1 - momentum).add_(momentum * unbiased)
            else:
                running_stats.mean = (momentum * mean.detach()).clone()
                running_stats.var = ((1 - momentum) + momentum * unbiased).clone()
    else:
        if running_stats is None or not running_stats.initialized:
            raise RuntimeError("batch_norm in eval mode needs initialized running statistics")
        mean, var = running_stats.mean, running_stats.var
    y = (x - mean.reshape(shape)) / torch.sqrt(var.reshape(shape) + eps)
    if scale is not None:
        y = y * scale.reshape(shape)
    if shift is not None:
        y = y + shift.reshape(shape)
    return y


class GradContext:
    """Collects gradients for a named parameter set from one backward pass.

    A context is good for exactly one backward; a second call raises
    ``GraphConsumedError``.
    """

    def __init__(self, params: Mapping[str, Tensor] | torch.nn.Module):
        if isinstance(params, torch.nn.Module):
            params = dict(params.named_parameters())
        self.params = {k: p for k, p in params.items() if p.requires_grad}
        self.grads: dict[str, Tensor] = {}
        self.consumed = False

    def backward(self, loss: Tensor) -> dict[str, Tensor]:
        if self.consumed:
            raise GraphConsumedError("backward already ran on this context; record a new graph")
        if loss.dim() != 0:
            raise ShapeError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
        check_finite(loss, "loss")
        names = list(self.params)
        tensors = [self.params[n] for n in names]
        grads = torch.autograd.grad(loss, tensors, allow_unused=True)
        self.consumed = True
        for name, p, g in zip(names, tensors, grads):
            g = torch.zeros_like(p) if g is None else g
            check_finite(g, f"gradient of {name}")
            self.grads[name] = g
        return self.grads

    def accumulate_into_params(self) -> None:
        """Write collected gradients into ``.grad`` so torch optimizers see them."""
        for name, g in self.grads.items():
            p = self.params[name]
            p.grad = g.detach().clone() if p.grad is None else p.grad + g.detach()


def backward(loss: Tensor, ctx: GradContext) -> dict[str, Tensor]:
    return ctx.backward(loss)


def finite_diff_check(f: Callable[[], Tensor], inputs: Sequence[Tensor] | Iterable[Tensor],
                      step: float = 1e-4, max_coords: int | None = None,
                      seed: int = 0) -> float:
    """Max relative error between autograd and central differences.

    ``f`` is a zero-argument closure returning a scalar built from
    ``inputs`` (leaf tensors, perturbed in place).  Error per coordinate is
    ``|analytic - numeric| / (|numeric| + 1e-8)``.  ``max_coords`` samples
    that many coordinates per tensor instead of sweeping all of them.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad_(True)
    out = f()
    check_finite(out, "finite_diff_check output")
    analytic = torch.autograd.grad(out, inputs, allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(inputs, analytic):
            g = torch.zeros_like(t) if g is None else g
            flat = t.view(-1)
            gflat = g.reshape(-1)
            n = flat.numel()
            if max_coords is not None and n > max_coords:
                coords = torch.randperm(n, generator=gen)[:max_coords].tolist()
            else:
                coords = range(n)
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                numeric = (fp - fm) / (2 * step)
                if not (abs(fp) < float("inf") and abs(fm) < float("inf")):
                    raise NumericError("non-finite value while probing finite differences")
                err = abs(gflat[i].item() - numeric) / (abs(numeric) + 1e-8)
                worst = max(worst, err)
    return worst


def module_grad_check(module: torch.nn.Module, f: Callable[[], Tensor], step: float = 1e-4,
                      max_coords: int | None = None, seed: int = 0) -> dict[str, float]:
    """Run ``finite_diff_check`` over every trainable parameter of ``module``.

    Returns the worst relative error per parameter name.
    """
    report = {}
    for name, p in module.named_parameters():
        if p.requires_grad:
            report[name] = finite_diff_check(f, [p], step=step, max_coords=max_coords, seed=seed)
    return report
