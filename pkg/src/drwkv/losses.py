"""MS2 loss terms and full-reference quality metrics (PSNR, SSIM).

Every norm is a mean, so the weights do not depend on image size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .tensor_core import ShapeError


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.01
    lambda3: float = 0.1
    lambda4: float = 0.05
    lambda5: float = 1e-4
    lambda_smooth: float = 10.0
    delta_tv: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")


TERMS = ("recon", "sparse", "smooth", "artifact", "reg")


@dataclass
class LossBreakdown:
    recon: torch.Tensor
    sparse: torch.Tensor
    smooth: torch.Tensor
    artifact: torch.Tensor
    reg: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def _same(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _forward_diffs(x):
    """Forward differences along h and w; the last row/column gets 0."""
    dh = F.pad(x[..., 1:, :] - x[..., :-1, :], (0, 0, 0, 1))
    dw = F.pad(x[..., :, 1:] - x[..., :, :-1], (0, 1, 0, 0))
    return dh, dw


def l_recon(target, enhanced):
    _same(target, enhanced)
    return (target - enhanced).abs().mean()


def l_sparse(edge):
    return edge.abs().mean()


def l_smooth(illum, img, lambda_smooth: float = 10.0):
    """Edge-aware illumination smoothness: |grad L| * exp(-lambda |grad luma(I)|)."""
    if illum.shape[-2:] != img.shape[-2:]:
        raise ShapeError(f"illumination {tuple(illum.shape)} and image {tuple(img.shape)} differ spatially")
    lum = img.mean(dim=-3, keepdim=True)
    lh, lw = _forward_diffs(illum)
    ih, iw = _forward_diffs(lum)
    terms = torch.stack([lh.abs() * torch.exp(-lambda_smooth * ih.abs()),
                         lw.abs() * torch.exp(-lambda_smooth * iw.abs())])
    return terms.mean()


def total_variation(x):
    dh, dw = _forward_diffs(x)
    return (dh.abs() + dw.abs()).mean()


def l_artifact(artifact, delta_tv: float = 1.0):
    return artifact.abs().mean() + delta_tv * total_variation(artifact)


def l_reg(alpha, beta, gamma):
    return alpha ** 2 + beta ** 2 + gamma ** 2


def ms2_total(parts: dict, w: LossWeights = LossWeights()) -> LossBreakdown:
    lams = (w.lambda1, w.lambda2, w.lambda3, w.lambda4, w.lambda5)
    vals = [torch.as_tensor(parts[k]) for k in TERMS]
    total = sum(lam * v for lam, v in zip(lams, vals))
    return LossBreakdown(*vals, total=total)


def ms2_loss(out, target, low, w: LossWeights = LossWeights()) -> LossBreakdown:
    """Full MS2 loss for a model ``ForwardOutput`` against ``target``.

    ``low`` is the network input; the smoothness term follows its edges.
    """
    c = out.components
    parts = {
        "recon": l_recon(target, out.enhanced),
        "sparse": l_sparse(c.E),
        "smooth": l_smooth(c.L, low, w.lambda_smooth),
        "artifact": l_artifact(c.S, w.delta_tv),
        "reg": l_reg(c.alpha, c.beta, c.gamma),
    }
    return ms2_total(parts, w)


PSNR_CAP = 100.0


def psnr(a, b) -> float:
    _same(a, b)
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64):
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-x ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over 'valid' Gaussian windows, averaged over channels."""
    return float(ssim_torch(a.double(), b.double(), window, sigma, k1, k2, data_range))


def ssim_torch(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
               data_range: float = 1.0):
    _same(a, b)
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ShapeError(f"image {tuple(a.shape[-2:])} smaller than the {window}x{window} SSIM window")
    x = a.reshape(-1, 1, *a.shape[-2:])
    y = b.reshape(-1, 1, *b.shape[-2:])
    kern = _gaussian_window(window, sigma, x.dtype)[None, None]
    filt = lambda t: F.conv2d(t, kern)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return smap.mean()
