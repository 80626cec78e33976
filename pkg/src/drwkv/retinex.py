"""Light preprocessing and Global Edge Retinex recomposition.

Image tensors are (3, H, W) or (N, 3, H, W); channel is always dim -3.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .tensor_core import relu

GER_EPS = 1e-4
GRAY_WORLD_EPS = 1e-6


@dataclass
class GERComponents:
    R: torch.Tensor
    L: torch.Tensor
    N: torch.Tensor
    S: torch.Tensor
    E: torch.Tensor
    alpha: torch.Tensor
    beta: torch.Tensor
    gamma: torch.Tensor


def gray_world(img: torch.Tensor, eps: float = GRAY_WORLD_EPS) -> torch.Tensor:
    """Per-channel gains that pull every channel mean to the global mean.

    A channel whose mean is below ``eps`` gets its gain computed against
    ``eps`` instead, so black images come back black rather than NaN.
    """
    means = img.mean(dim=(-2, -1), keepdim=True)
    target = means.mean(dim=-3, keepdim=True)
    gains = target / means.clamp(min=eps)
    return gains * img


def luma(img: torch.Tensor) -> torch.Tensor:
    return img.mean(dim=-3, keepdim=True)


class DepthwiseSeparable(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.depthwise = nn.Conv2d(cin, cin, 3, padding=1, groups=cin)
        self.pointwise = nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        return relu(self.pointwise(self.depthwise(x)))


class LightPreprocess(nn.Module):
    """Three depthwise-separable stages feeding 1x1 heads for S, L and N.

    Input is the image concatenated with its gray-world correction and its
    luma (7 channels).
    """

    in_channels = 7

    def __init__(self, width: int = 16):
        super().__init__()
        self.backbone = nn.Sequential(
            DepthwiseSeparable(self.in_channels, width),
            DepthwiseSeparable(width, width),
            DepthwiseSeparable(width, width),
        )
        self.head_s = nn.Conv2d(width, 3, 1)
        self.head_l = nn.Conv2d(width, 1, 1)
        self.head_n = nn.Conv2d(width, 3, 1)

    def zero_heads(self):
        for head in (self.head_s, self.head_l, self.head_n):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, img):
        return estimate_components(img, self)


def estimate_components(img: torch.Tensor, p: LightPreprocess):
    """Returns (S, L, N) with ranges (0,1), (0,2), (-1,1)."""
    batched = img.dim() == 4
    x = img if batched else img.unsqueeze(0)
    feats = p.backbone(torch.cat([x, gray_world(x), luma(x)], dim=1))
    s = torch.sigmoid(p.head_s(feats))
    l_ = 2 * torch.sigmoid(p.head_l(feats))
    n = torch.tanh(p.head_n(feats))
    if not batched:
        s, l_, n = s[0], l_[0], n[0]
    return s, l_, n


def reflectance_restore(img, noise, illum, eps: float = GER_EPS):
    """Brighten by multiplying the image with its restored reflectance."""
    refl = (img - noise) / (illum + eps)
    return torch.clamp(img * refl, 0.0, 1.0)


class GERParams(nn.Module):
    def __init__(self, init: float = 0.1, eps: float = GER_EPS):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.alpha = nn.Parameter(torch.tensor(init))
        self.beta = nn.Parameter(torch.tensor(init))
        self.gamma = nn.Parameter(torch.tensor(init))
        self.eps = eps


def ger_reflectance(x, noise, illum, eps: float = GER_EPS):
    return torch.clamp((x - noise) / (illum + eps), 0.0, 1.0)


def ger_recompose(x, edge, noise, illum, artifact, p: GERParams, return_reflectance: bool = False):
    """(R + alpha*E) * L + beta*N + gamma*S, clamped to [0, 1].

    R is recovered by dividing by ``L + eps``; the product uses the same
    ``L + eps`` so the round trip is exact when every correction vanishes.
    """
    refl = ger_reflectance(x, noise, illum, p.eps)
    enhanced = (refl + p.alpha * edge) * (illum + p.eps) + p.beta * noise + p.gamma * artifact
    enhanced = torch.clamp(enhanced, 0.0, 1.0)
    if return_reflectance:
        return enhanced, refl
    return enhanced
