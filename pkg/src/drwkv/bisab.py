"""Bilateral Spectrum Aligner Block and its parts (CA, FDA, SAE, SEE)."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tensor_core import BN_EPS, BN_MOMENTUM, ShapeError, batch_norm, RunningStats, silu
from .wkv import ChannelLayerNorm

SCHARR_X = ((-3.0, 0.0, 3.0), (-10.0, 0.0, 10.0), (-3.0, 0.0, 3.0))
FDA_LAMBDA = 0.2


def _same_shape(*xs):
    s = xs[0].shape
    for x in xs[1:]:
        if x.shape != s:
            raise ShapeError(f"shape mismatch: {tuple(s)} vs {tuple(x.shape)}")


class CrossAttention(nn.Module):
    """Channel (transposed) cross-covariance attention: x queries y."""

    def __init__(self, channels: int, n_heads: int = 4):
        super().__init__()
        if channels % n_heads:
            raise ValueError(f"channels {channels} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.q_point = nn.Conv2d(channels, channels, 1)
        self.q_depth = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.kv_point = nn.Conv2d(channels, 2 * channels, 1)
        self.kv_depth = nn.Conv2d(2 * channels, 2 * channels, 3, padding=1, groups=2 * channels)
        self.out_proj = nn.Conv2d(channels, channels, 1)
        self.temperature = nn.Parameter(torch.tensor(math.sqrt(channels // n_heads)))

    def forward(self, x, y, return_attn: bool = False):
        return cross_attention(x, y, self, return_attn)


def cross_attention(x, y, p: CrossAttention, return_attn: bool = False):
    _same_shape(x, y)
    n, c, h, w = x.shape
    if c % p.n_heads:
        raise ShapeError(f"channels {c} not divisible by n_heads {p.n_heads}")
    q = p.q_depth(p.q_point(x))
    k, v = p.kv_depth(p.kv_point(y)).chunk(2, dim=1)
    heads = lambda t: t.reshape(n, p.n_heads, c // p.n_heads, h * w)
    q, k, v = heads(q), heads(k), heads(v)
    q = F.normalize(q, dim=-1)
    k = F.normalize(k, dim=-1)
    attn = torch.softmax(q @ k.transpose(-2, -1) / p.temperature, dim=-1)
    out = p.out_proj((attn @ v).reshape(n, c, h, w))
    return (out, attn) if return_attn else out


def fda(f_attn, f_q, f_k, f_v, lam: float = FDA_LAMBDA):
    """Feature difference adjustment."""
    _same_shape(f_attn, f_q, f_k, f_v)
    f_da = lam * (f_attn * f_k) + f_v
    return f_attn * f_q + f_da


class SAE(nn.Module):
    """Spectral alignment enhancer: expand, split, refine each half, multiply, fuse."""

    def __init__(self, channels: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or channels
        self.expand_point = nn.Conv2d(channels, 2 * hidden, 1)
        self.expand_depth = nn.Conv2d(2 * hidden, 2 * hidden, 3, padding=1, groups=2 * hidden)
        self.branch1 = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.branch2 = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.fuse = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        return sae(x, self)


def sae(x, p: SAE):
    f1, f2 = p.expand_depth(p.expand_point(x)).chunk(2, dim=1)
    f1 = f1 + torch.tanh(p.branch1(f1))
    f2 = f2 + torch.tanh(p.branch2(f2))
    return p.fuse(f1 * f2)


def scharr_kernels(dtype=torch.float32):
    wx = torch.tensor(SCHARR_X, dtype=dtype)
    return wx, wx.t().contiguous()


class ChannelBatchNorm(nn.Module):
    """BatchNorm with its running statistics kept as buffers."""

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        stats = RunningStats(self.running_mean, self.running_var)
        return batch_norm(x, self.weight, self.bias, stats, "train" if self.training else "eval",
                          self.momentum, self.eps)


class SEE(nn.Module):
    """Scharr edge enhancement with fixed (non-learnable) stencils."""

    def __init__(self, channels: int):
        super().__init__()
        wx, wy = scharr_kernels()
        # constants, rebuilt from SCHARR_X on construction; not serialized
        self.register_buffer("kernel_x", wx, persistent=False)
        self.register_buffer("kernel_y", wy, persistent=False)
        self.bn = ChannelBatchNorm(channels)
        self.squeeze = nn.Conv2d(channels, max(1, channels // 2), 1)
        self.restore = nn.Conv2d(max(1, channels // 2), channels, 3, padding=1)

    def forward(self, x):
        return see(x, self)


def scharr_magnitude(x, kernel_x, kernel_y):
    """|E_x| + |E_y| per channel.  Borders are replicate-padded so that a
    constant map has zero response everywhere."""
    c = x.shape[1]
    xp = F.pad(x, (1, 1, 1, 1), mode="replicate")
    kx = kernel_x.to(x.dtype).expand(c, 1, 3, 3)
    ky = kernel_y.to(x.dtype).expand(c, 1, 3, 3)
    ex = F.conv2d(xp, kx, groups=c)
    ey = F.conv2d(xp, ky, groups=c)
    return ex.abs() + ey.abs()


def see(x, p: SEE):
    fused = x + p.bn(scharr_magnitude(x, p.kernel_x, p.kernel_y))
    return p.restore(silu(p.squeeze(fused)))


class BiSAB(nn.Module):
    def __init__(self, channels: int, n_heads: int = 4):
        super().__init__()
        self.q_conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.k_conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.v_conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.ca = CrossAttention(channels, n_heads)
        self.ln = ChannelLayerNorm(channels)
        self.sae = SAE(channels)
        self.see = SEE(channels)
        self.lambda_fda = FDA_LAMBDA

    def forward(self, low, high):
        return bi_sab(low, high, self)


def bi_sab(low, high, p: BiSAB):
    """``low``: skip (encoder) features; ``high``: upsampled decoder features."""
    _same_shape(low, high)
    f_q = p.q_conv(low)
    f_k = p.k_conv(high)
    f_v = p.v_conv(high)
    f_attn = cross_attention(f_q, f_k, p.ca)
    da_out = fda(f_attn, f_q, f_k, f_v, p.lambda_fda)
    return sae(p.ln(da_out), p.sae) + see(low, p.see)
