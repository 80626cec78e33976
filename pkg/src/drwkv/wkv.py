"""Bidirectional WKV attention along spiral orders and the ES-RWKV block."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .scan import ScanPath, all_spiral_paths, qshift
from .tensor_core import ShapeError, check_finite, layer_norm, squared_relu

# keeps exp(+d*(i - start)) inside float32 range within one chunk
_CHUNK_EXPONENT = 30.0


class WKVParams(nn.Module):
    """Per-channel decay (softplus of ``w_raw``) and same-token bonus ``u``."""

    def __init__(self, channels: int):
        super().__init__()
        self.w_raw = nn.Parameter(torch.zeros(channels))
        self.u = nn.Parameter(torch.zeros(channels))

    @property
    def w(self) -> torch.Tensor:
        return F.softplus(self.w_raw)


def _decay_and_bonus(p, dtype):
    if isinstance(p, WKVParams):
        return p.w.to(dtype), p.u.to(dtype)
    w_raw, u = p
    return F.softplus(w_raw).to(dtype), u.to(dtype)


def bi_wkv_naive(k: torch.Tensor, v: torch.Tensor, p) -> torch.Tensor:
    """O(T^2 C) reference.  ``k``, ``v`` are (..., T, C)."""
    if k.shape != v.shape:
        raise ShapeError(f"K {tuple(k.shape)} and V {tuple(v.shape)} differ")
    T = k.shape[-2]
    if T < 1:
        raise ShapeError("sequence must have at least one token")
    w, u = _decay_and_bonus(p, k.dtype)
    t = torch.arange(T, device=k.device)
    dist = (t[:, None] - t[None, :]).abs().to(k.dtype)          # (T, T)
    # exponent[t, i, c]
    expo = -((dist - 1) / T)[..., None] * w + k.unsqueeze(-3)
    eye = torch.eye(T, dtype=torch.bool, device=k.device)[..., None]
    expo = torch.where(eye, (u + k).unsqueeze(-3).expand_as(expo), expo)
    m = expo.amax(dim=(-3, -2), keepdim=True)
    weights = torch.exp(expo - m)
    num = (weights * v.unsqueeze(-3)).sum(-2)
    den = weights.sum(-2)
    return check_finite(num / den, "bi_wkv_naive")


def _decayed_prefix(x: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    """Strictly causal decayed sums along dim -2.

    out[t] = sum_{i<t} exp(-(t-1-i) * d) * x[i], with ``d`` per last-dim
    channel.  The decay is factorised as exp(-(t-1)d) * exp(i d) inside
    chunks short enough that exp(i d) stays below exp(_CHUNK_EXPONENT);
    for ordinary decays a single chunk covers the sequence.
    """
    T = x.shape[-2]
    dmax = float(d.detach().max().clamp(min=0))
    chunk = T if dmax * T <= _CHUNK_EXPONENT else max(1, int(_CHUNK_EXPONENT / dmax))
    outs = []
    carry = None
    for s in range(0, T, chunk):
        e = min(T, s + chunk)
        n = e - s
        j = torch.arange(n, dtype=x.dtype, device=x.device)[:, None]
        part = x[..., s:e, :]
        cs = torch.cumsum(part * torch.exp(j * d), dim=-2)
        cs = F.pad(cs[..., :-1, :], (0, 0, 1, 0))             # exclusive
        out = cs * torch.exp(-(j - 1) * d)
        if carry is not None:
            out = out + carry * torch.exp(-j * d)
        outs.append(out)
        if e < T:
            tail = (part * torch.exp(-(n - 1 - j) * d)).sum(-2, keepdim=True)
            carry = tail if carry is None else carry * torch.exp(-n * d) + tail
    return outs[0] if len(outs) == 1 else torch.cat(outs, dim=-2)


def bi_wkv_scan(k: torch.Tensor, v: torch.Tensor, p) -> torch.Tensor:
    """O(T C) evaluation of the same quantity as :func:`bi_wkv_naive`:
    a forward and a backward decayed prefix sum plus the same-token bonus."""
    if k.shape != v.shape:
        raise ShapeError(f"K {tuple(k.shape)} and V {tuple(v.shape)} differ")
    T, c = k.shape[-2:]
    if T < 1:
        raise ShapeError("sequence must have at least one token")
    w, u = _decay_and_bonus(p, k.dtype)
    d = (w / T).repeat(2)
    m = k.amax(dim=-2, keepdim=True).detach()
    ek = torch.exp(k - m)
    nd = torch.cat([ek * v, ek], dim=-1)
    acc = _decayed_prefix(nd, d) + _decayed_prefix(nd.flip(-2), d).flip(-2)
    self_w = torch.exp(u + k - m)
    num = acc[..., :c] + self_w * v
    den = acc[..., c:] + self_w
    return check_finite(num / den, "bi_wkv_scan")


def _path_index(paths: Sequence[ScanPath], h: int, w: int):
    """Flat gather indices for every path walked forwards then backwards.

    Returns (take, regrid, spread) over the (2P*T) axis: ``take`` reads
    raster tokens into path order, ``regrid`` maps path-ordered results
    back to raster order per path, ``spread`` is the inverse of ``regrid``.
    """
    for pth in paths:
        if (pth.height, pth.width) != (h, w):
            raise ShapeError(f"scan path is {pth.height}x{pth.width} but feature map is {h}x{w}")
    key = tuple((pth.corner, pth.rotation, h, w) for pth in paths)
    hit = _INDEX_CACHE.get(key)
    if hit is None:
        order = np.stack([pth.order for pth in paths])
        both = np.concatenate([order, order[:, ::-1]])
        n_seq, T = both.shape
        rows = np.arange(n_seq)[:, None]
        inv = np.empty_like(both)
        inv[rows, both] = np.arange(T)[None, :]
        take = both.reshape(-1)
        regrid = (inv + rows * T).reshape(-1)
        spread = (both + rows * T).reshape(-1)
        hit = (n_seq, *(torch.from_numpy(np.ascontiguousarray(a)) for a in (take, regrid, spread)))
        _INDEX_CACHE[key] = hit
    return hit


_INDEX_CACHE: dict = {}


class _Permute(torch.autograd.Function):
    """Row permutation along dim 1; the backward is the inverse permutation."""

    @staticmethod
    def forward(ctx, x, index, inverse):
        ctx.save_for_backward(inverse)
        return x.index_select(1, index)

    @staticmethod
    def backward(ctx, grad):
        (inverse,) = ctx.saved_tensors
        return grad.index_select(1, inverse), None, None


class _Replicate(torch.autograd.Function):
    """Read raster tokens (N, T, C) into ``copies`` path orders (N, copies*T, C)."""

    @staticmethod
    def forward(ctx, x, take, regrid, copies):
        ctx.save_for_backward(regrid)
        ctx.copies = copies
        return x.index_select(1, take)

    @staticmethod
    def backward(ctx, grad):
        (regrid,) = ctx.saved_tensors
        n, total, c = grad.shape
        g = grad.index_select(1, regrid).view(n, ctx.copies, total // ctx.copies, c).sum(1)
        return g, None, None, None


def ev_wkv(kmap: torch.Tensor, vmap: torch.Tensor, p, paths: Sequence[ScanPath] | None = None) -> torch.Tensor:
    """Bi-WKV along every scan path, re-gridded and averaged over paths.

    Equivalent to running :func:`bi_wkv_scan` on each flattened path and
    unflattening by the path inverse.  Forward and backward halves of every
    path are evaluated together as 2P causal prefix sums.
    """
    if kmap.shape != vmap.shape:
        raise ShapeError(f"K {tuple(kmap.shape)} and V {tuple(vmap.shape)} differ")
    n, c, h, w = kmap.shape
    if paths is None:
        paths = all_spiral_paths(h, w)
    n_seq, take, regrid, spread = _path_index(paths, h, w)
    P, T = n_seq // 2, h * w
    wdec, u = _decay_and_bonus(p, kmap.dtype)
    d = (wdec / T).repeat(2)

    k = kmap.reshape(n, c, T).transpose(1, 2)                  # (N, T, C) raster
    v = vmap.reshape(n, c, T).transpose(1, 2)
    m = k.amax(dim=1, keepdim=True).detach()
    ek = torch.exp(k - m)
    nd = torch.cat([ek * v, ek], dim=-1)                       # numerator | denominator
    seq = _Replicate.apply(nd, take, regrid, n_seq).view(n, n_seq, T, 2 * c)
    acc = _decayed_prefix(seq, d)
    acc = _Permute.apply(acc.reshape(n, n_seq * T, 2 * c), regrid, spread).view(n, n_seq, T, 2 * c)
    acc = acc[:, :P] + acc[:, P:]                              # forward + backward halves
    self_w = torch.exp(u + k - m).unsqueeze(1)
    num = acc[..., :c] + self_w * v.unsqueeze(1)
    den = acc[..., c:] + self_w
    out = check_finite(num / den, "ev_wkv").mean(dim=1)
    return out.transpose(1, 2).reshape(n, c, h, w)


class ChannelLayerNorm(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)


def _proj(channels: int) -> nn.Conv2d:
    conv = nn.Conv2d(channels, channels, 1, bias=False)
    nn.init.orthogonal_(conv.weight)
    with torch.no_grad():
        conv.weight.mul_(0.1)
    return conv


class SpatialMix(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        if channels % 4:
            raise ValueError(f"channels must be divisible by 4, got {channels}")
        self.mu_r = nn.Parameter(torch.rand(channels))
        self.mu_k = nn.Parameter(torch.rand(channels))
        self.mu_v = nn.Parameter(torch.rand(channels))
        self.receptance = _proj(channels)
        self.key = _proj(channels)
        self.value = _proj(channels)
        self.output = _proj(channels)
        self.wkv = WKVParams(channels)
        self.ln = ChannelLayerNorm(channels)

    def forward(self, x, paths=None):
        r = self.receptance(qshift(x, self.mu_r))
        k = self.key(qshift(x, self.mu_k))
        v = self.value(qshift(x, self.mu_v))
        y = torch.sigmoid(r) * ev_wkv(k, v, self.wkv, paths)
        return x + self.ln(self.output(y))


class ChannelMix(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        if channels % 4:
            raise ValueError(f"channels must be divisible by 4, got {channels}")
        self.mu_r = nn.Parameter(torch.rand(channels))
        self.mu_k = nn.Parameter(torch.rand(channels))
        self.receptance = _proj(channels)
        self.key = _proj(channels)
        self.value = _proj(channels)
        self.output = _proj(channels)
        self.ln = ChannelLayerNorm(channels)

    def forward(self, x):
        r = self.receptance(qshift(x, self.mu_r))
        v = self.value(squared_relu(self.key(qshift(x, self.mu_k))))
        return x + self.ln(self.output(torch.sigmoid(r) * v))


class ESRWKVBlock(nn.Module):
    """Evolving Spatial Mix followed by Channel Mix."""

    def __init__(self, channels: int):
        super().__init__()
        self.spatial = SpatialMix(channels)
        self.channel = ChannelMix(channels)

    def forward(self, x, paths=None):
        return self.channel(self.spatial(x, paths))


def spatial_mix(x, p: SpatialMix, paths=None):
    return p(x, paths)


def channel_mix(x, p: ChannelMix):
    return p(x)


def es_rwkv_block(x, spatial: SpatialMix, channel: ChannelMix, paths=None):
    return channel(spatial(x, paths))
