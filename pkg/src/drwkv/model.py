"""DRWKV network assembly, Haar sampling, cost accounting and weight files."""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .bisab import BiSAB, CrossAttention
from .retinex import (GER_EPS, GERComponents, GERParams, LightPreprocess, estimate_components,
                      ger_recompose, gray_world, reflectance_restore)
from .scan import all_spiral_paths
from .tensor_core import ShapeError, check_finite
from .wkv import ESRWKVBlock, SpatialMix


@dataclass
class ModelConfig:
    base_channels: int = 16
    n1: int = 4
    n2: int = 8
    levels: int = 2
    n_heads: int = 4
    eps: float = GER_EPS
    seed: int = 42

    def __post_init__(self):
        c = self.base_channels
        if c % 4:
            raise ValueError(f"base_channels must be divisible by 4 for Q-Shift, got {c}")
        if c % self.n_heads:
            raise ValueError(f"base_channels {c} not divisible by n_heads {self.n_heads}")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.n1 % self.levels:
            raise ValueError(f"n1={self.n1} must split evenly over {self.levels} levels")

    @property
    def blocks_per_level(self) -> int:
        return self.n1 // self.levels

    @property
    def size_factor(self) -> int:
        return 2 ** self.levels

    def channel_schedule(self) -> list[int]:
        enc = [self.base_channels * 2 ** i for i in range(self.levels + 1)]
        return enc + enc[-2::-1]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")


def haar_dwt2(x: torch.Tensor) -> torch.Tensor:
    """Orthonormal 2-D Haar; subbands stacked on channels as LL, LH, HL, HH."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"haar_dwt2 needs even extents, got {h}x{w}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = (a + b + c + d) / 2
    lh = (a - b + c - d) / 2
    hl = (a + b - c - d) / 2
    hh = (a - b - c + d) / 2
    return torch.cat([ll, lh, hl, hh], dim=-3)


def haar_idwt2(x: torch.Tensor) -> torch.Tensor:
    ch = x.shape[-3]
    if ch % 4:
        raise ShapeError(f"haar_idwt2 needs channels divisible by 4, got {ch}")
    ll, lh, hl, hh = x.chunk(4, dim=-3)
    a = (ll + lh + hl + hh) / 2
    b = (ll - lh + hl - hh) / 2
    c = (ll + lh - hl - hh) / 2
    d = (ll - lh - hl + hh) / 2
    h, w = x.shape[-2:]
    out = x.new_empty(x.shape[:-3] + (ch // 4, 2 * h, 2 * w))
    out[..., 0::2, 0::2] = a
    out[..., 0::2, 1::2] = b
    out[..., 1::2, 0::2] = c
    out[..., 1::2, 1::2] = d
    return out


class Down(nn.Module):
    """Haar DWT then 1x1 compression 4C -> 2C."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Conv2d(4 * channels, 2 * channels, 1)

    def forward(self, x):
        return self.proj(haar_dwt2(x))


class Up(nn.Module):
    """1x1 expansion 2C -> 4C then inverse Haar, giving C channels."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Conv2d(2 * channels, 4 * channels, 1)

    def forward(self, x):
        return haar_idwt2(self.proj(x))


@dataclass
class ForwardOutput:
    enhanced: torch.Tensor
    edge: torch.Tensor
    components: GERComponents
    intermediate: dict = field(default_factory=dict)


class DRWKV(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self._build(cfg)

    def _build(self, cfg: ModelConfig):
        c = cfg.base_channels
        per = cfg.blocks_per_level
        widths = [c * 2 ** i for i in range(cfg.levels + 1)]
        self.preprocess = LightPreprocess(c)
        self.stem = nn.Conv2d(3, c, 3, padding=1)
        self.encoder = nn.ModuleList(
            nn.ModuleList(ESRWKVBlock(widths[i]) for _ in range(per)) for i in range(cfg.levels))
        self.down = nn.ModuleList(Down(widths[i]) for i in range(cfg.levels))
        self.bottleneck = nn.ModuleList(ESRWKVBlock(widths[-1]) for _ in range(cfg.n2))
        # decoder stages run from the deepest level back to full resolution
        self.up = nn.ModuleList(Up(widths[i]) for i in reversed(range(cfg.levels)))
        self.fusion = nn.ModuleList(BiSAB(widths[i], cfg.n_heads) for i in reversed(range(cfg.levels)))
        self.decoder = nn.ModuleList(
            nn.ModuleList(ESRWKVBlock(widths[i]) for _ in range(per)) for i in reversed(range(cfg.levels)))
        self.edge_head = nn.Conv2d(c, 3, 3, padding=1)
        self.refine_head = nn.Conv2d(c, 3, 3, padding=1)
        self.ger = GERParams(0.1, cfg.eps)

    def forward(self, img: torch.Tensor, keep_intermediate: bool = False) -> ForwardOutput:
        batched = img.dim() == 4
        x_in = img if batched else img.unsqueeze(0)
        h, w = x_in.shape[-2:]
        f = self.cfg.size_factor
        if x_in.shape[1] != 3:
            raise ShapeError(f"expected 3 input channels, got {x_in.shape[1]}")
        if h % f or w % f:
            raise ShapeError(f"input extents {h}x{w} must be divisible by {f}")
        inter = {}

        s, l_, n = estimate_components(x_in, self.preprocess)
        base = reflectance_restore(x_in, n, l_, self.cfg.eps)

        feat = self.stem(base)
        skips = []
        for lvl, (blocks, down) in enumerate(zip(self.encoder, self.down)):
            paths = all_spiral_paths(*feat.shape[-2:])
            for blk in blocks:
                feat = blk(feat, paths)
            skips.append(feat)
            if keep_intermediate:
                inter[f"enc{lvl}"] = feat
            feat = down(feat)
        paths = all_spiral_paths(*feat.shape[-2:])
        for blk in self.bottleneck:
            feat = blk(feat, paths)
        if keep_intermediate:
            inter["bottleneck"] = feat
        for lvl, (up, fuse, blocks) in enumerate(zip(self.up, self.fusion, self.decoder)):
            feat = fuse(skips.pop(), up(feat))
            paths = all_spiral_paths(*feat.shape[-2:])
            for blk in blocks:
                feat = blk(feat, paths)
            if keep_intermediate:
                inter[f"dec{lvl}"] = feat

        edge = torch.tanh(self.edge_head(feat))
        x = torch.clamp(base + self.refine_head(feat), 0.0, 1.0)
        enhanced, refl = ger_recompose(x, edge, n, l_, s, self.ger, return_reflectance=True)
        check_finite(enhanced, "enhanced image")
        if keep_intermediate:
            inter.update(preprocessed=base, refined=x, gray_world=gray_world(x_in))

        if not batched:
            enhanced, edge, refl, l_, n, s = (t[0] for t in (enhanced, edge, refl, l_, n, s))
            inter = {k: v[0] for k, v in inter.items()}
        comps = GERComponents(R=refl, L=l_, N=n, S=s, E=edge,
                              alpha=self.ger.alpha, beta=self.ger.beta, gamma=self.ger.gamma)
        return ForwardOutput(enhanced, edge, comps, inter)


# ---------------------------------------------------------------- accounting

WKV_OPS_PER_STEP = 12


def conv_cost(cin: int, cout: int, kh: int, kw: int, h: int, w: int,
              groups: int = 1, bias: bool = True) -> tuple[int, int]:
    """(params, FLOPs) of one convolution producing an h x w map.

    One multiply-accumulate counts as 2 FLOPs; bias adds are not counted.
    """
    params = cout * (cin // groups) * kh * kw + (cout if bias else 0)
    flops = 2 * cout * (cin // groups) * kh * kw * h * w
    return params, flops


def count_params_flops(cfg: ModelConfig | None = None, height: int = 128, width: int = 128,
                       model: nn.Module | None = None) -> dict:
    """Parameter count and forward FLOPs for one ``height x width`` image.

    Conventions: convolutions 2*MACs; WKV 12 ops per token, channel and
    direction over all 8 spiral directions; cross-covariance attention
    2*n_h*c_h^2*HW each for Q K^T and attn V.  Normalizations, activations,
    Q-Shift and elementwise products are not counted.
    """
    cfg = cfg or ModelConfig()
    model = model or DRWKV(cfg)
    totals = {"conv": 0, "wkv": 0, "attention": 0}
    hooks = []

    def on_conv(mod, inp, out):
        totals["conv"] += conv_cost(mod.in_channels, mod.out_channels, *mod.kernel_size,
                                    out.shape[-2], out.shape[-1], mod.groups, mod.bias is not None)[1]

    def on_spatial(mod, inp, out):
        n_, ch, h, w = inp[0].shape
        totals["wkv"] += WKV_OPS_PER_STEP * h * w * ch * 8

    def on_attn(mod, inp, out):
        n_, ch, h, w = inp[0].shape
        c_h = ch // mod.n_heads
        totals["attention"] += 2 * 2 * mod.n_heads * c_h * c_h * h * w

    for mod in model.modules():
        if isinstance(mod, nn.Conv2d):
            hooks.append(mod.register_forward_hook(on_conv))
        elif isinstance(mod, SpatialMix):
            hooks.append(mod.register_forward_hook(on_spatial))
        elif isinstance(mod, CrossAttention):
            hooks.append(mod.register_forward_hook(on_attn))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.full((1, 3, height, width), 0.5))
    finally:
        for hk in hooks:
            hk.remove()
        model.train(was_training)
    params = sum(p.numel() for p in model.parameters())
    flops = sum(totals.values())
    return {
        "params": params,
        "flops": flops,
        "breakdown": totals,
        "params_m": round(params / 1e6, 3),
        "gflops": round(flops / 1e9, 3),
        "height": height,
        "width": width,
    }


def format_cost(report: dict) -> str:
    b = report["breakdown"]
    return (f"params: {report['params_m']:.3f} M ({report['params']})\n"
            f"GFLOPs @ {report['height']}x{report['width']}: {report['gflops']:.3f} "
            f"(conv {b['conv'] / 1e9:.3f}, wkv {b['wkv'] / 1e9:.3f}, attention {b['attention'] / 1e9:.3f})\n"
            "conventions: 1 MAC = 2 FLOPs; WKV = 12 ops/token/channel/direction x 8 directions; "
            "norms, activations and elementwise ops not counted")


# ---------------------------------------------------------------- weights IO

MAGIC = b"DRWKV1\0"
FORMAT_VERSION = 1


class WeightsFormatError(ValueError):
    pass


def model_weights(model: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    """Named tensors that make up the weights file (parameters + BN stats)."""
    return OrderedDict((k, v.detach()) for k, v in model.state_dict().items())


def save_weights(weights, path, cfg: ModelConfig | None = None) -> None:
    if isinstance(weights, nn.Module):
        cfg = cfg or getattr(weights, "cfg", None)
        weights = model_weights(weights)
    manifest, blobs, offset = [], [], 0
    for name, t in weights.items():
        # ascontiguousarray would promote 0-d tensors to shape (1,)
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f4").copy(order="C")
        manifest.append({"name": name, "dtype": "f32", "shape": list(t.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {"version": FORMAT_VERSION, "tensors": manifest}
    if cfg is not None:
        header["config"] = asdict(cfg)
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        for b in blobs:
            fh.write(b)


def read_weights_file(path) -> tuple["OrderedDict[str, torch.Tensor]", dict]:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise WeightsFormatError(f"{path}: bad magic, not a DRWKV weights file")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise WeightsFormatError(f"{path}: truncated before manifest length")
    (n,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    if len(raw) < pos + n:
        raise WeightsFormatError(f"{path}: truncated manifest ({len(raw) - pos} of {n} bytes)")
    try:
        header = json.loads(raw[pos:pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightsFormatError(f"{path}: unreadable manifest: {exc}") from exc
    pos += n
    if header.get("version") != FORMAT_VERSION:
        raise WeightsFormatError(f"{path}: unsupported format version {header.get('version')!r}")
    data = raw[pos:]
    out = OrderedDict()
    expected = 0
    for entry in header["tensors"]:
        if entry.get("dtype") != "f32":
            raise WeightsFormatError(f"{path}: tensor {entry['name']} has dtype {entry.get('dtype')!r}, expected f32")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["offset"] != expected:
            raise WeightsFormatError(f"{path}: tensor {entry['name']} offset {entry['offset']} is not contiguous")
        end = expected + 4 * count
        if end > len(data):
            raise WeightsFormatError(f"{path}: truncated payload at tensor {entry['name']}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=expected).reshape(entry["shape"])
        out[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        expected = end
    if expected != len(data):
        raise WeightsFormatError(f"{path}: {len(data) - expected} trailing bytes after payload")
    return out, header


def load_weights(path) -> "OrderedDict[str, torch.Tensor]":
    return read_weights_file(path)[0]


def apply_weights(model: nn.Module, weights) -> nn.Module:
    """Copy ``weights`` into ``model`` after checking names and shapes."""
    own = model.state_dict()
    unknown = [k for k in weights if k not in own]
    if unknown:
        raise WeightsFormatError(f"unknown tensor name(s) in weights: {', '.join(unknown)}")
    missing = [k for k in own if k not in weights]
    if missing:
        raise WeightsFormatError(f"weights missing tensor(s): {', '.join(missing)}")
    for k, v in weights.items():
        if tuple(own[k].shape) != tuple(v.shape):
            raise WeightsFormatError(f"shape mismatch for {k}: file {tuple(v.shape)}, model {tuple(own[k].shape)}")
    model.load_state_dict(weights)
    return model


def load_model(path) -> DRWKV:
    weights, header = read_weights_file(path)
    cfg = ModelConfig.from_dict(header["config"]) if "config" in header else ModelConfig()
    return apply_weights(DRWKV(cfg), weights)
