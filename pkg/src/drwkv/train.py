"""Toy training on small paired data with Adam and a cosine schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from .losses import LossBreakdown, LossWeights, ms2_loss
from .model import DRWKV, ModelConfig
from .tensor_core import GradContext, check_finite

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
LR_MAX = 2e-4
LR_MIN = 1e-6


def cosine_lr(step: int, total: int, lr_max: float = LR_MAX, lr_min: float = LR_MIN) -> float:
    if total <= 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * step / total))


@dataclass
class TrainOptions:
    steps: int = 300
    batch: int = 2
    crop: int = 32
    lr_max: float = LR_MAX
    lr_min: float = LR_MIN
    seed: int = 42
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.crop < 1:
            raise ValueError("crop must be >= 1")


@dataclass
class TrainResult:
    model: DRWKV
    history: list[dict]
    initial: dict
    final: dict


def _crop(img, top, left, size):
    return img[..., top:top + size, left:left + size]


def _batches(pairs, opts: TrainOptions, gen: torch.Generator):
    """Yield ``opts.steps`` minibatches of random crops, sampled without
    replacement within each pass over the data."""
    order: list[int] = []
    for _ in range(opts.steps):
        lows, highs = [], []
        for _ in range(opts.batch):
            if not order:
                order = torch.randperm(len(pairs), generator=gen).tolist()
            low, high = pairs[order.pop()]
            h, w = low.shape[-2:]
            top = int(torch.randint(0, h - opts.crop + 1, (1,), generator=gen))
            left = int(torch.randint(0, w - opts.crop + 1, (1,), generator=gen))
            lows.append(_crop(low, top, left, opts.crop))
            highs.append(_crop(high, top, left, opts.crop))
        yield torch.stack(lows), torch.stack(highs)


def evaluate(model: DRWKV, pairs, weights: LossWeights = LossWeights(), crop: int | None = None) -> dict:
    """Mean loss breakdown over all pairs (eval mode, top-left crops)."""
    was = model.training
    model.eval()
    sums: dict = {}
    try:
        with torch.no_grad():
            for low, high in pairs:
                if crop is not None:
                    low, high = _crop(low, 0, 0, crop), _crop(high, 0, 0, crop)
                out = model(low.unsqueeze(0))
                parts = ms2_loss(out, high.unsqueeze(0), low.unsqueeze(0), weights).as_floats()
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v
    finally:
        model.train(was)
    return {k: v / len(pairs) for k, v in sums.items()}


def train_toy(pairs: Sequence[tuple[torch.Tensor, torch.Tensor]], opts: TrainOptions = TrainOptions(),
              cfg: ModelConfig | None = None, model: DRWKV | None = None,
              log: Callable[[int, float, LossBreakdown], None] | None = None) -> TrainResult:
    """Adam over the MS2 total on random crops; deterministic under ``opts.seed``."""
    if not pairs:
        raise ValueError("training needs at least one (low, target) pair")
    for low, high in pairs:
        if low.shape != high.shape or low.dim() != 3:
            raise ValueError(f"pair shapes differ or are not (3, H, W): {tuple(low.shape)} vs {tuple(high.shape)}")
        if min(low.shape[-2:]) < opts.crop:
            raise ValueError(f"image {tuple(low.shape[-2:])} smaller than crop {opts.crop}")
    cfg = cfg or ModelConfig(seed=opts.seed)
    model = model or DRWKV(cfg)
    model.train()
    initial = evaluate(model, pairs, opts.weights, opts.crop)
    history: list[dict] = []
    if opts.steps == 0:
        return TrainResult(model, history, initial, initial)

    optim = torch.optim.Adam(model.parameters(), lr=opts.lr_max, betas=ADAM_BETAS, eps=ADAM_EPS)
    gen = torch.Generator().manual_seed(opts.seed)
    for step, (low, high) in enumerate(_batches(pairs, opts, gen)):
        lr = cosine_lr(step, opts.steps, opts.lr_max, opts.lr_min)
        for g in optim.param_groups:
            g["lr"] = lr
        out = model(low)
        parts = ms2_loss(out, high, low, opts.weights)
        check_finite(parts.total, f"loss at step {step}")
        ctx = GradContext(model)
        ctx.backward(parts.total)
        optim.zero_grad(set_to_none=True)
        ctx.accumulate_into_params()
        optim.step()
        rec = {"step": step, "lr": lr, **parts.as_floats()}
        history.append(rec)
        if log is not None:
            log(step, lr, parts)
    final = evaluate(model, pairs, opts.weights, opts.crop)
    return TrainResult(model, history, initial, final)
