"""``drwkv`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .image_io import ImageFormatError, read_image, synthetic_dataset, write_image, write_pgm
from .losses import LossWeights, psnr, ssim
from .model import (DRWKV, ModelConfig, WeightsFormatError, count_params_flops, format_cost,
                    load_model, save_weights)
from .scan import all_spiral_paths
from .selftest import run_selftest
from .tensor_core import NumericError, ShapeError
from .train import LR_MAX, LR_MIN, TrainOptions, train_toy

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_SUFFIXES = (".ppm", ".png")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    input: Path | None = None
    output: Path | None = None
    weights: Path | None = None
    reference: Path | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 42
    steps: int = 300
    batch: int = 2
    lr_max: float = LR_MAX
    lr_min: float = LR_MIN
    synthetic: int | None = None
    size: tuple[int, int] = (32, 32)
    csv: bool = False


def parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return h, w


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="drwkv", description="Low-light enhancement with spiral-scanned WKV attention.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--seed", type=int, default=42)
        sp.add_argument("--config", type=Path, help="JSON model config")
        return sp

    sp = common(sub.add_parser("enhance", help="enhance one image"))
    sp.add_argument("--input", type=Path, required=True)
    sp.add_argument("--output", type=Path, required=True)
    sp.add_argument("--weights", type=Path)
    sp.add_argument("--reference", type=Path, help="ground truth; prints PSNR/SSIM")

    sp = common(sub.add_parser("decompose", help="dump R, L, N, S, E components"))
    sp.add_argument("--input", type=Path, required=True)
    sp.add_argument("--output", type=Path, required=True, help="output directory")
    sp.add_argument("--weights", type=Path)

    sp = common(sub.add_parser("scan", help="write the 8 spiral paths as CSV and PGM"))
    sp.add_argument("--size", type=parse_size, required=True)
    sp.add_argument("--output", type=Path, required=True, help="output directory")

    sp = common(sub.add_parser("metrics", help="PSNR/SSIM between images"))
    sp.add_argument("--input", type=Path, required=True, help="image or directory")
    sp.add_argument("--reference", type=Path, required=True, help="image or directory")
    sp.add_argument("--csv", action="store_true")

    sp = common(sub.add_parser("train-toy", help="short training run"))
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", type=Path, help="directory with low/ and high/ image pairs")
    src.add_argument("--synthetic", type=int, metavar="N", help="use N synthetic pairs")
    sp.add_argument("--output", type=Path, required=True, help="weights file to write")
    sp.add_argument("--steps", type=int, default=300)
    sp.add_argument("--batch", type=int, default=2)
    sp.add_argument("--size", type=parse_size, default=(32, 32), help="crop size (square)")
    sp.add_argument("--weights", type=Path, help="start from these weights")

    common(sub.add_parser("selftest", help="run the built-in oracle suites"))

    sp = common(sub.add_parser("flops", help="parameter and FLOP report"))
    sp.add_argument("--size", type=parse_size, default=(128, 128))
    return p


def to_run_config(ns: argparse.Namespace) -> RunConfig:
    cfg = ModelConfig(seed=ns.seed)
    if getattr(ns, "config", None) is not None:
        if not ns.config.is_file():
            raise UsageError(f"config file not found: {ns.config}")
        try:
            d = json.loads(ns.config.read_text())
            d.setdefault("seed", ns.seed)
            cfg = ModelConfig.from_dict(d)
        except (ValueError, TypeError) as exc:
            raise UsageError(f"bad config {ns.config}: {exc}") from exc
    rc = RunConfig(command=ns.command, model=cfg, seed=ns.seed)
    for name in ("input", "output", "weights", "reference", "steps", "batch", "synthetic", "size", "csv"):
        if getattr(ns, name, None) is not None:
            setattr(rc, name, getattr(ns, name))
    if rc.steps < 0:
        raise UsageError("--steps must be >= 0")
    if rc.batch < 1:
        raise UsageError("--batch must be >= 1")
    if rc.synthetic is not None and rc.synthetic < 1:
        raise UsageError("--synthetic needs at least 1 pair")
    for name in ("input", "weights", "reference"):
        path = getattr(rc, name)
        if path is not None and not path.exists():
            raise UsageError(f"--{name} not found: {path}")
    return rc


def _model(rc: RunConfig) -> DRWKV:
    model = load_model(rc.weights) if rc.weights else DRWKV(rc.model)
    return model.eval()


def _images_in(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _fit(img: torch.Tensor, factor: int) -> torch.Tensor:
    h, w = img.shape[-2:]
    h2, w2 = h - h % factor, w - w % factor
    if h2 == 0 or w2 == 0:
        raise DataError(f"image {h}x{w} is smaller than the network's {factor}x{factor} granularity")
    return img[..., :h2, :w2]


def cmd_enhance(rc: RunConfig, out=sys.stdout) -> int:
    model = _model(rc)
    img = read_image(rc.input)
    img = _fit(img, model.cfg.size_factor)
    with torch.no_grad():
        enhanced = model(img).enhanced
    rc.output.parent.mkdir(parents=True, exist_ok=True)
    write_image(enhanced, rc.output)
    if rc.reference is not None:
        ref = _fit(read_image(rc.reference), model.cfg.size_factor)
        if ref.shape != enhanced.shape:
            raise DataError(f"reference {tuple(ref.shape)} does not match output {tuple(enhanced.shape)}")
        print(f"{rc.output} psnr={psnr(enhanced, ref):.2f} ssim={ssim(enhanced, ref):.4f}", file=out)
    return EXIT_OK


def cmd_decompose(rc: RunConfig, out=sys.stdout) -> int:
    model = _model(rc)
    img = _fit(read_image(rc.input), model.cfg.size_factor)
    with torch.no_grad():
        c = model(img).components
    rc.output.mkdir(parents=True, exist_ok=True)
    views = {
        "R": c.R,
        "L": c.L.expand(3, -1, -1),
        "N": c.N * 0.5 + 0.5,       # tanh range to [0, 1]
        "S": c.S,
        "E": c.E * 0.5 + 0.5,
    }
    for name, t in views.items():
        path = rc.output / f"{name}.ppm"
        write_image(t, path)
        print(path, file=out)
    return EXIT_OK


def cmd_scan(rc: RunConfig, out=sys.stdout) -> int:
    h, w = rc.size
    rc.output.mkdir(parents=True, exist_ok=True)
    T = h * w
    for p in all_spiral_paths(h, w):
        stem = rc.output / f"spiral_{p.corner}_{p.rotation}"
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t", "row", "col"])
        for t, (r, c) in enumerate(p.coords()):
            wr.writerow([t, int(r), int(c)])
        stem.with_suffix(".csv").write_text(buf.getvalue())
        visit = p.inverse.reshape(h, w).astype(np.float64)
        scale = 255.0 / (T - 1) if T > 1 else 0.0
        write_pgm(np.floor(visit * scale + 0.5), stem.with_suffix(".pgm"))
        print(stem.with_suffix(".csv"), file=out)
    return EXIT_OK


def _metric_pairs(a: Path, b: Path) -> list[tuple[Path, Path]]:
    if a.is_dir() != b.is_dir():
        raise UsageError("--input and --reference must both be files or both be directories")
    if not a.is_dir():
        return [(a, b)]
    refs = {p.name: p for p in _images_in(b)}
    pairs = [(p, refs[p.name]) for p in _images_in(a) if p.name in refs]
    if not pairs:
        raise DataError(f"no images with matching names in {a} and {b}")
    return pairs


def cmd_metrics(rc: RunConfig, out=sys.stdout) -> int:
    rows = []
    for pa, pb in _metric_pairs(rc.input, rc.reference):
        x, y = read_image(pa), read_image(pb)
        if x.shape != y.shape:
            raise DataError(f"{pa} {tuple(x.shape)} and {pb} {tuple(y.shape)} differ in shape")
        try:
            rows.append((str(pa), psnr(x, y), ssim(x, y)))
        except ShapeError as exc:
            raise DataError(f"{pa}: {exc}") from exc
    if rc.csv:
        wr = csv.writer(out, lineterminator="\n")
        wr.writerow(["path", "psnr", "ssim"])
        for path, p, s in rows:
            wr.writerow([path, f"{p:.2f}", f"{s:.4f}"])
    else:
        for path, p, s in rows:
            print(f"{path} {p:.2f} {s:.4f}", file=out)
    return EXIT_OK


def _load_pairs(rc: RunConfig):
    if rc.synthetic is not None:
        h, w = rc.size
        return synthetic_dataset(rc.synthetic, h, w, seed=rc.seed)
    low_dir, high_dir = rc.input / "low", rc.input / "high"
    if not low_dir.is_dir() or not high_dir.is_dir():
        raise DataError(f"{rc.input} must contain low/ and high/ directories")
    highs = {p.name: p for p in _images_in(high_dir)}
    pairs = []
    for p in _images_in(low_dir):
        if p.name in highs:
            low, high = read_image(p), read_image(highs[p.name])
            if low.shape != high.shape:
                raise DataError(f"pair {p.name} differs in shape")
            pairs.append((low, high))
    if not pairs:
        raise DataError(f"no training pairs found in {rc.input}")
    return pairs


def cmd_train_toy(rc: RunConfig, out=sys.stdout) -> int:
    pairs = _load_pairs(rc)
    crop = min(rc.size)
    opts = TrainOptions(steps=rc.steps, batch=rc.batch, crop=crop, lr_max=rc.lr_max,
                        lr_min=rc.lr_min, seed=rc.seed, weights=LossWeights())
    model = load_model(rc.weights) if rc.weights else None
    try:
        result = train_toy(pairs, opts, rc.model, model, log=lambda step, lr, parts: print(
            f"step {step} lr {lr:.3e} " + " ".join(f"{k} {v:.6f}" for k, v in parts.as_floats().items()),
            file=out))
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    rc.output.parent.mkdir(parents=True, exist_ok=True)
    save_weights(result.model, rc.output)
    print("initial " + " ".join(f"{k} {v:.6f}" for k, v in result.initial.items()), file=out)
    print("final " + " ".join(f"{k} {v:.6f}" for k, v in result.final.items()), file=out)
    return EXIT_OK


def cmd_selftest(rc: RunConfig, out=sys.stdout) -> int:
    ok, lines = run_selftest()
    for line in lines:
        print(line, file=out)
    print("selftest " + ("passed" if ok else "FAILED"), file=out)
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_flops(rc: RunConfig, out=sys.stdout) -> int:
    h, w = rc.size
    if h % rc.model.size_factor or w % rc.model.size_factor:
        raise UsageError(f"--size must be divisible by {rc.model.size_factor}")
    print(format_cost(count_params_flops(rc.model, h, w)), file=out)
    return EXIT_OK


COMMANDS = {
    "enhance": cmd_enhance,
    "decompose": cmd_decompose,
    "scan": cmd_scan,
    "metrics": cmd_metrics,
    "train-toy": cmd_train_toy,
    "selftest": cmd_selftest,
    "flops": cmd_flops,
}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        ns = build_parser().parse_args(argv)
        rc = to_run_config(ns)
        torch.manual_seed(rc.seed)
        return COMMANDS[rc.command](rc, out)
    except UsageError as exc:
        print(f"drwkv: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"drwkv: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ImageFormatError, WeightsFormatError, ShapeError, OSError) as exc:
        print(f"drwkv: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
