"""Image files and synthetic low-light pairs.

Binary PPM (P6, maxval 255) always works.  PNG goes through Pillow when it
is installed (``pip install artifact[png]``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch


class ImageFormatError(ValueError):
    pass


class PPMHeaderError(ImageFormatError):
    pass


class PPMMaxvalError(ImageFormatError):
    pass


class PPMTruncatedError(ImageFormatError):
    pass


def _png_available() -> bool:
    try:
        import PIL  # noqa: F401
    except ImportError:
        return False
    return True


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PPMHeaderError("unexpected end of header")
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> torch.Tensor:
    magic, pos = _read_token(buf, 0)
    if magic != b"P6":
        raise PPMHeaderError(f"expected P6 magic, got {magic[:8]!r}")
    fields_ = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise PPMHeaderError(f"non-numeric header field {tok[:16]!r}")
        fields_.append(int(tok))
    width, height, maxval = fields_
    if width < 1 or height < 1:
        raise PPMHeaderError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise PPMMaxvalError(f"only maxval 255 is supported, got {maxval}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PPMHeaderError("missing whitespace after maxval")
    pos += 1
    need = width * height * 3
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise PPMTruncatedError(f"payload has {len(payload)} of {need} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return torch.from_numpy(arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def to_uint8(t: torch.Tensor) -> np.ndarray:
    """(3, H, W) in [0, 1] -> (H, W, 3) bytes, rounding half up."""
    if t.dim() != 3 or t.shape[0] not in (1, 3):
        raise ValueError(f"expected a (3, H, W) or (1, H, W) image, got {tuple(t.shape)}")
    if t.shape[0] == 1:
        t = t.expand(3, -1, -1)
    arr = t.detach().double().clamp(0, 1).cpu().numpy()
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def encode_ppm(t: torch.Tensor) -> bytes:
    arr = to_uint8(t)
    h, w = arr.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def read_image(path) -> torch.Tensor:
    path = Path(path)
    if path.suffix.lower() == ".png":
        if not _png_available():
            raise ImageFormatError("PNG support needs Pillow (pip install artifact[png])")
        from PIL import Image
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        return torch.from_numpy(arr.transpose(2, 0, 1).copy())
    return decode_ppm(path.read_bytes())


def write_image(t: torch.Tensor, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        if not _png_available():
            raise ImageFormatError("PNG support needs Pillow (pip install artifact[png])")
        from PIL import Image
        Image.fromarray(to_uint8(t)).save(path)
        return
    path.write_bytes(encode_ppm(t))


def write_pgm(arr: np.ndarray, path) -> None:
    """8-bit grayscale P5."""
    arr = np.asarray(arr, dtype=np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


@dataclass(frozen=True)
class SyntheticPairSpec:
    gamma: float = 2.0
    scale: float = 0.5
    sigma: float = 0.02
    seed: int = 42

    def __post_init__(self):
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if not 0 < self.scale <= 1:
            raise ValueError("scale must be in (0, 1]")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


def synth_pair(clean: torch.Tensor, spec: SyntheticPairSpec = SyntheticPairSpec()):
    """Darken, gamma-compress and add Gaussian noise: returns (low, clean)."""
    gen = torch.Generator().manual_seed(spec.seed)
    noise = torch.randn(clean.shape, generator=gen, dtype=clean.dtype) * spec.sigma
    low = torch.clamp(spec.scale * clean.pow(spec.gamma) + noise, 0.0, 1.0)
    return low, clean


def synthetic_scene(height: int, width: int, seed: int) -> torch.Tensor:
    """A smooth colour gradient with a few flat-coloured rectangles and discs."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= max(height - 1, 1)
    xx /= max(width - 1, 1)
    img = np.empty((3, height, width))
    for c in range(3):
        a, b, base = rng.uniform(-0.4, 0.4, 3)
        img[c] = 0.5 + base * 0.5 + a * (xx - 0.5) + b * (yy - 0.5)
    for _ in range(int(rng.integers(2, 5))):
        colour = rng.uniform(0.05, 0.95, 3)
        if rng.random() < 0.5:
            y0, x0 = rng.uniform(0, 0.7, 2)
            hh, ww = rng.uniform(0.15, 0.5, 2)
            mask = (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
        else:
            cy, cx = rng.uniform(0.2, 0.8, 2)
            r = rng.uniform(0.1, 0.3)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[:, mask] = colour[:, None]
    return torch.from_numpy(np.clip(img, 0, 1).astype(np.float32))


def synthetic_dataset(n: int, height: int = 32, width: int = 32, seed: int = 42,
                      spec: SyntheticPairSpec | None = None):
    """``n`` deterministic (low, clean) pairs."""
    base = spec or SyntheticPairSpec(seed=seed)
    pairs = []
    for i in range(n):
        clean = synthetic_scene(height, width, seed * 1000 + i)
        s = SyntheticPairSpec(base.gamma, base.scale, base.sigma, seed * 1000 + i)
        pairs.append(synth_pair(clean, s))
    return pairs


def psnr_label(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.2f}"
