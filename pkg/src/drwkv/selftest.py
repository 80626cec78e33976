"""Built-in oracle and invariant suites behind ``drwkv selftest``.

Each suite returns ``(ok, detail)``.  Inputs are seeded, so the report is
identical from run to run.
"""
from __future__ import annotations

import traceback
from typing import Callable

import numpy as np
import torch

from . import bisab
from .losses import (LossWeights, TERMS, l_artifact, l_recon, l_reg, l_smooth, l_sparse,
                     ms2_total, psnr, ssim)
from .model import haar_dwt2, haar_idwt2
from .retinex import GERParams, LightPreprocess, estimate_components, ger_recompose, gray_world
from .scan import TopologyThresholds, all_spiral_paths, raster_path, spiral_path, topology_violation_rate
from .tensor_core import finite_diff_check, module_grad_check
from .wkv import ESRWKVBlock, bi_wkv_naive, bi_wkv_scan

Suite = Callable[[], "tuple[bool, str]"]


def suite_wkv(n: int = 200) -> tuple[bool, str]:
    gen = torch.Generator().manual_seed(1)
    worst = 0.0
    for _ in range(n):
        T = int(torch.randint(1, 65, (1,), generator=gen))
        C = int(torch.randint(1, 9, (1,), generator=gen))
        k = torch.randn(T, C, generator=gen, dtype=torch.float64) * 2
        v = torch.randn(T, C, generator=gen, dtype=torch.float64)
        w_raw = torch.randn(C, generator=gen, dtype=torch.float64) * 2
        u = torch.randn(C, generator=gen, dtype=torch.float64)
        ref = bi_wkv_naive(k, v, (w_raw, u))
        got = bi_wkv_scan(k, v, (w_raw, u))
        rel = ((got - ref).abs() / ref.abs().clamp(min=1e-12)).max().item()
        worst = max(worst, rel)
    return worst < 1e-5, f"{n} instances, max rel err {worst:.1e}"


def _valid_path(p) -> bool:
    n = p.height * p.width
    if sorted(p.order.tolist()) != list(range(n)):
        return False
    rc = p.coords()
    step = np.abs(np.diff(rc, axis=0)).sum(axis=1)
    return bool(np.all(step == 1))


def suite_scan(limit: int = 32) -> tuple[bool, str]:
    bad = []
    for h in range(1, limit + 1):
        for w in range(1, limit + 1):
            for p in all_spiral_paths(h, w):
                if not _valid_path(p):
                    bad.append(f"{h}x{w} {p.corner}-{p.rotation}")
    expected = [(0, 0), (0, 1), (0, 2), (1, 2), (2, 2), (2, 1), (2, 0), (1, 0), (1, 1)]
    got = [tuple(map(int, rc)) for rc in spiral_path(3, 3, "TL", "CW").coords()]
    if got != expected:
        bad.append("3x3 TL-CW differs from ring walk")
    return not bad, "all paths valid" if not bad else f"{len(bad)} failure(s), first: {bad[0]}"


def suite_topology() -> tuple[bool, str]:
    t = TopologyThresholds(1.5, 3)
    bad = []
    for n in range(4, 17):
        r = topology_violation_rate(raster_path(n, n), t)
        s = max(topology_violation_rate(p, t) for p in all_spiral_paths(n, n))
        if s > r:
            bad.append(f"{n}x{n}: spiral {s:.4f} > raster {r:.4f}")
    return not bad, "spiral <= raster for 4..16" if not bad else bad[0]


def _block_errors() -> dict[str, float]:
    torch.manual_seed(3)
    errs = {}
    blk = ESRWKVBlock(8).double()
    x = torch.rand(1, 8, 4, 4, dtype=torch.float64)
    errs["es_rwkv"] = max(module_grad_check(blk, lambda: blk(x).square().mean(), step=1e-6, max_coords=3).values())

    sab = bisab.BiSAB(8, 2).double()
    lo = torch.rand(2, 8, 4, 4, dtype=torch.float64)
    hi = torch.rand(2, 8, 4, 4, dtype=torch.float64)
    errs["bi_sab"] = max(module_grad_check(sab, lambda: sab(lo, hi).square().mean(), step=1e-6, max_coords=3).values())

    pre = LightPreprocess(8).double()
    img = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    errs["preprocess"] = max(module_grad_check(
        pre, lambda: sum(t.square().mean() for t in estimate_components(img, pre)),
        step=1e-6, max_coords=3).values())

    ger = GERParams(0.3).double()
    xs = [torch.rand(1, 3, 4, 4, dtype=torch.float64) * 0.5 + 0.2 for _ in range(4)]
    illum = torch.rand(1, 1, 4, 4, dtype=torch.float64) + 0.5
    errs["ger"] = max(module_grad_check(
        ger, lambda: ger_recompose(xs[0], xs[1] * 0.1, xs[2] * 0.1, illum, xs[3] * 0.1, ger).mean(),
        step=1e-6).values())
    return errs


def _loss_errors() -> dict[str, float]:
    gen = torch.Generator().manual_seed(4)
    r = lambda *s: torch.rand(*s, generator=gen, dtype=torch.float64)
    a, b, e = r(1, 3, 6, 6), r(1, 3, 6, 6), r(1, 3, 6, 6) - 0.5
    # Some artifact gradients are exactly zero (sign terms cancel), where FD
    # roundoff dominates.  Values 1/108 apart and a 2e-3 step keep every
    # probe off the |.| kinks with roundoff near 1e-13.
    s = ((torch.randperm(108, generator=gen).double() - 53.5) / 108).reshape(1, 3, 6, 6)
    illum, img = r(1, 1, 6, 6), r(1, 3, 6, 6)
    al, be, ga = r(()), r(()), r(())
    return {
        "recon": finite_diff_check(lambda: l_recon(a, b), [b], step=1e-6),
        "sparse": finite_diff_check(lambda: l_sparse(e), [e], step=1e-6),
        "smooth": finite_diff_check(lambda: l_smooth(illum, img), [illum], step=1e-6),
        "artifact": finite_diff_check(lambda: l_artifact(s), [s], step=2e-3),
        "reg": finite_diff_check(lambda: l_reg(al, be, ga), [al, be, ga], step=1e-6),
    }


def suite_gradients() -> tuple[bool, str]:
    blocks = _block_errors()
    losses = _loss_errors()
    ok = max(blocks.values()) < 1e-3 and max(losses.values()) < 1e-5
    worst_b = max(blocks, key=blocks.get)
    worst_l = max(losses, key=losses.get)
    return ok, (f"blocks max {blocks[worst_b]:.1e} ({worst_b}), "
                f"losses max {losses[worst_l]:.1e} ({worst_l})")


def suite_haar() -> tuple[bool, str]:
    gen = torch.Generator().manual_seed(5)
    rec = par = 0.0
    for n in (2, 4, 8, 16, 32, 64):
        x = torch.randn(2, 3, n, n, generator=gen, dtype=torch.float64)
        y = haar_dwt2(x)
        rec = max(rec, (haar_idwt2(y) - x).abs().max().item())
        par = max(par, abs(y.square().sum().item() - x.square().sum().item()) / x.square().sum().item())
    return rec < 1e-6 and par < 1e-5, f"reconstruction {rec:.1e}, Parseval {par:.1e}"


def suite_retinex() -> tuple[bool, str]:
    gen = torch.Generator().manual_seed(6)
    x = torch.rand(2, 3, 16, 16, generator=gen)
    z = torch.zeros_like(x)
    rt = (ger_recompose(x, z, z, torch.ones(2, 1, 16, 16), z, GERParams(0.0)) - x).abs().max().item()
    tint = torch.tensor([0.2, 0.5, 0.9])[:, None, None]
    g = gray_world(torch.rand(3, 16, 16, generator=gen) * tint)
    means = g.double().mean(dim=(-2, -1))
    spread = (means.max() - means.min()).item()
    return rt < 1e-6 and spread < 1e-6, f"round trip {rt:.1e}, gray-world spread {spread:.1e}"


def suite_closed_form() -> tuple[bool, str]:
    reg = float(l_reg(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(3.0)))
    total = float(ms2_total({k: torch.tensor(1.0, dtype=torch.float64) for k in TERMS}, LossWeights()).total)
    a = torch.zeros(3, 16, 16, dtype=torch.float64)
    db = psnr(a, a + 0.1)
    x = torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(7))
    s = ssim(x, x)
    ok = reg == 14.0 and abs(total - 1.1601) < 1e-12 and f"{db:.2f}" == "20.00" and abs(s - 1) < 1e-9
    return ok, f"reg {reg:g}, total {total:.4f}, psnr {db:.2f} dB, ssim {s:.9f}"


def suite_scharr() -> tuple[bool, str]:
    # Scharr = central difference across, [3, 10, 3] smoothing along
    oracle_x = torch.outer(torch.tensor([3.0, 10.0, 3.0]), torch.tensor([-1.0, 0.0, 1.0]))
    wx, wy = bisab.scharr_kernels()
    problems = []
    if not torch.equal(wx, oracle_x) or not torch.equal(wy, oracle_x.t()):
        problems.append("stencil differs from [3,10,3] x [-1,0,1]")
    const = torch.full((1, 2, 6, 6), 0.7)
    if bisab.scharr_magnitude(const, wx, wy).abs().max().item() > 1e-5:
        problems.append("constant map has nonzero response")
    ramp = torch.arange(6.0).expand(1, 1, 6, 6).contiguous()
    inner = bisab.scharr_magnitude(ramp, wx, wy)[..., 1:-1, 1:-1]
    if not torch.allclose(inner, torch.full_like(inner, 32.0)):
        problems.append("unit ramp does not give 32 in the interior")
    see_mod = bisab.SEE(4)
    if not torch.equal(see_mod.kernel_x, oracle_x):
        problems.append("SEE module holds a different stencil")
    return not problems, "stencils match" if not problems else "; ".join(problems)


SUITES: dict[str, Suite] = {
    "wkv": suite_wkv,
    "scan": suite_scan,
    "topology": suite_topology,
    "gradients": suite_gradients,
    "haar": suite_haar,
    "retinex": suite_retinex,
    "closed-form": suite_closed_form,
    "scharr": suite_scharr,
}


def run_selftest(names=None) -> tuple[bool, list[str]]:
    """Run the named suites (all by default); returns (all_ok, report lines)."""
    lines = []
    all_ok = True
    state = torch.random.get_rng_state()
    try:
        for name in names or SUITES:
            try:
                ok, detail = SUITES[name]()
            except Exception as exc:  # a crash is a failed suite, not a crashed runner
                ok, detail = False, f"{type(exc).__name__}: {exc}"
                traceback.print_exc()
            all_ok &= ok
            lines.append(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    finally:
        torch.random.set_rng_state(state)
    return all_ok, lines
