"""Acceptance criteria 1-10.  Each test prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` or as a script.
"""
import io
import math
import time

import pytest
import torch

from drwkv import selftest
from drwkv.cli import main
from drwkv.image_io import synthetic_dataset
from drwkv.losses import LossWeights, TERMS, l_reg, ms2_total, psnr, ssim
from drwkv.model import DRWKV, Down, ModelConfig, Up, count_params_flops, format_cost, haar_dwt2, haar_idwt2
from drwkv.retinex import GERParams, ger_recompose, gray_world
from drwkv.scan import TopologyThresholds, all_spiral_paths, raster_path, spiral_path, topology_violation_rate
from drwkv.tensor_core import module_grad_check
from drwkv.train import TrainOptions, train_toy
from drwkv.wkv import bi_wkv_naive, bi_wkv_scan
from oracles import ring_walk

LINES = []


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    LINES.append(line)
    print("\n" + line)
    assert ok, line


@pytest.fixture(autouse=True)
def one_thread():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(prev)


def test_criterion_1_wkv_oracle():
    gen = torch.Generator().manual_seed(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        T = int(torch.randint(1, 65, (1,), generator=gen))
        C = int(torch.randint(1, 9, (1,), generator=gen))
        k = torch.randn(T, C, generator=gen, dtype=torch.float64) * 2
        v = torch.randn(T, C, generator=gen, dtype=torch.float64)
        p = (torch.randn(C, generator=gen, dtype=torch.float64) * 2, torch.randn(C, generator=gen, dtype=torch.float64))
        ref = bi_wkv_naive(k, v, p)
        rel = ((bi_wkv_scan(k, v, p) - ref).abs() / ref.abs().clamp(min=1e-12)).max().item()
        worst = max(worst, rel)
    dt = time.perf_counter() - t0
    report(1, worst < 1e-5 and dt < 10, f"200 instances, max rel err {worst:.2e} (< 1e-5), {dt:.2f} s (< 10 s)")


def test_criterion_2_scan_paths():
    bad = 0
    for h in range(1, 33):
        for w in range(1, 33):
            for p in all_spiral_paths(h, w):
                rc = p.coords()
                bijective = sorted(p.order.tolist()) == list(range(h * w))
                adjacent = bool((abs(rc[1:] - rc[:-1]).sum(axis=1) == 1).all())
                bad += not (bijective and adjacent)
    got = [tuple(map(int, rc)) for rc in spiral_path(3, 3, "TL", "CW").coords()]
    exact = got == ring_walk(3, 3, True)
    report(2, bad == 0 and exact, f"{32 * 32 * 8} paths, {bad} invalid; 3x3 TL-CW equals ring-walk oracle: {exact}")


def test_criterion_3_topology():
    t = TopologyThresholds(1.5, 3)
    worst_margin = math.inf
    for n in range(4, 17):
        raster = topology_violation_rate(raster_path(n, n), t)
        spiral = max(topology_violation_rate(p, t) for p in all_spiral_paths(n, n))
        worst_margin = min(worst_margin, raster - spiral)
    report(3, worst_margin >= 0, f"grids 4..16, min(raster - spiral) = {worst_margin:.4f} (>= 0)")


def test_criterion_4_gradients():
    t0 = time.perf_counter()
    blocks = selftest._block_errors()
    torch.manual_seed(8)
    down, up = Down(4).double(), Up(4).double()
    x = torch.rand(1, 4, 4, 4, dtype=torch.float64)
    y = torch.rand(1, 8, 2, 2, dtype=torch.float64)
    blocks["down"] = max(module_grad_check(down, lambda: down(x).square().mean(), step=1e-6).values())
    blocks["up"] = max(module_grad_check(up, lambda: up(y).square().mean(), step=1e-6).values())
    losses = selftest._loss_errors()
    dt = time.perf_counter() - t0
    wb, wl = max(blocks, key=blocks.get), max(losses, key=losses.get)
    ok = blocks[wb] < 1e-3 and losses[wl] < 1e-5 and dt < 120
    report(4, ok, f"blocks max {blocks[wb]:.1e} ({wb}, < 1e-3), losses max {losses[wl]:.1e} ({wl}, < 1e-5), "
                  f"{dt:.1f} s (< 120 s)")


def test_criterion_5_haar():
    gen = torch.Generator().manual_seed(5)
    rec = par = 0.0
    for h, w in [(2, 2), (4, 8), (16, 16), (32, 12), (64, 64)]:
        x = torch.randn(2, 3, h, w, generator=gen)
        y = haar_dwt2(x)
        rec = max(rec, (haar_idwt2(y) - x).abs().max().item())
        xd, yd = x.double(), haar_dwt2(x.double())
        par = max(par, abs(yd.square().sum().item() - xd.square().sum().item()))
    report(5, rec < 1e-6 and par < 1e-5, f"reconstruction {rec:.1e} (< 1e-6), Parseval {par:.1e} (< 1e-5)")


def test_criterion_6_retinex():
    gen = torch.Generator().manual_seed(6)
    x = torch.rand(2, 3, 16, 16, generator=gen) * 1.4 - 0.2
    z = torch.zeros_like(x)
    out = ger_recompose(x, z, z, torch.ones(2, 1, 16, 16), z, GERParams(0.0))
    rt = (out - x.clamp(0, 1)).abs().max().item()
    tint = torch.tensor([0.2, 0.5, 0.9])[:, None, None]
    means = gray_world(torch.rand(3, 16, 16, generator=gen) * tint).double().mean(dim=(-2, -1))
    spread = (means.max() - means.min()).item()
    # float32 rounding of (x/(1+eps))*(1+eps) bounds the round trip at one ulp
    report(6, rt < 1e-6 and spread < 1e-6,
           f"round trip max err {rt:.1e} (< 1e-6, float32), gray-world mean spread {spread:.1e} (< 1e-6)")


def test_criterion_7_closed_form():
    reg = float(l_reg(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(3.0)))
    total = float(ms2_total({k: torch.tensor(1.0, dtype=torch.float64) for k in TERMS}, LossWeights()).total)
    a = torch.zeros(3, 16, 16, dtype=torch.float64)
    db = psnr(a, a + 0.1)
    x = torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(7))
    s = ssim(x, x)
    ok = reg == 14 and abs(total - 1.1601) < 1e-12 and abs(db - 20.0) < 1e-9 and abs(s - 1) < 1e-9
    report(7, ok, f"L_reg(1,2,3) = {reg:g}, total = {total:.4f}, PSNR = {db:.2f} dB, SSIM(x,x) = {s:.10f}")


def test_criterion_8_toy_training():
    pairs = synthetic_dataset(8, 32, 32, seed=42)
    opts = TrainOptions(steps=300, batch=2, crop=32, seed=42)
    t0 = time.perf_counter()
    first = train_toy(pairs, opts)
    dt = time.perf_counter() - t0
    second = train_toy(pairs, opts)
    curve_a = [h["total"] for h in first.history]
    curve_b = [h["total"] for h in second.history]
    ratio = first.final["total"] / first.initial["total"]
    ok = ratio < 0.5 and dt < 300 and curve_a == curve_b
    report(8, ok, f"total {first.initial['total']:.4f} -> {first.final['total']:.4f} (ratio {ratio:.3f} < 0.5), "
                  f"{dt:.0f} s (< 300 s), curve bitwise reproducible: {curve_a == curve_b}")


def test_criterion_9_forward_sanity():
    bad = []
    for trial in range(100):
        model = DRWKV(ModelConfig(seed=trial)).eval()
        x = torch.rand(3, 128, 128, generator=torch.Generator().manual_seed(10_000 + trial))
        with torch.no_grad():
            y = model(x).enhanced
        if y.shape != (3, 128, 128) or not torch.isfinite(y).all() or y.min() < 0 or y.max() > 1:
            bad.append(trial)
        if trial == 0:
            with torch.no_grad():
                again = DRWKV(ModelConfig(seed=0)).eval()(x).enhanced
            deterministic = torch.equal(y, again)
    cost = count_params_flops()
    print("\n" + format_cost(cost))
    print("reference cost 8.28 M / 1.67 GFLOPs is reported, not asserted")
    report(9, not bad and deterministic,
           f"100 trials 3x128x128 -> 3x128x128 in [0,1], NaN-free failures {bad}; deterministic: {deterministic}; "
           f"cost {cost['params_m']:.3f} M params, {cost['gflops']:.3f} GFLOPs")


def test_criterion_10_selftest_exit_code():
    out = io.StringIO()
    code = main(["selftest"], out)
    text = out.getvalue()
    names = [ln.split(":")[0].split()[1] for ln in text.splitlines() if ln.startswith(("PASS", "FAIL"))]
    report(10, code == 0 and names == list(selftest.SUITES),
           f"exit code {code}; suites {', '.join(names)}")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v", "-s"]))
