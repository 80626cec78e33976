"""Independent reference implementations used only by the tests.

These are deliberately slow and literal (Python loops over scalars) so
they share no code path with the package.
"""
from __future__ import annotations

import math

import numpy as np


def conv2d_loops(x, k, b, pad):
    """Six nested loops of cross-correlation with zero padding."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for r in range(ho):
                for c in range(wo):
                    acc = b[o] if b is not None else 0.0
                    for ci in range(cin):
                        for dr in range(kh):
                            for dc in range(kw):
                                rr, cc = r + dr - pad, c + dc - pad
                                if 0 <= rr < h and 0 <= cc < w:
                                    acc += x[i, ci, rr, cc] * k[o, ci, dr, dc]
                    out[i, o, r, c] = acc
    return out


def ring_walk(h, w, clockwise=True):
    """Peel rings from the top-left corner, one side at a time."""
    grid = [[(r, c) for c in range(w)] for r in range(h)]
    out = []
    while grid and grid[0]:
        if clockwise:
            out.extend(grid.pop(0))                       # top row, left to right
            for row in grid:                              # right column, downwards
                if row:
                    out.append(row.pop())
            if grid:
                out.extend(reversed(grid.pop()))          # bottom row, right to left
            for row in reversed(grid):                    # left column, upwards
                if row:
                    out.append(row.pop(0))
        else:
            for row in grid:                              # left column, downwards
                out.append(row.pop(0))
            if grid and grid[-1]:
                out.extend(grid.pop())                    # bottom row, left to right
            for row in reversed(grid):                    # right column, upwards
                if row:
                    out.append(row.pop())
            if grid and grid[0]:
                out.extend(reversed(grid.pop(0)))         # top row, right to left
        grid = [row for row in grid if row]
    return out


def bi_wkv_loops(k, v, w, u):
    """Bi-WKV per channel straight from its definition (float64 numpy)."""
    T, C = k.shape
    out = np.zeros((T, C))
    for c in range(C):
        for t in range(T):
            num = den = 0.0
            for i in range(T):
                if i == t:
                    e = math.exp(u[c] + k[t, c])
                else:
                    e = math.exp(-((abs(t - i) - 1) / T) * w[c] + k[i, c])
                num += e * v[i, c]
                den += e
            out[t, c] = num / den
    return out


def violation_rate_loops(order, width, delta, tau):
    pos = {cell: t for t, cell in enumerate(order)}
    cells = list(pos)
    near = bad = 0
    for a in range(len(cells)):
        for b in range(a + 1, len(cells)):
            (r1, c1), (r2, c2) = divmod(cells[a], width), divmod(cells[b], width)
            if math.hypot(r1 - r2, c1 - c2) < delta:
                near += 1
                if abs(pos[cells[a]] - pos[cells[b]]) >= tau:
                    bad += 1
    return bad / near if near else 0.0


def ssim_loops(x, y, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Single-channel SSIM with a Gaussian window, valid positions only."""
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    win = np.outer(g, g)
    win /= win.sum()
    c1, c2 = k1 ** 2, k2 ** 2
    h, w = x.shape
    vals = []
    for r in range(h - size + 1):
        for c in range(w - size + 1):
            px, py = x[r:r + size, c:c + size], y[r:r + size, c:c + size]
            mx, my = (win * px).sum(), (win * py).sum()
            vx = (win * px * px).sum() - mx * mx
            vy = (win * py * py).sum() - my * my
            cxy = (win * px * py).sum() - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))
