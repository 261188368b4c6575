"""Slow brute-force reference implementations used by the test suite.

Nothing here imports from the rest of the package: each routine re-derives
its result with explicit Python loops so it can serve as an independent
check on the vectorised code paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class OracleReport:
    case_id: str
    value: float
    oracle: float
    abs_dev: float
    rel_dev: float


def compare(case_id: str, value: float, oracle: float, eps: float = 1e-300) -> OracleReport:
    a, b = float(value), float(oracle)
    abs_dev = abs(a - b)
    rel_dev = abs_dev / max(abs(a), abs(b), eps)
    return OracleReport(case_id, a, b, abs_dev, rel_dev)


def _shape(t):
    # nested lists indexed [row][col][channel]
    return len(t), len(t[0]), len(t[0][0])


def oracle_loss(variant, recon, x, x_hat, mask, lam):
    """Element-by-element evaluation of the three training objectives.

    ``recon``, ``x`` and ``x_hat`` are nested lists ``[H][W][C]``; ``mask`` is
    ``[H][W]`` with 0/1 entries and applies to every channel.
    """
    variant = variant.lower()
    if variant not in ("v1", "v2", "v3"):
        raise ValueError(f"unknown variant {variant!r}")
    h, w, c = _shape(x)

    n_in = 0.0
    n_out = 0.0
    sq_in = 0.0
    sq_out = 0.0
    weight_sum = 0.0
    sq_weighted = 0.0
    for i in range(h):
        for j in range(w):
            m = mask[i][j]
            for k in range(c):
                diff = recon[i][j][k] - x[i][j][k]
                if m:
                    n_in += 1.0
                    sq_in += diff * diff
                else:
                    n_out += 1.0
                    sq_out += diff * diff
                if variant == "v3":
                    wgt = abs(x_hat[i][j][k] - x[i][j][k])
                    weight_sum += wgt
                    sq_weighted += (wgt * diff) * (wgt * diff)

    if n_in == 0 or n_out == 0:
        raise ValueError("mask must contain both modified and unmodified elements")

    first = lam / n_out * math.sqrt(sq_out)
    if variant == "v1":
        return first + (1.0 - lam) / n_in * math.sqrt(sq_in)
    if variant == "v2":
        return first - (1.0 - lam) / n_in * math.sqrt(sq_in)
    if weight_sum <= 0:
        raise ValueError("distorted image equals the original")
    return first - (1.0 - lam) / weight_sum * math.sqrt(sq_weighted)


def oracle_auroc(scores, labels):
    """Pairwise-rank AUROC: P(pos > neg) with ties counted one half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    if not pos or not neg:
        raise ValueError("need at least one positive and one negative")
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def oracle_components(mask, connectivity=8):
    """Stack-based flood fill. Returns a list of sets of (row, col)."""
    h = len(mask)
    w = len(mask[0]) if h else 0
    if connectivity == 8:
        steps = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)]
    else:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    seen = [[False] * w for _ in range(h)]
    comps = []
    for i in range(h):
        for j in range(w):
            if not mask[i][j] or seen[i][j]:
                continue
            comp = set()
            stack = [(i, j)]
            seen[i][j] = True
            while stack:
                a, b = stack.pop()
                comp.add((a, b))
                for di, dj in steps:
                    u, v = a + di, b + dj
                    if 0 <= u < h and 0 <= v < w and mask[u][v] and not seen[u][v]:
                        seen[u][v] = True
                        stack.append((u, v))
            comps.append(comp)
    return comps


def finite_difference_grad(f, x, step=1e-4):
    """Central differences of scalar ``f`` over a flat list of floats."""
    grad = []
    for idx in range(len(x)):
        up = list(x)
        dn = list(x)
        up[idx] += step
        dn[idx] -= step
        grad.append((f(up) - f(dn)) / (2.0 * step))
    return grad
