"""Greedy minimax schedule of odd quintics for the polar iteration.

Each step picks ``p(x) = a x + b x^3 + c x^5`` minimizing ``max |1 - p(x)|``
on the current singular-value interval ``[lo, hi]`` (a linear program on a
dense grid), then maps the interval through ``p``.  The printed table is the
one hard-coded as ``EXACT_COEFFS`` in ``moelab.muon``.

    python scripts/polar_coefficients.py --lower 0.004 --steps 6
"""

import argparse

import numpy as np
from scipy.optimize import linprog


def minimax_step(lo: float, hi: float, n: int = 6000) -> tuple[tuple[float, float, float], float, float]:
    x = np.unique(np.concatenate([np.geomspace(lo, hi, n), np.linspace(lo, hi, n)]))
    P = np.stack([x, x**3, x**5], axis=1)
    ones = np.ones((len(x), 1))
    # p - E <= 1 and -p - E <= -1
    A = np.block([[P, -ones], [-P, -ones]])
    b = np.concatenate([np.ones(len(x)), -np.ones(len(x))])
    res = linprog([0, 0, 0, 1], A_ub=A, b_ub=b, bounds=[(None, None)] * 3 + [(0, None)], method="highs")
    a, bb, c, _ = res.x
    grid = np.linspace(lo, hi, 400_001)
    p = a * grid + bb * grid**3 + c * grid**5
    return (float(a), float(bb), float(c)), float(p.min()), float(p.max())


def schedule(lower: float, steps: int) -> list[tuple[float, float, float]]:
    lo, hi = lower, 1.0
    out = []
    for _ in range(steps):
        coeffs, lo, hi = minimax_step(lo, hi)
        out.append(coeffs)
    return out


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--lower", type=float, default=0.004)
    ap.add_argument("--steps", type=int, default=6)
    args = ap.parse_args()
    for a, b, c in schedule(args.lower, args.steps):
        print(f"    ({a!r}, {b!r}, {c!r}),")
