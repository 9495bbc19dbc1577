"""Pure-numpy four-direction SGM cost aggregation (fallback backend).

Recursion per direction, matching the classical formulation:

    L(x, d) = C(x, d) + min(L_prev(d),
                            L_prev(d-1) + P1, L_prev(d+1) + P1,
                            min_d' L_prev(d') + P2) - min_d' L_prev(d')

Invalid cost entries are +inf and propagate naturally.  All arithmetic is
float32 in the same operation order as the compiled kernel, so the two
backends agree bit-for-bit.
"""

from __future__ import annotations

import numpy as np


def _scan(cost: np.ndarray, p1: np.float32, p2: np.float32) -> np.ndarray:
    """Aggregate along axis 1 (left to right); cost is [rows, steps, disp]."""
    rows, steps, nd = cost.shape
    out = np.empty_like(cost)
    prev = cost[:, 0, :].copy()
    out[:, 0, :] = prev
    for s in range(1, steps):
        best = prev.min(axis=1, keepdims=True)  # [rows, 1]
        cand = prev.copy()
        np.minimum(cand[:, 1:], prev[:, :-1] + p1, out=cand[:, 1:])
        np.minimum(cand[:, :-1], prev[:, 1:] + p1, out=cand[:, :-1])
        np.minimum(cand, best + p2, out=cand)
        prev = (cost[:, s, :] + cand) - best
        out[:, s, :] = prev
    return out


def aggregate(cost: np.ndarray, p1: float, p2: float) -> np.ndarray:
    """Sum of the four directional aggregations {left, right, up, down}."""
    cost = np.ascontiguousarray(cost, dtype=np.float32)
    p1 = np.float32(p1)
    p2 = np.float32(p2)
    h, w, nd = cost.shape
    agg = np.zeros_like(cost)
    # horizontal passes: rows scan over columns
    agg += _scan(cost, p1, p2)
    agg += _scan(cost[:, ::-1, :], p1, p2)[:, ::-1, :]
    # vertical passes: columns scan over rows
    ct = np.ascontiguousarray(cost.transpose(1, 0, 2))
    agg += _scan(ct, p1, p2).transpose(1, 0, 2)
    agg += _scan(ct[:, ::-1, :], p1, p2)[:, ::-1, :].transpose(1, 0, 2)
    return agg
