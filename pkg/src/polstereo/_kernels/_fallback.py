"""Pure numpy versions of the compiled kernels.

Both implementations must return identical results: SGM works in integer
arithmetic and the message kernel performs the same float operations in the
same order per factor.
"""

from __future__ import annotations

import numpy as np

SGM_DIRECTIONS = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1))


def _aggregate_step(prev: np.ndarray, cost: np.ndarray, P1: int, P2: int) -> np.ndarray:
    # prev, cost: (n, D) int32
    mprev = prev.min(axis=1, keepdims=True)
    best = prev.copy()
    np.minimum(best[:, 1:], prev[:, :-1] + P1, out=best[:, 1:])
    np.minimum(best[:, :-1], prev[:, 1:] + P1, out=best[:, :-1])
    np.minimum(best, mprev + P2, out=best)
    return cost + best - mprev


def sgm_aggregate(cost: np.ndarray, P1: int, P2: int) -> np.ndarray:
    """Sum of path-wise aggregated costs over 8 directions, ``(H, W, D)`` int32."""
    C = np.ascontiguousarray(cost, dtype=np.int32)
    H, W, D = C.shape
    total = np.zeros((H, W, D), dtype=np.int32)
    for dx, dy in SGM_DIRECTIONS:
        L = np.empty_like(C)
        if dx != 0:
            xs = range(W) if dx > 0 else range(W - 1, -1, -1)
            first = True
            for x in xs:
                if first:
                    L[:, x] = C[:, x]
                    first = False
                    continue
                px = x - dx
                cur = C[:, x].copy()
                if dy == 0:
                    cur = _aggregate_step(L[:, px], C[:, x], P1, P2)
                elif dy > 0:
                    cur[1:] = _aggregate_step(L[:-1, px], C[1:, x], P1, P2)
                else:
                    cur[:-1] = _aggregate_step(L[1:, px], C[:-1, x], P1, P2)
                L[:, x] = cur
        else:
            ys = range(H) if dy > 0 else range(H - 1, -1, -1)
            first = True
            for y in ys:
                if first:
                    L[y] = C[y]
                    first = False
                    continue
                L[y] = _aggregate_step(L[y - dy], C[y], P1, P2)
        total += L
    return total


def ternary_messages(tables: np.ndarray, q0: np.ndarray, q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Min-sum factor-to-variable messages for ternary factors.

    ``tables`` is ``(T, S, S, S)``; ``qk`` are the incoming variable-to-factor
    messages ``(T, S)``.  Returns ``(T, 3, S)`` messages, each shifted so its
    minimum is zero.
    """
    T, S = q0.shape
    out = np.empty((T, 3, S))
    a = tables + q1[:, None, :, None]
    out[:, 0] = (a + q2[:, None, None, :]).min(axis=(2, 3))
    b = tables + q0[:, :, None, None]
    out[:, 1] = (b + q2[:, None, None, :]).min(axis=(1, 3))
    out[:, 2] = (b + q1[:, None, :, None]).min(axis=(1, 2))
    out -= out.min(axis=2, keepdims=True)
    return out
