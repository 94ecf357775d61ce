"""Hot kernels: compiled extension when available, numpy fallback otherwise.

Set ``POLSTEREO_PURE_PYTHON=1`` to force the fallback and
``POLSTEREO_NUM_THREADS`` to bound the compiled kernels' thread count.
Both backends produce identical results.
"""

from __future__ import annotations

import importlib
import os

from . import _fallback

BACKEND = "python"
_core = None
if os.environ.get("POLSTEREO_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        _core = importlib.import_module(f"{__name__}._core")

        BACKEND = "cython"
    except ImportError:  # extension not built
        _core = None


def num_threads() -> int:
    try:
        return max(1, int(os.environ.get("POLSTEREO_NUM_THREADS", "1")))
    except ValueError:
        return 1


def sgm_aggregate(cost, P1: int, P2: int, backend: str | None = None):
    if _use_core(backend):
        return _core.sgm_aggregate(cost, int(P1), int(P2))
    return _fallback.sgm_aggregate(cost, int(P1), int(P2))


def ternary_messages(tables, q0, q1, q2, backend: str | None = None):
    if _use_core(backend):
        return _core.ternary_messages(tables, q0, q1, q2, num_threads())
    return _fallback.ternary_messages(tables, q0, q1, q2)


def _use_core(backend: str | None) -> bool:
    if backend is None:
        return _core is not None
    if backend == "cython":
        if _core is None:
            raise RuntimeError("compiled kernels are not available")
        return True
    if backend == "python":
        return False
    raise ValueError(f"unknown backend {backend!r}")
