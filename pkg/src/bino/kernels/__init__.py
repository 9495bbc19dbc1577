"""SGM aggregation backends.

The compiled Cython kernel is preferred when importable; the pure-numpy
implementation is the fallback.  Both compute identical float32 results.
Set BINO_SGM_BACKEND=python|cython to force a backend.
"""

from __future__ import annotations

import os

from . import sgm_py

try:
    from . import _sgm_cy  # type: ignore[attr-defined]
except ImportError:
    _sgm_cy = None

_forced = os.environ.get("BINO_SGM_BACKEND", "").lower()
if _forced == "python":
    BACKEND = "python"
elif _forced == "cython":
    if _sgm_cy is None:
        raise ImportError("BINO_SGM_BACKEND=cython but the compiled kernel is unavailable")
    BACKEND = "cython"
else:
    BACKEND = "cython" if _sgm_cy is not None else "python"

sgm_aggregate = _sgm_cy.aggregate if BACKEND == "cython" else sgm_py.aggregate
