"""Optional numba acceleration.

Set ``FLOODLORA_DISABLE_NUMBA=1`` to force the pure-numpy kernels even when
numba is importable.
"""
from __future__ import annotations

import os

_DISABLED = os.environ.get("FLOODLORA_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError("numba disabled by FLOODLORA_DISABLE_NUMBA")
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def decorate(func):
            return func

        return decorate

    prange = range


def backend_name() -> str:
    return "numba" if HAS_NUMBA else "numpy"
