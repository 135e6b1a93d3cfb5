"""Numba switch for the hot kernels.

Set ``DENSEMAP_DISABLE_NUMBA=1`` to force the vectorized numpy fallbacks.
When numba is missing the fallbacks are used automatically.
"""

import os

_DISABLED = os.environ.get("DENSEMAP_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def decorator(func):
            return func
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return decorator


def use_numba() -> bool:
    return NUMBA_AVAILABLE
