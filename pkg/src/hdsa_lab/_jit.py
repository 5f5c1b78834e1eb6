"""Numba switch.

Set ``HDSA_DISABLE_NUMBA=1`` to run the pure-numpy kernels. The flag is read
once at import time; the benchmark and parity tests import both paths
explicitly instead of flipping it.
"""
import os
import warnings

_DISABLED = os.environ.get("HDSA_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional extra
    _njit = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLED

if _DISABLED is False and not HAVE_NUMBA:  # pragma: no cover
    warnings.warn("numba not importable; falling back to numpy kernels", RuntimeWarning)


def njit(func):
    """``numba.njit(cache=True)`` when numba is available, identity otherwise."""
    if _njit is None:
        return func
    return _njit(cache=True)(func)
