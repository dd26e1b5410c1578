"""
Backend selection for the convolution kernels.

``METAKERNEL_BACKEND=numpy`` forces the pure-numpy path; anything else (or
unset) uses numba when it imports cleanly.
"""
import os

BACKEND_ENV = "METAKERNEL_BACKEND"

try:
    import numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None
    HAS_NUMBA = False


def requested_backend():
    value = os.environ.get(BACKEND_ENV, "numba").strip().lower()
    if value not in ("numba", "numpy"):
        raise ValueError(f"{BACKEND_ENV} must be 'numba' or 'numpy', got {value!r}")
    if value == "numba" and not HAS_NUMBA:
        return "numpy"
    return value


def njit(func):
    """``numba.njit`` with caching, or the plain function without numba."""
    if not HAS_NUMBA:
        return func
    return numba.njit(cache=True, fastmath=False, boundscheck=False)(func)
