"""Backend switch for the hot kernels.

Kernels are compiled with numba when it is importable, unless the
environment variable ``CONSISTMMT_KERNELS`` is set to ``numpy``, in which
case the pure-numpy fallbacks are used. The flag is read once at import.
"""

import os

BACKEND_ENV = "CONSISTMMT_KERNELS"

try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    NUMBA_AVAILABLE = False


def requested_backend():
    value = os.environ.get(BACKEND_ENV, "numba").strip().lower()
    if value not in ("numba", "numpy"):
        raise ValueError(f"{BACKEND_ENV} must be 'numba' or 'numpy', got {value!r}")
    return value


USE_NUMBA = NUMBA_AVAILABLE and requested_backend() == "numba"


def njit(func):
    """``numba.njit(cache=True)`` when numba is present, else the plain function."""
    if not NUMBA_AVAILABLE:
        return func
    return numba.njit(cache=True)(func)
