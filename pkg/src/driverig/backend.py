"""Backend selection for the numeric hot kernels.

Heavy inner loops (rasterization, fused model gradients) ship in two
flavors: a numba-jitted kernel and a vectorized pure-numpy equivalent.
The jitted path is the default whenever numba imports; setting the
environment variable ``DRIVERIG_NO_NUMBA=1`` before import forces the
numpy path. ``scripts/bench_backends.py`` times both.
"""

import os

NO_NUMBA_ENV = "DRIVERIG_NO_NUMBA"

try:
    from numba import njit as _njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only on hosts without numba
    _njit = None
    NUMBA_AVAILABLE = False


def numba_disabled_by_env() -> bool:
    return os.environ.get(NO_NUMBA_ENV, "").strip() not in ("", "0")


NUMBA_ENABLED = NUMBA_AVAILABLE and not numba_disabled_by_env()


def jit_kernel(func):
    """Compile ``func`` with nopython+nogil, or return None without numba.

    nogil matters: trainer workers are threads and only run in parallel
    while a kernel has released the interpreter lock.
    """
    if not NUMBA_AVAILABLE:
        return None
    return _njit(cache=True, nogil=True)(func)


def active_backend() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"
