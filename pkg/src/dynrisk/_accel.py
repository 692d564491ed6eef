"""Optional numba acceleration.

Hot kernels are written in the subset of Python that numba compiles. When
numba is importable and ``DYNRISK_DISABLE_NUMBA`` is unset (or ``0``), they
are compiled with ``@njit``; otherwise the same functions run as plain
Python/NumPy. Compiled dispatchers keep the original function on
``.py_func`` so both paths stay reachable from tests and benchmarks.
"""
import os

_flag = os.environ.get("DYNRISK_DISABLE_NUMBA", "0").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and _flag in ("", "0", "false", "no")


def njit(func):
    if USE_NUMBA:
        return numba.njit(cache=True, nogil=True)(func)
    return func


def python_impl(func):
    """Return the uncompiled implementation behind a (possibly) jitted kernel."""
    return getattr(func, "py_func", func)
