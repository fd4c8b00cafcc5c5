"""Optional numba acceleration for the hot kernels.

Every kernel in the package is written once, in the subset of Python that
numba understands, and decorated with :func:`njit`.  When numba is missing,
or the environment variable ``LACAR_NO_NUMBA`` is set to a truthy value
before import, the decorator is a no-op and the kernels run as ordinary
Python on numpy arrays.  Both paths share the same source, so results agree
to floating-point round-off.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_DISABLED = os.environ.get("LACAR_NO_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

USE_NUMBA = numba is not None and not _DISABLED


def njit(func):
    """Compile ``func`` with numba when enabled, else return it unchanged.

    The undecorated function is always reachable as ``func.py_func`` so the
    two paths can be compared inside one process.
    """
    if USE_NUMBA:
        return numba.njit(cache=True, nogil=True)(func)
    func.py_func = func
    return func


def backend_name():
    return "numba" if USE_NUMBA else "python"
