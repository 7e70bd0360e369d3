"""Numerical backend selection for the hot kernels.

The inner loops of the tree booster and the k-nearest-neighbour learner are
compiled with numba when it is available.  Setting the environment variable
``SHIFTRISK_BACKEND=numpy`` before import forces the pure-NumPy
implementations (useful for debugging and as a fallback on platforms without
numba); ``SHIFTRISK_BACKEND=numba`` makes a missing numba an error instead of
a silent fallback.  Both code paths produce identical results.
"""

import os

_ENV_VAR = "SHIFTRISK_BACKEND"
_choice = os.environ.get(_ENV_VAR, "auto").strip().lower()
if _choice not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"{_ENV_VAR} must be one of 'auto', 'numba', 'numpy'; got {_choice!r}"
    )

USE_NUMBA = False
if _choice in ("auto", "numba"):
    try:
        from numba import njit as _njit

        USE_NUMBA = True
    except ImportError:
        if _choice == "numba":
            raise


def jit(func):
    """Compile `func` with numba on the numba backend, otherwise return it unchanged."""
    if USE_NUMBA:
        return _njit(cache=True, nogil=True)(func)
    return func


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
