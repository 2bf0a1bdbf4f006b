"""Numba switch.

Kernels are compiled with numba when it is importable and the environment
variable ``DUALGUIDE_NUMBA`` is not set to ``0``. Otherwise ``njit`` is a
no-op decorator and callers fall back to the pure-numpy kernels.
"""

import os

try:
    import numba

    NUMBA_INSTALLED = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    NUMBA_INSTALLED = False

USE_NUMBA = NUMBA_INSTALLED and os.environ.get("DUALGUIDE_NUMBA", "1") != "0"


def njit(*args, **kwargs):
    """``numba.njit`` when numba is installed, identity otherwise."""
    if NUMBA_INSTALLED:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f
