"""Kernel compilation switch.

Hot loops are written once as plain Python over numpy arrays and scalars.
With numba available they are compiled with ``njit``; setting
``SRPTSIM_NUMBA=0`` in the environment (read at import time) runs the same
source through the interpreter instead, which is the reference path used by
the benchmark and by the equivalence tests.
"""
import os

_flag = os.environ.get("SRPTSIM_NUMBA", "1").strip().lower()
USE_NUMBA = _flag not in ("0", "false", "off", "no")

if USE_NUMBA:
    try:
        import numba
    except ImportError:  # pragma: no cover
        USE_NUMBA = False


def kernel(fn):
    """Compile ``fn`` with numba when enabled, else return it untouched."""
    if USE_NUMBA:
        return numba.njit(cache=True)(fn)
    return fn
