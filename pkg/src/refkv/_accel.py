"""Numba shim.

Hot kernels are always compiled with numba when it is importable so the two
paths can be compared side by side; ``USE_NUMBA`` only decides which path the
public dispatchers in :mod:`refkv.kernels` bind to.

Set ``REFKV_NUMBA=0`` to force the pure-numpy path.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
_flag = os.environ.get("REFKV_NUMBA", "1").strip().lower()
USE_NUMBA = HAVE_NUMBA and _flag not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    if numba is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    return numba.njit(*args, **kwargs)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
