"""Numba switch.

Set ``METASEL_DISABLE_NUMBA=1`` to force the pure-numpy kernels.
``METASEL_THREADS`` caps the numba thread pool when numba is active.
"""
import os

_FALSY = {"", "0", "false", "no", "off"}


def _env_flag(name):
    return os.environ.get(name, "").strip().lower() not in _FALSY


try:
    import numba as _numba
    from numba import njit as _njit
except ImportError:  # pragma: no cover - numba is optional
    _numba = None
    _njit = None

HAVE_NUMBA = _numba is not None
USE_NUMBA = HAVE_NUMBA and not _env_flag("METASEL_DISABLE_NUMBA")

if USE_NUMBA and os.environ.get("METASEL_THREADS"):
    _numba.set_num_threads(int(os.environ["METASEL_THREADS"]))


def njit(fn):
    """``numba.njit(cache=True)`` when numba is usable, else the function unchanged."""
    if HAVE_NUMBA:
        return _njit(cache=True)(fn)
    return fn


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
