"""Backend switch for the hot kernels.

Kernels are written once as plain Python over numpy arrays and compiled with
numba when it is available.  Setting ``SCL_BACKEND=numpy`` (or having no
numba) makes :func:`njit` the identity, and the vectorised numpy paths in
:mod:`scl.simulate` take over for the Monte Carlo kernels.
"""

from __future__ import annotations

import os

_requested = os.environ.get("SCL_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"SCL_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

USE_NUMBA = _requested == "numba" and _numba is not None
BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, otherwise a pass-through decorator."""
    if USE_NUMBA:
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(fn):
        return fn

    return wrap
