"""Row kernels used on every training step, with backend selection.

The compiled Cython module is preferred. Setting the environment variable
``TOLERANT_KD_PURE_PYTHON=1`` before import forces the numpy fallback.
"""
import os

import numpy as np

from . import _kernels_py

if os.environ.get("TOLERANT_KD_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
        BACKEND = "python"


def _rows(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def log_softmax_rows(x):
    return _impl.log_softmax_rows(_rows(x))


def log_softmax_backward_rows(g, out):
    return _impl.log_softmax_backward_rows(_rows(g), _rows(out))


def rank_rows(p, k):
    return _impl.rank_rows(_rows(p), int(k))


def negentropy_rows(t):
    return _impl.negentropy_rows(_rows(t))
