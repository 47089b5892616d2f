"""Pure-numpy versions of the compiled row kernels.

Used when the extension is not built or when ``TOLERANT_KD_PURE_PYTHON`` is
set. Agrees with the compiled kernels to rounding (not bit-for-bit: numpy
uses pairwise summation and its own vectorised ``exp``).
"""
import numpy as np


def log_softmax_rows(x):
    m = x.max(axis=1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def log_softmax_backward_rows(g, out):
    return g - np.exp(out) * g.sum(axis=1, keepdims=True)


def rank_rows(p, k):
    """Indices of the k largest entries per row; ties go to the lower index."""
    c = p.shape[1]
    if k < 1 or k > c:
        raise ValueError(f"k={k} must lie in [1, {c}]")
    # stable sort on the negated values keeps equal entries in index order
    return np.argsort(-p, axis=1, kind="stable")[:, :k].astype(np.int64)


def negentropy_rows(t):
    """Row-wise sum of t*ln(t) with 0*ln(0) taken as 0."""
    safe = np.where(t > 0.0, t, 1.0)
    return np.where(t > 0.0, t * np.log(safe), 0.0).sum(axis=1)
