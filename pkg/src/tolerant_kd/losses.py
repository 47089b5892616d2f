"""Training objectives for patriarchs and students.

All batch losses take raw logits ``[B, C]`` (or a single row ``[C]``) and
integer labels, and return a scalar :class:`~tolerant_kd.core.Tensor` on the
active tape. Probabilities always come from a temperature-1 softmax.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import Tensor, _record, exp, log_softmax

__all__ = [
    "LossConfig",
    "ConfidenceRanking",
    "confidence_ranking",
    "cross_entropy",
    "kl_divergence",
    "student_loss",
    "tsd_loss",
    "tsd_objective",
    "lsr_loss",
    "cp_loss",
    "optimal_top1",
    "eta_from_u",
    "optimal_student_distribution",
    "ConvergenceError",
]

SIMPLEX_TOL = 1e-9


class ConvergenceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LossConfig:
    """Patriarch loss selection.

    ``eta`` and ``K`` belong to TSD, ``eps`` to LSR and ``beta`` to CP.
    """

    kind: str = "BL"
    eta: float = None
    K: int = None
    eps: float = None
    beta: float = None

    def __post_init__(self):
        kind = self.kind.upper()
        object.__setattr__(self, "kind", kind)
        needs = {"BL": (), "TSD": ("eta", "K"), "LSR": ("eps",), "CP": ("beta",)}
        if kind not in needs:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        for name in ("eta", "K", "eps", "beta"):
            present = getattr(self, name) is not None
            if present != (name in needs[kind]):
                state = "requires" if not present else "does not take"
                raise ValueError(f"loss kind {kind} {state} field {name!r}")
        if kind == "TSD" and (not 0 < self.eta < 1 or self.K < 2):
            raise ValueError(f"TSD needs eta in (0,1) and K >= 2, got eta={self.eta}, K={self.K}")
        if kind == "LSR" and not 0 <= self.eps < 1:
            raise ValueError(f"LSR needs eps in [0,1), got {self.eps}")
        if kind == "CP" and self.beta < 0:
            raise ValueError(f"CP needs beta >= 0, got {self.beta}")

    def __call__(self, logits, labels):
        if self.kind == "BL":
            return cross_entropy(logits, labels)
        if self.kind == "TSD":
            return tsd_loss(logits, labels, self.eta, self.K)
        if self.kind == "LSR":
            return lsr_loss(logits, labels, self.eps)
        return cp_loss(logits, labels, self.beta)


@dataclass(frozen=True)
class ConfidenceRanking:
    """Class ids sorted by descending probability, with their probabilities."""

    indices: np.ndarray
    values: np.ndarray


def confidence_ranking(probs, k=None):
    """Per-row ranking of a probability matrix; ties go to the lower class id."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    k = p.shape[1] if k is None else k
    idx = kernels.rank_rows(p, k)
    return ConfidenceRanking(idx, np.take_along_axis(p, idx, axis=1))


def _rows(logits):
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    if logits.data.ndim == 1:
        x = logits
        return _record(x.data.reshape(1, -1), (x,), lambda g: (g.reshape(x.data.shape),))
    return logits


def _labels(labels, n, c):
    y = np.atleast_1d(np.asarray(labels))
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"label out of range [0, {c}): {y.min()}..{y.max()}")
    return y


def _one_hot(y, c):
    out = np.zeros((y.size, c))
    out[np.arange(y.size), y] = 1.0
    return out


def _check_simplex(t):
    if np.any(t < -SIMPLEX_TOL) or np.any(np.abs(t.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise ValueError("teacher distribution is not on the probability simplex")


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of the labels."""
    z = _rows(logits)
    n, c = z.data.shape
    y = _labels(labels, n, c)
    return -(log_softmax(z) * _one_hot(y, c)).sum() / n


def kl_divergence(teacher, student_log_probs):
    """KL(teacher || student), averaged over rows for batched input.

    ``teacher`` is a constant; gradients reach the student only.
    """
    lp = _rows(student_log_probs)
    t = np.atleast_2d(np.asarray(teacher.data if isinstance(teacher, Tensor) else teacher, dtype=np.float64))
    if t.shape != lp.data.shape:
        raise ValueError(f"teacher shape {list(t.shape)} does not match student {lp.shape}")
    _check_simplex(t)
    n = t.shape[0]
    # sum_c t ln t is constant w.r.t. the student
    const = float(kernels.negentropy_rows(t).sum())
    return (const - (lp * t).sum()) / n


def student_loss(logits, labels, teacher_probs, lam):
    """``lam * CE + (1 - lam) * KL(teacher || student)``, batch-averaged."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    z = _rows(logits)
    n, c = z.data.shape
    y = _labels(labels, n, c)
    lp = log_softmax(z)
    ce = -(lp * _one_hot(y, c)).sum() / n
    kl = kl_divergence(teacher_probs, lp)
    return ce * float(lam) + kl * (1.0 - float(lam))


def _tsd_coefficients(probs, K):
    """+1 on the top class, -1/(K-1) on ranks 2..K, 0 elsewhere."""
    idx = kernels.rank_rows(probs, K)
    coef = np.zeros_like(probs)
    rows = np.arange(probs.shape[0])[:, None]
    coef[rows, idx[:, 1:]] = -1.0 / (K - 1)
    coef[rows[:, 0], idx[:, 0]] = 1.0
    return coef


def tsd_loss(logits, labels, eta, K):
    """Cross-entropy weighted by ``eta`` plus ``(1 - eta)`` times the gap
    between the top probability and the mean of the next ``K - 1``.

    The ranking is taken from the current softmax and held fixed during
    differentiation, so the gap term contributes a subgradient.
    """
    if not 0.0 < eta < 1.0:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    z = _rows(logits)
    n, c = z.data.shape
    if not 2 <= K <= c:
        raise ValueError(f"K must lie in [2, C={c}], got {K}")
    y = _labels(labels, n, c)
    lp = log_softmax(z)
    p = exp(lp)
    coef = _tsd_coefficients(p.data, K)
    ce = -(lp * _one_hot(y, c)).sum() / n
    gap = (p * coef).sum() / n
    return ce * float(eta) + gap * (1.0 - float(eta))


def tsd_objective(probs, labels, eta, K):
    """Off-tape TSD value for probability rows, allowing exact zeros.

    Zero-probability labels give ``inf``.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    n, c = p.shape
    y = _labels(labels, n, c)
    with np.errstate(divide="ignore"):
        ce = -np.log(p[np.arange(n), y])
    gap = (p * _tsd_coefficients(p, K)).sum(axis=1)
    return float(np.mean(eta * ce + (1.0 - eta) * gap))


def lsr_loss(logits, labels, eps=0.1):
    """Cross-entropy against ``(1 - eps) * one_hot + eps * uniform``."""
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"eps must lie in [0, 1), got {eps}")
    z = _rows(logits)
    n, c = z.data.shape
    y = _labels(labels, n, c)
    target = (1.0 - eps) * _one_hot(y, c) + eps / c
    return -(log_softmax(z) * target).sum() / n


def cp_loss(logits, labels, beta=0.1):
    """Cross-entropy minus ``beta`` times the softmax entropy."""
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    z = _rows(logits)
    n, c = z.data.shape
    y = _labels(labels, n, c)
    lp = log_softmax(z)
    ce = -(lp * _one_hot(y, c)).sum() / n
    neg_entropy = (exp(lp) * lp).sum() / n
    return ce + neg_entropy * float(beta)


def optimal_top1(eta, K):
    """Top-1 probability minimising the TSD objective, clamped at 1."""
    if not 0.0 < eta < 1.0 or K < 2:
        raise ValueError(f"need eta in (0,1) and K >= 2, got eta={eta}, K={K}")
    return min(eta / (1.0 - eta) * (K - 1) / K, 1.0)


def eta_from_u(u, K):
    """Inverse of :func:`optimal_top1` on its unclamped range."""
    if not 0.0 < u < 1.0 or K < 2:
        raise ValueError(f"need u in (0,1) and K >= 2, got u={u}, K={K}")
    r = u * K / (K - 1)
    return r / (1.0 + r)


def optimal_student_distribution(teacher, label, lam, tol=1e-8, max_iter=500):
    """Simplex point minimising ``lam * CE + (1 - lam) * KL(teacher || s)``.

    Solved numerically by damped Newton iterations on logits restricted to
    the support of the objective. Entry ``label`` of the result is the
    optimal student top-1 confidence.
    """
    t = np.asarray(teacher, dtype=np.float64)
    if t.ndim != 1:
        raise ValueError("teacher must be a single distribution")
    _check_simplex(t[None, :])
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    c = t.size
    if lam == 0.0:
        return t.copy()
    if lam == 1.0:
        out = np.zeros(c)
        out[label] = 1.0
        return out

    # Up to a constant the objective is -sum_c q_c ln s_c with
    # q = lam*onehot + (1-lam)*t; classes with q_c == 0 get no mass.
    q = (1.0 - lam) * np.clip(t, 0.0, None)
    q[label] += lam
    support = q > 0
    qs = q[support]

    def objective(z):
        lp = z - z.max()
        lp = lp - np.log(np.exp(lp).sum())
        return -(qs * lp).sum() / qs.sum(), np.exp(lp)

    z = np.zeros(qs.size)
    f, s = objective(z)
    for _ in range(max_iter):
        grad = s * qs.sum() - qs  # d/dz of -sum q ln softmax(z), unnormalised
        if np.max(np.abs(grad)) < tol * 1e-3:
            break
        step = 1.0 - qs / (s * qs.sum())  # Newton direction of the softmax model
        step -= step.mean()
        a = 1.0
        while True:
            f_new, s_new = objective(z - a * step)
            # near the optimum f only moves by rounding; accept within that noise
            if f_new <= f + 1e-14 * abs(f) or a < 1e-12:
                break
            a *= 0.5
        z, f, s = z - a * step, f_new, s_new
    else:
        raise ConvergenceError(f"no convergence after {max_iter} iterations")
    out = np.zeros(c)
    out[support] = s
    return out
