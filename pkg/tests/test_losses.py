import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tolerant_kd.core import Tape, Tensor, log_softmax
from tolerant_kd.losses import (
    ConvergenceError,
    LossConfig,
    confidence_ranking,
    cp_loss,
    cross_entropy,
    eta_from_u,
    kl_divergence,
    lsr_loss,
    optimal_student_distribution,
    optimal_top1,
    student_loss,
    tsd_loss,
    tsd_objective,
)

from gradcheck import brute_force_student_optimum, loss_grad_error, well_separated_logits

ETA = 3.0 / 7.0


def logits_of(p):
    return np.log(np.asarray(p, dtype=np.float64))


# --- cross-entropy --------------------------------------------------------

def test_cross_entropy_examples():
    assert cross_entropy(np.zeros((1, 100)), [7]).item() == pytest.approx(np.log(100), abs=1e-12)
    assert cross_entropy(np.array([[50.0, 0.0, 0.0]]), [0]).item() == pytest.approx(0.0, abs=1e-20)
    v = cross_entropy(logits_of([[0.7, 0.2, 0.1]]), [0]).item()
    assert v == pytest.approx(-np.log(0.7), abs=1e-12)
    assert v == pytest.approx(0.356675, abs=1e-6)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError, match="out of range"):
        cross_entropy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 3)), [-1, 0])


# --- KL ---------------------------------------------------------------------

def test_kl_examples():
    s = np.array([0.2, 0.3, 0.5])
    assert kl_divergence(s, log_softmax(Tensor(np.log(s)))).item() == pytest.approx(0.0, abs=1e-15)
    direct = 0.5 * np.log(0.5 / 0.25) + 0.5 * np.log(0.5 / 0.75)
    got = kl_divergence([0.5, 0.5], Tensor(np.log([0.25, 0.75]))).item()
    assert got == pytest.approx(direct, abs=1e-15)
    assert got == pytest.approx(0.143841, abs=1e-6)
    v = kl_divergence([0.0, 0.4, 0.6], Tensor(np.log([0.2, 0.3, 0.5]))).item()
    assert np.isfinite(v)
    assert v == pytest.approx(0.4 * np.log(0.4 / 0.3) + 0.6 * np.log(0.6 / 0.5), abs=1e-15)


def test_kl_rejects_off_simplex_teacher():
    with pytest.raises(ValueError, match="simplex"):
        kl_divergence([0.5, 0.6], Tensor(np.log([0.5, 0.5])))
    with pytest.raises(ValueError, match="simplex"):
        kl_divergence([1.1, -0.1], Tensor(np.log([0.5, 0.5])))


def test_kl_gradient_reaches_student_only():
    t = Tensor([0.3, 0.7], requires_grad=True)
    z = Tensor([0.1, -0.4], requires_grad=True)
    with Tape() as tape:
        loss = kl_divergence(t, log_softmax(z))
    tape.backward(loss)
    assert t.grad is None and z.grad is not None


# --- student mixture --------------------------------------------------------

def test_student_loss_degenerate_mixtures(rng):
    z = rng.normal(size=(6, 5))
    y = rng.integers(0, 5, 6)
    t = rng.dirichlet(np.ones(5), size=6)
    ce = cross_entropy(z, y).item()
    kl = kl_divergence(t, log_softmax(Tensor(z))).item()
    assert abs(student_loss(z, y, t, 1.0).item() - ce) <= 1e-12
    assert abs(student_loss(z, y, t, 0.0).item() - kl) <= 1e-12


def test_student_loss_hand_case():
    z = logits_of([[0.6, 0.3, 0.1]])
    t = np.array([[0.5, 0.25, 0.25]])
    ce = -np.log(0.6)
    kl = 0.5 * np.log(0.5 / 0.6) + 0.25 * np.log(0.25 / 0.3) + 0.25 * np.log(0.25 / 0.1)
    assert student_loss(z, [0], t, 0.6).item() == pytest.approx(0.6 * ce + 0.4 * kl, abs=1e-14)


def test_student_loss_affine_in_lambda(rng):
    for _ in range(20):
        z = rng.normal(size=(4, 6))
        y = rng.integers(0, 6, 4)
        t = rng.dirichlet(np.ones(6), size=4)
        f0, fh, f1 = (student_loss(z, y, t, lam).item() for lam in (0.0, 0.5, 1.0))
        assert abs(fh - 0.5 * (f0 + f1)) <= 1e-12


def test_student_loss_lambda_range():
    with pytest.raises(ValueError):
        student_loss(np.zeros((1, 2)), [0], [[0.5, 0.5]], 1.5)


# --- TSD --------------------------------------------------------------------

def test_tsd_one_hot_softmax():
    p = np.zeros((1, 10))
    p[0, 3] = 1.0
    for eta in (0.1, ETA, 0.9):
        assert tsd_objective(p, [3], eta, 5) == pytest.approx(1.0 - eta, abs=1e-15)
    # through logits: softmax saturates to the one-hot
    z = np.full((1, 10), -800.0)
    z[0, 3] = 0.0
    assert tsd_loss(z, [3], ETA, 5).item() == pytest.approx(1.0 - ETA, abs=1e-12)


def test_tsd_value_at_analytic_optimum():
    p = np.array([[0.6, 0.1, 0.1, 0.1, 0.1] + [0.0] * 5])
    direct = -ETA * np.log(0.6) + (1 - ETA) * (0.6 - 0.1)
    assert tsd_objective(p, [0], ETA, 5) == pytest.approx(direct, abs=1e-15)
    assert direct == pytest.approx(0.504638, abs=2e-6)  # printed figure is truncated


def test_tsd_loss_matches_objective_for_positive_probs(rng):
    p = rng.dirichlet(np.ones(8), size=5)
    y = rng.integers(0, 8, 5)
    assert tsd_loss(np.log(p), y, 0.4, 4).item() == pytest.approx(tsd_objective(p, y, 0.4, 4), abs=1e-13)


def random_simplex_with_argmax(rng, n, c, label):
    """Mix of dense, sparse and near-optimum points, with the max moved to ``label``."""
    alphas = rng.choice([0.05, 0.3, 1.0, 5.0], size=n)
    p = np.stack([rng.dirichlet(np.full(c, a)) for a in alphas])
    top = p.argmax(axis=1)
    rows = np.arange(n)
    p[rows, top], p[rows, label] = p[rows, label], p[rows, top].copy()
    return p


def test_tsd_minimum_by_random_sampling(rng):
    c, k, label = 10, 5, 0
    opt = tsd_objective(np.array([[0.6, 0.1, 0.1, 0.1, 0.1] + [0.0] * 5]), [label], ETA, k)
    p = random_simplex_with_argmax(rng, 10_000, c, label)
    vals = np.array([tsd_objective(row[None], [label], ETA, k) for row in p])
    assert vals.min() >= opt - 1e-9


def test_tsd_argument_checks():
    with pytest.raises(ValueError):
        tsd_loss(np.zeros((1, 4)), [0], 0.5, 5)
    with pytest.raises(ValueError):
        tsd_loss(np.zeros((1, 4)), [0], 1.0, 2)


def test_tsd_gap_uses_model_ranking_not_label():
    # label is ranked third; the gap term is still top-1 minus mean of next K-1
    p = np.array([[0.5, 0.3, 0.2]])
    expected = 0.5 * -np.log(0.2) + 0.5 * (0.5 - 0.25)
    assert tsd_objective(p, [2], 0.5, 3) == pytest.approx(expected, abs=1e-15)


# --- LSR / CP -----------------------------------------------------------------

def test_lsr_examples(rng):
    z = rng.normal(size=(5, 4))
    y = rng.integers(0, 4, 5)
    assert lsr_loss(z, y, 0.0).item() == pytest.approx(cross_entropy(z, y).item(), abs=1e-15)
    with pytest.raises(ValueError):
        lsr_loss(z, y, 1.0)
    v = lsr_loss(logits_of([[0.9, 0.1]]), [0], 0.1).item()
    direct = 0.95 * -np.log(0.9) + 0.05 * -np.log(0.1)
    assert v == pytest.approx(direct, abs=1e-14)
    assert v == pytest.approx(0.215224, abs=5e-6)


def test_cp_examples(rng):
    z = rng.normal(size=(5, 4))
    y = rng.integers(0, 4, 5)
    assert cp_loss(z, y, 0.0).item() == pytest.approx(cross_entropy(z, y).item(), abs=1e-15)
    u = np.zeros((1, 7))
    assert cp_loss(u, [2], 0.3).item() == pytest.approx(np.log(7) - 0.3 * np.log(7), abs=1e-14)
    p = np.array([0.7, 0.2, 0.1])
    entropy = -np.sum(p * np.log(p))
    assert entropy == pytest.approx(0.801819, abs=1e-6)
    v = cp_loss(logits_of([p]), [0], 0.1).item()
    assert v == pytest.approx(-np.log(0.7) - 0.1 * entropy, abs=1e-14)
    assert v == pytest.approx(0.276493, abs=1e-6)


# --- gradients ------------------------------------------------------------------

@pytest.mark.parametrize("name", ["ce", "student", "tsd", "lsr", "cp"])
def test_loss_gradients(name, rng):
    for _ in range(10):
        n, c = 3, 7
        y = rng.integers(0, c, n)
        if name == "tsd":
            z = well_separated_logits(rng, n, c, 4)
            err = loss_grad_error(tsd_loss, z, y, ETA, 4)
        else:
            z = rng.normal(size=(n, c)) * 2
            if name == "ce":
                err = loss_grad_error(cross_entropy, z, y)
            elif name == "student":
                err = loss_grad_error(student_loss, z, y, rng.dirichlet(np.ones(c), size=n), 0.6)
            elif name == "lsr":
                err = loss_grad_error(lsr_loss, z, y, 0.1)
            else:
                err = loss_grad_error(cp_loss, z, y, 0.1)
        assert err < 1e-5


# --- closed forms ------------------------------------------------------------------

def test_optimal_top1_examples():
    assert optimal_top1(ETA, 5) == pytest.approx(0.75 * 0.8, abs=1e-15)
    assert optimal_top1(0.5, 5) == pytest.approx(0.8, abs=1e-15)
    assert optimal_top1(0.9, 5) == 1.0
    assert optimal_top1(5 / 9, 5) == pytest.approx(1.0)  # boundary K/(2K-1)


def test_eta_from_u_inverts():
    assert eta_from_u(0.6, 5) == pytest.approx(ETA, abs=1e-15)
    for k in (2, 5, 10):
        for u in (0.05, 0.3, 0.6, 0.95):
            assert optimal_top1(eta_from_u(u, k), k) == pytest.approx(u, abs=1e-14)
    with pytest.raises(ValueError):
        eta_from_u(1.0, 5)


def test_optimal_top1_is_the_minimiser(rng):
    # scan the top-1 value along the optimal family (rest spread on K-1 classes)
    k, c = 5, 10
    grid = np.linspace(0.2, 0.999, 4000)
    vals = []
    for f1 in grid:
        p = np.zeros(c)
        p[0], p[1:k] = f1, (1 - f1) / (k - 1)
        vals.append(tsd_objective(p[None], [0], ETA, k))
    assert grid[int(np.argmin(vals))] == pytest.approx(0.6, abs=1e-3)


# --- student optimum ----------------------------------------------------------------

def test_student_optimum_endpoints():
    t = np.array([0.6, 0.3, 0.1])
    np.testing.assert_array_equal(optimal_student_distribution(t, 0, 0.0), t)
    np.testing.assert_array_equal(optimal_student_distribution(t, 2, 1.0), [0.0, 0.0, 1.0])


def test_student_optimum_sweep_against_grid():
    t = np.array([0.6, 0.3, 0.1])
    lams = np.linspace(0.0, 1.0, 21)[1:-1]
    w = np.array([optimal_student_distribution(t, 0, lam)[0] for lam in lams])
    assert np.all(np.diff(w) > 0)
    grid = brute_force_student_optimum(t, 0, lams)
    np.testing.assert_allclose(w, grid[:, 0], atol=2e-3)


def test_student_optimum_is_a_stationary_point(rng):
    # optimum of a mixture of log-losses: gradient w.r.t. logits vanishes
    for _ in range(10):
        t = rng.dirichlet(np.ones(6))
        s = optimal_student_distribution(t, 2, 0.37)
        z = Tensor(np.log(s), requires_grad=True)
        with Tape() as tape:
            loss = student_loss(z, [2], t, 0.37)
        tape.backward(loss)
        assert np.abs(z.grad).max() < 1e-8


def test_student_optimum_matches_mixture_target(rng):
    # independent oracle: minimising the mixed log-loss over the simplex
    # returns the mixed target itself
    for _ in range(20):
        c = int(rng.integers(2, 9))
        t = rng.dirichlet(np.ones(c))
        label = int(rng.integers(0, c))
        lam = float(rng.uniform(0.01, 0.99))
        target = (1 - lam) * t
        target[label] += lam
        np.testing.assert_allclose(optimal_student_distribution(t, label, lam), target, atol=1e-9)


def test_student_optimum_handles_teacher_zeros():
    s = optimal_student_distribution(np.array([0.0, 0.5, 0.5]), 1, 0.5)
    assert s[0] == 0.0
    assert s.sum() == pytest.approx(1.0, abs=1e-12)


def test_student_optimum_iteration_cap():
    with pytest.raises(ConvergenceError):
        optimal_student_distribution(np.array([0.1, 0.2, 0.7]), 0, 0.5, max_iter=1)


# --- ranking / config ------------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=2, max_size=12))
def test_ranking_tie_break(levels):
    p = np.array(levels, dtype=np.float64) + 1.0
    p /= p.sum()
    r = confidence_ranking(p)
    assert np.all(np.diff(r.values[0]) <= 0)
    assert r.values[0].sum() == pytest.approx(1.0, abs=1e-12)
    for v in np.unique(r.values[0]):
        ids = r.indices[0][r.values[0] == v]
        assert np.all(np.diff(ids) > 0)
    # permuting equal-valued classes leaves the selection unchanged
    perm = np.arange(p.size)
    for v in np.unique(p):
        members = np.flatnonzero(p == v)
        perm[members] = members[::-1]
    np.testing.assert_array_equal(confidence_ranking(p[perm]).indices, r.indices)


def test_loss_config_fields():
    assert LossConfig("tsd", eta=0.5, K=5).kind == "TSD"
    with pytest.raises(ValueError):
        LossConfig("TSD", eta=0.5)
    with pytest.raises(ValueError):
        LossConfig("BL", eps=0.1)
    with pytest.raises(ValueError):
        LossConfig("LSR", eps=1.0)
    with pytest.raises(ValueError):
        LossConfig("nope")
    z, y = np.zeros((2, 5)), [0, 1]
    assert LossConfig("CP", beta=0.0)(z, y).item() == pytest.approx(np.log(5))
