"""Weighted score-matching loss: reductions, the quadratic-form cross-check,
additivity, and boundedness of contaminant contributions."""

import numpy as np
import pytest

from nsmbayes.nsm_loss import ConjCoefficients, conj_coefficients, nsm_loss, \
    per_point_terms
from nsmbayes.surrogates import ExpFamEbm, Maf, Mdn
from nsmbayes.weights import ConstantWeight, ImqWeight


def relerr(got, want):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = max(np.max(np.abs(want)), 1e-8)
    return np.max(np.abs(got - want)) / denom


def test_constant_weight_reduces_to_hyvarinen_objective():
    rng = np.random.default_rng(0)
    model = Maf(2, 2, n_transforms=2, hidden_width=8, seed=0)
    x = rng.normal(size=(15, 2))
    theta = rng.normal(size=2)
    got = nsm_loss(theta, x, model, ConstantWeight())
    score = model.score_x(x, theta)
    trace = model.hessian_trace_x(x, theta)
    want = np.mean((score ** 2).sum(axis=1) + 2.0 * trace)
    assert abs(got - want) < 1e-12 * max(1.0, abs(want))


def test_single_datum_at_weight_centre():
    rng = np.random.default_rng(1)
    model = Mdn(2, 2, components=3, hidden_width=8, seed=1)
    centre = np.array([0.3, -0.4])
    w = ImqWeight(centre, np.array([[2.0, 0.1], [0.1, 1.0]]))
    theta = rng.normal(size=2)
    got = nsm_loss(theta, centre[None], model, w)
    s = model.score_x(centre[None], theta)[0]
    tr = model.hessian_trace_x(centre[None], theta)[0]
    assert abs(got - ((s ** 2).sum() + 2.0 * tr)) < 1e-12


def test_ebm_loss_matches_quadratic_form():
    """Two independent code paths agree to 1e-10 absolute."""
    rng = np.random.default_rng(2)
    model = ExpFamEbm(3, 2, hidden_width=16, seed=2)
    x = rng.normal(size=(40, 3))
    w = ImqWeight.from_data(np.vstack([x, rng.normal(size=(60, 3))]), rng=rng)
    coeffs = conj_coefficients(x, model, w)
    for _ in range(10):
        theta = 3.0 * rng.normal(size=2)
        direct = nsm_loss(theta, x, model, w)
        assert abs(direct - coeffs.loss(theta)) < 1e-10


def test_conj_a_matrix_psd_and_symmetric():
    rng = np.random.default_rng(3)
    model = ExpFamEbm(2, 4, hidden_width=12, seed=3)
    x = rng.normal(size=(30, 2))
    w = ImqWeight.from_data(rng.normal(size=(100, 2)), rng=rng)
    coeffs = conj_coefficients(x, model, w)
    assert np.array_equal(coeffs.a, coeffs.a.T)
    assert np.linalg.eigvalsh(coeffs.a).min() >= -1e-10


def test_conj_zero_jacobian_gives_zero_coefficients():
    model = ExpFamEbm(2, 3, hidden_width=8, seed=4)
    model.t_net.heads["T"]["A"][:] = 0.0
    x = np.random.default_rng(4).normal(size=(10, 2))
    coeffs = conj_coefficients(x, model, ConstantWeight())
    assert np.all(coeffs.a == 0.0)
    assert np.all(coeffs.b == 0.0)


def test_conj_linear_t_single_point():
    """n=1, w=1, T(x) = Mx: A_1 = M M'."""
    model = ExpFamEbm(2, 3, hidden_width=8, seed=5, t_hidden=[])
    m_matrix = model.t_net.heads["T"]["A"]
    x = np.array([[0.7, -1.2]])
    coeffs = conj_coefficients(x, model, ConstantWeight())
    assert relerr(coeffs.a, m_matrix @ m_matrix.T) < 1e-12


def test_conj_divergence_term_matches_fd():
    """B_n's d(x) entries vs FD divergence of the rows of w^2 grad T."""
    model = ExpFamEbm(2, 3, hidden_width=12, seed=6)
    rng = np.random.default_rng(6)
    w = ImqWeight(rng.normal(size=2), np.eye(2) * 1.5, zeta=1.0)

    def field(x):
        return w.weight_sq(x[None])[0] * model.ebm_features(x[None])["jac_T"][0]

    for _ in range(5):
        x = rng.normal(size=2)
        feats = model.ebm_features(x[None])
        analytic = (feats["jac_T"][0] @ w.weight_sq_grad(x[None])[0]
                    + w.weight_sq(x[None])[0] * feats["trace_T"][0])
        h = 1e-5
        fd = np.zeros(3)
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            fd += (field(x + e)[:, j] - field(x - e)[:, j]) / (2.0 * h)
        assert relerr(analytic, fd) < 1e-3


def test_loss_additivity_over_concatenated_data():
    rng = np.random.default_rng(7)
    model = Mdn(2, 2, components=3, hidden_width=8, seed=7)
    w = ImqWeight.from_data(rng.normal(size=(80, 2)), rng=rng)
    theta = rng.normal(size=2)
    x1 = rng.normal(size=(12, 2))
    x2 = rng.normal(size=(20, 2))
    l1 = nsm_loss(theta, x1, model, w)
    l2 = nsm_loss(theta, x2, model, w)
    both = nsm_loss(theta, np.vstack([x1, x2]), model, w)
    assert abs(both - (12 * l1 + 20 * l2) / 32) < 1e-12


@pytest.mark.parametrize("family,zeta", [("maf", 1.0), ("mdn", 2.0)])
def test_contaminant_contribution_stays_bounded(family, zeta):
    """Per-point loss term is bounded as the contaminant moves out to 1e6."""
    rng = np.random.default_rng(8)
    if family == "maf":
        model = Maf(2, 2, n_transforms=2, hidden_width=8, seed=8)
    else:
        model = Mdn(2, 2, components=3, hidden_width=8, seed=8)
    w = ImqWeight(np.zeros(2), np.eye(2), zeta=zeta)
    theta = rng.normal(size=2)
    direction = np.array([0.6, -0.8])
    radii = np.logspace(0.0, 6.0, 31)
    vals = np.array([
        abs(per_point_terms(theta, (r * direction)[None], model, w)[0])
        for r in radii
    ])
    assert np.all(np.isfinite(vals))
    head = vals[radii < 1e4].max()
    tail = vals[radii >= 1e4].max()
    assert tail <= head * 1.01 + 1e-9


def test_non_finite_contribution_reports_datum_index():
    model = Mdn(2, 2, components=2, hidden_width=8, seed=9)
    x = np.vstack([np.zeros((3, 2)), np.full((1, 2), 1e308)])
    with pytest.raises(FloatingPointError, match="datum 3"):
        nsm_loss(np.zeros(2), x, model, ImqWeight(np.zeros(2), np.eye(2)))


def test_dataset_duck_typing():
    class Box:
        def __init__(self, x):
            self.x = x

    rng = np.random.default_rng(10)
    model = Mdn(2, 2, components=2, hidden_width=8, seed=10)
    x = rng.normal(size=(6, 2))
    theta = rng.normal(size=2)
    w = ConstantWeight()
    assert nsm_loss(theta, Box(x), model, w) == nsm_loss(theta, x, model, w)


def test_coefficients_loss_helper_matches_manual_quadratic():
    a = np.array([[2.0, 0.3], [0.3, 1.0]])
    b = np.array([0.5, -1.0])
    coeffs = ConjCoefficients(a=a, b=b, c=4.0, n=3)
    theta = np.array([1.0, 2.0])
    want = theta @ a @ theta + 2.0 * theta @ b + 4.0
    assert abs(coeffs.loss(theta) - want) < 1e-15
