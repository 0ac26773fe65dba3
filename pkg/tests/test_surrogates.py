"""Density, score and Hessian checks for the three surrogate families.

Finite differences of the log-density are the oracle for every analytic
derivative; 1-D quadrature is the oracle for normalisation and sampling.
"""

import numpy as np
import pytest

from nsmbayes.autodiff import Tape, grad
from nsmbayes.surrogates import ExpFamEbm, Maf, Mdn

INV_SOFTPLUS_ONE = float(np.log(np.e - 1.0))
LOG_2PI = float(np.log(2.0 * np.pi))


def relerr(got, want):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = max(np.max(np.abs(want)), 1e-8)
    return np.max(np.abs(got - want)) / denom


def fd_gradient(f, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        out[j] = (f(x + e) - f(x - e)) / (2.0 * h)
    return out


def fd_laplacian(f, x, h=1e-4):
    x = np.asarray(x, dtype=np.float64)
    total = 0.0
    fx = f(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        total += (f(x + e) - 2.0 * fx + f(x - e)) / h ** 2
    return total


def inv_softplus(y):
    return np.log(np.expm1(y))


def make_k1_mdn(x_dim, theta_dim, means, variances):
    """Constant single-Gaussian MDN: trunk zeroed, heads pinned via biases."""
    model = Mdn(x_dim, theta_dim, components=1, hidden_width=8, seed=0)
    net = model.net
    net.layers[0]["W"][:] = 0.0
    net.layers[0]["b"][:] = 0.0
    for head in net.heads.values():
        head["A"][:] = 0.0
        head["c"][:] = 0.0
    net.heads["means"]["c"][:] = np.asarray(means, dtype=np.float64).ravel()
    net.heads["scales"]["c"][:] = inv_softplus(
        np.asarray(variances, dtype=np.float64).ravel() - model.var_floor)
    return model


def make_identity_maf(x_dim, theta_dim, n_transforms=3):
    model = Maf(x_dim, theta_dim, n_transforms=n_transforms, hidden_width=8)
    for t in model.transforms:
        for layer in t.layers:
            layer["W"][:] = 0.0
            layer["b"][:] = 0.0
            if layer["V"] is not None:
                layer["V"][:] = 0.0
        for head in t.heads.values():
            head["A"][:] = 0.0
            head["c"][:] = 0.0
            if head["V"] is not None:
                head["V"][:] = 0.0
        t.heads["s"]["c"][:] = INV_SOFTPLUS_ONE
    return model


# -- trivial closed forms -----------------------------------------------------


def test_mdn_k1_standard_normal_at_mode():
    model = make_k1_mdn(1, 2, means=[0.0], variances=[1.0])
    got = model.log_density(np.array([[0.0]]), np.array([0.4, -1.0]))[0]
    assert abs(got - (-0.5 * LOG_2PI)) < 1e-12


def test_mdn_k1_score_and_trace_closed_form():
    variances = np.array([0.5, 2.0, 1.3])
    means = np.array([0.3, -1.0, 0.7])
    model = make_k1_mdn(3, 2, means, variances)
    theta = np.array([0.1, 0.2])
    x = np.array([[1.0, -0.5, 2.0]])
    score = model.score_x(x, theta)[0]
    assert relerr(score, -(x[0] - means) / variances) < 1e-12
    trace = model.hessian_trace_x(x, theta)[0]
    assert abs(trace - (-(1.0 / variances).sum())) < 1e-12


def test_identity_maf_is_standard_normal():
    model = make_identity_maf(3, 2)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 3))
    theta = np.array([0.5, -0.2])
    want = -0.5 * (x ** 2).sum(axis=1) - 1.5 * LOG_2PI
    assert relerr(model.log_density(x, theta), want) < 1e-12
    assert relerr(model.score_x(x, theta), -x) < 1e-12
    assert relerr(model.hessian_trace_x(x, theta), np.full(6, -3.0)) < 1e-12


def test_ebm_theta_zero_and_feature_reconstruction():
    model = ExpFamEbm(2, 3, hidden_width=16, seed=1)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 2))
    feats = model.ebm_features(x)
    assert np.array_equal(model.score_x(x, np.zeros(3)), feats["jac_b"])
    theta = rng.normal(size=3)
    recon = ExpFamEbm.score_from_features(feats, theta)
    assert np.array_equal(model.score_x(x, theta), recon)


def test_ebm_zero_weight_heads():
    model = ExpFamEbm(2, 3, hidden_width=16, seed=2)
    model.t_net.heads["T"]["A"][:] = 0.0
    model.t_net.heads["T"]["c"][:] = np.array([0.5, -1.0, 2.0])
    x = np.random.default_rng(2).normal(size=(4, 2))
    feats = model.ebm_features(x)
    assert np.allclose(feats["T"], np.array([0.5, -1.0, 2.0]))
    assert np.all(feats["jac_T"] == 0.0)
    assert np.all(feats["trace_T"] == 0.0)


# -- finite-difference oracles -----------------------------------------------------


@pytest.mark.parametrize("family", ["mdn", "maf", "ebm"])
def test_score_matches_fd(family):
    rng = np.random.default_rng(7)
    if family == "mdn":
        model = Mdn(3, 2, components=4, hidden_width=12, seed=3)
        logf = lambda x, th: model.log_density(x[None], th)[0]
        score = lambda x, th: model.score_x(x[None], th)[0]
    elif family == "maf":
        model = Maf(3, 2, n_transforms=3, hidden_width=12, seed=3)
        logf = lambda x, th: model.log_density(x[None], th)[0]
        score = lambda x, th: model.score_x(x[None], th)[0]
    else:
        model = ExpFamEbm(3, 2, hidden_width=16, seed=3)
        logf = lambda x, th: model.log_unnorm_density(x[None], th)[0]
        score = lambda x, th: model.score_x(x[None], th)[0]
    for _ in range(10):
        x = rng.normal(size=3)
        theta = rng.normal(size=2)
        fd = fd_gradient(lambda v: logf(v, theta), x)
        assert relerr(score(x, theta), fd) < 1e-5


@pytest.mark.parametrize("family", ["mdn", "maf", "ebm"])
def test_hessian_trace_matches_fd_laplacian(family):
    rng = np.random.default_rng(11)
    if family == "mdn":
        model = Mdn(3, 2, components=4, hidden_width=12, seed=5)
        logf = lambda x, th: model.log_density(x[None], th)[0]
    elif family == "maf":
        model = Maf(3, 2, n_transforms=3, hidden_width=12, seed=5)
        logf = lambda x, th: model.log_density(x[None], th)[0]
    else:
        model = ExpFamEbm(3, 2, hidden_width=16, seed=5)
        logf = lambda x, th: model.log_unnorm_density(x[None], th)[0]
    for _ in range(5):
        x = rng.normal(size=3)
        theta = rng.normal(size=2)
        fd = fd_laplacian(lambda v: logf(v, theta), x)
        got = model.hessian_trace_x(x[None], theta)[0]
        assert relerr(got, fd) < 1e-3


def test_hessian_diag_matches_fd(family=None):
    rng = np.random.default_rng(13)
    maf = Maf(2, 2, n_transforms=3, hidden_width=10, seed=6)
    mdn = Mdn(2, 2, components=3, hidden_width=10, seed=6)
    for model in (maf, mdn):
        x = rng.normal(size=2)
        theta = rng.normal(size=2)
        diag = model.hessian_diag_x(x[None], theta)[0]
        for j in range(2):
            e = np.zeros(2)
            e[j] = 1e-4
            f = lambda v: model.log_density(v[None], theta)[0]
            fd = (f(x + e) - 2.0 * f(x) + f(x - e)) / 1e-8
            assert relerr(diag[j], fd) < 1e-3


def test_ebm_rowdiv_matches_fd_divergence():
    """d(x)_k = grad(w^2) . (grad T)_k + w^2 tr hess T_k vs FD divergence of w^2 grad T_k."""
    model = ExpFamEbm(2, 3, hidden_width=16, seed=9)
    rng = np.random.default_rng(9)

    def w2(x):
        return 1.0 / (1.0 + (x ** 2).sum())

    def w2_grad(x):
        return -2.0 * x / (1.0 + (x ** 2).sum()) ** 2

    def field(x):
        # rows of w^2 * jac_T at a single point
        return w2(x) * model.ebm_features(x[None])["jac_T"][0]

    for _ in range(5):
        x = rng.normal(size=2)
        feats = model.ebm_features(x[None])
        analytic = (feats["jac_T"][0] @ w2_grad(x)
                    + w2(x) * feats["trace_T"][0])
        h = 1e-5
        fd = np.zeros(3)
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            fd += (field(x + e)[:, j] - field(x - e)[:, j]) / (2.0 * h)
        assert relerr(analytic, fd) < 1e-3


def test_ebm_full_hessians_consistent_with_diag():
    model = ExpFamEbm(3, 2, hidden_width=16, seed=4)
    x = np.random.default_rng(4).normal(size=(4, 3))
    full = model.ebm_features(x, hessians=True)
    lean = model.ebm_features(x)
    assert relerr(full["hess_diag_T"], lean["hess_diag_T"]) < 1e-12
    assert relerr(full["trace_b"], lean["trace_b"]) < 1e-12
    # full Hessians symmetric
    assert relerr(full["hess_T"], np.swapaxes(full["hess_T"], -1, -2)) < 1e-12


# -- normalisation and sampling ----------------------------------------------------


def test_maf_1d_density_integrates_to_one():
    model = Maf(1, 2, n_transforms=5, hidden_width=16, seed=3)
    theta = np.array([0.3, -0.7])
    grid = np.linspace(-40.0, 40.0, 80001)
    q = np.exp(model.log_density(grid[:, None], theta))
    integral = np.trapezoid(q, grid)
    assert abs(integral - 1.0) < 1e-3


def test_mdn_1d_density_integrates_to_one():
    model = Mdn(1, 2, components=5, hidden_width=12, seed=8)
    theta = np.array([-0.2, 1.1])
    grid = np.linspace(-40.0, 40.0, 80001)
    q = np.exp(model.log_density(grid[:, None], theta))
    assert abs(np.trapezoid(q, grid) - 1.0) < 1e-3


def test_identity_maf_samples_are_base_draws():
    model = make_identity_maf(2, 2, n_transforms=3)
    theta = np.array([0.3, 0.4])
    draws = model.sample(theta, 100, np.random.default_rng(5))
    base = np.random.default_rng(5).standard_normal((100, 2))
    # two interior reversals cancel: samples equal the base draws exactly
    assert np.array_equal(draws, base)


def test_maf_round_trip_is_identity():
    model = Maf(3, 2, n_transforms=4, hidden_width=12, seed=12)
    theta = np.array([0.5, -0.3])
    rng = np.random.default_rng(12)
    x = model.sample(theta, 50, rng)
    z, _ = model.forward_to_base(x, theta)
    # invert again from the recovered base points
    cur = z
    for l in reversed(range(len(model.transforms))):
        v = model._invert_transform(model.transforms[l],
                                    cur, model._theta_internal(theta, 50))
        cur = v if l == 0 else v[:, ::-1]
    assert np.max(np.abs(cur - x)) < 1e-10


def test_maf_samples_match_quadrature_cdf():
    model = Maf(1, 2, n_transforms=5, hidden_width=16, seed=3)
    theta = np.array([0.3, -0.7])
    grid = np.linspace(-40.0, 40.0, 80001)
    q = np.exp(model.log_density(grid[:, None], theta))
    cdf = np.concatenate([[0.0], np.cumsum((q[1:] + q[:-1]) * 0.5 * np.diff(grid))])
    cdf /= cdf[-1]
    draws = np.sort(model.sample(theta, 100000, np.random.default_rng(17))[:, 0])
    f = np.interp(draws, grid, cdf)
    n = draws.size
    ks = max(np.max(np.abs(f - np.arange(1, n + 1) / n)),
             np.max(np.abs(f - np.arange(0, n) / n)))
    assert ks < 0.02


# -- growth certificates and invariants ------------------------------------------


def test_maf_growth_certificate():
    model = Maf(2, 2, n_transforms=3, hidden_width=12, seed=21)
    theta = np.array([0.4, -0.9])
    dirs = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, -0.8], [-0.8, 0.6]])
    radii = np.logspace(0.0, 6.0, 25)
    score_ratio, trace_ratio = [], []
    for r in radii:
        x = r * dirs
        s = np.linalg.norm(model.score_x(x, theta), axis=1)
        t = np.abs(model.hessian_trace_x(x, theta))
        envelope = 1.0 + r ** 2
        score_ratio.append(np.max(s) / envelope)
        trace_ratio.append(np.max(t) / envelope)
    score_ratio = np.array(score_ratio)
    trace_ratio = np.array(trace_ratio)
    assert np.all(np.isfinite(score_ratio)) and np.all(np.isfinite(trace_ratio))
    # constants fitted on ||x|| <= 1e3 certify the scan out to 1e6
    small = radii <= 1e3
    k1 = score_ratio[small].max()
    k2 = trace_ratio[small].max()
    assert np.all(score_ratio <= k1 * (1.0 + 1e-9))
    assert np.all(trace_ratio <= k2 * (1.0 + 1e-9))


def test_mdn_growth_certificate():
    model = Mdn(2, 2, components=3, hidden_width=12, seed=22)
    theta = np.array([0.2, 0.8])
    _, means, _ = model.mixture_params(theta, 1)
    max_mean = np.linalg.norm(means[0], axis=1).max()
    bound_const = model.score_growth_constant()
    for r in np.logspace(0.0, 6.0, 13):
        x = np.array([[r, 0.0], [0.0, -r]])
        s = np.linalg.norm(model.score_x(x, theta), axis=1)
        bound = bound_const * (np.linalg.norm(x, axis=1) + max_mean)
        assert np.all(s <= bound * (1.0 + 1e-12))


def test_mdn_responsibilities_sum_to_one():
    model = Mdn(3, 2, components=6, hidden_width=12, seed=23)
    rng = np.random.default_rng(23)
    rho = model.responsibilities(rng.normal(size=(8, 3)), rng.normal(size=2))
    assert np.all(rho >= 0.0)
    assert relerr(rho.sum(axis=1), np.ones(8)) < 1e-12


def test_log_density_raises_on_non_finite():
    mdn = Mdn(2, 2, components=2, hidden_width=8, seed=1)
    maf = Maf(2, 2, n_transforms=2, hidden_width=8, seed=1)
    bad = np.array([[np.inf, 0.0]])
    theta = np.zeros(2)
    with np.errstate(invalid="ignore"):
        with pytest.raises(FloatingPointError):
            mdn.log_density(bad, theta)
        with pytest.raises(FloatingPointError):
            maf.log_density(bad, theta)


# -- tape objectives (training path) ---------------------------------------------


def _build_models():
    rng = np.random.default_rng(31)
    theta_z = rng.normal(size=(16, 2))
    x_z = rng.normal(size=(16, 2))
    return [
        (Mdn(2, 2, components=3, hidden_width=8, seed=31), theta_z, x_z),
        (Maf(2, 2, n_transforms=2, hidden_width=8, seed=31), theta_z, x_z),
        (ExpFamEbm(2, 2, hidden_width=8, seed=31), theta_z, x_z),
    ]


def test_tape_loss_matches_numpy_loss():
    for model, theta_z, x_z in _build_models():
        tape = Tape()
        p = tape.leaf(model.param_vector())
        node = model.tape_loss(tape, p, theta_z, x_z)
        want = model.numpy_loss(theta_z, x_z)
        assert abs(float(node.value) - want) < 1e-10 * max(1.0, abs(want))


def test_tape_loss_gradient_matches_fd():
    rng = np.random.default_rng(37)
    for model, theta_z, x_z in _build_models():
        p0 = model.param_vector()
        _, g = grad(lambda tape, p: model.tape_loss(tape, p, theta_z, x_z), p0)

        def f(vec):
            model.set_param_vector(vec)
            out = model.numpy_loss(theta_z, x_z)
            model.set_param_vector(p0)
            return out

        for _ in range(3):
            v = rng.normal(size=p0.size)
            v /= np.linalg.norm(v)
            h = 1e-6
            fd = (f(p0 + h * v) - f(p0 - h * v)) / (2.0 * h)
            assert relerr(g @ v, fd) < 1e-4
