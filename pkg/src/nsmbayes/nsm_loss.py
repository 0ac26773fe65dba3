"""Weighted neural score-matching loss and its quadratic form for the EBM.

The empirical loss over observed data x_1..x_n is

    L(theta) = (1/n) sum_j [ w(x_j)^2 ||s_j||^2
                             + 2 grad(w^2)(x_j) . s_j
                             + 2 w(x_j)^2 tr H_j ]

with s_j the model's input score and tr H_j its input-Hessian trace at x_j.
For the exponential-family EBM the same loss is exactly quadratic in theta;
`conj_coefficients` assembles (A_n, B_n, C_n) from the feature derivatives so
the two code paths can cross-check each other and the conjugate posterior can
consume the coefficients directly.
"""

from dataclasses import dataclass

import numpy as np


def _data_matrix(data):
    x = getattr(data, "x", data)
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def _score_and_trace(model, x, theta):
    if hasattr(model, "score_and_hessian_diag_x"):
        score, hdiag = model.score_and_hessian_diag_x(x, theta)
        return score, hdiag.sum(axis=-1)
    return model.score_x(x, theta), model.hessian_trace_x(x, theta)


def per_point_terms(theta, data, model, weight):
    """Per-datum loss contributions (the L_ij cache of the MCMC recalibration)."""
    x = _data_matrix(data)
    theta = np.asarray(theta, dtype=np.float64)
    with np.errstate(all="ignore"):
        score, trace = _score_and_trace(model, x, theta)
        w2 = weight.weight_sq(x)
        gw2 = weight.weight_sq_grad(x)
        terms = (w2 * (score ** 2).sum(axis=1)
                 + 2.0 * (gw2 * score).sum(axis=1)
                 + 2.0 * w2 * trace)
    bad = np.flatnonzero(~np.isfinite(terms))
    if bad.size:
        raise FloatingPointError(
            f"non-finite loss contribution at datum {bad[0]}")
    return terms


def nsm_loss(theta, data, model, weight):
    """Empirical weighted score-matching loss (pairwise-summed mean)."""
    return float(np.mean(per_point_terms(theta, data, model, weight)))


@dataclass
class ConjCoefficients:
    """L(theta) = theta' A theta + 2 theta' B + C, averaged over n points."""

    a: np.ndarray
    b: np.ndarray
    c: float
    n: int

    def loss(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        return float(theta @ self.a @ theta + 2.0 * theta @ self.b + self.c)


@dataclass
class ConjRows:
    """Per-datum coefficient contributions: column j averages to (A, B, C).

    Count-weighted averages of these rows give the coefficients of any
    bootstrap resample without touching the model again, and swapping a
    single row implements the point-replacement probes.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def with_counts(self, counts):
        counts = np.asarray(counts, dtype=np.float64)
        n = counts.sum()
        return ConjCoefficients(
            a=np.einsum("j,jkl->kl", counts, self.a) / n,
            b=counts @ self.b / n,
            c=float(counts @ self.c / n),
            n=int(round(n)))

    def mean(self):
        return self.with_counts(np.ones(self.c.shape[0]))


def conj_coefficient_rows(data, model, weight):
    """Per-datum pieces of the quadratic-loss coefficients."""
    x = _data_matrix(data)
    feats = model.ebm_features(x)
    w2 = weight.weight_sq(x)
    gw2 = weight.weight_sq_grad(x)
    jac_t, jac_b = feats["jac_T"], feats["jac_b"]
    a = np.einsum("n,nkd,nld->nkl", w2, jac_t, jac_t)
    div = np.einsum("nkd,nd->nk", jac_t, gw2) + w2[:, None] * feats["trace_T"]
    b = np.einsum("n,nkd,nd->nk", w2, jac_t, jac_b) + div
    c = (w2 * (jac_b ** 2).sum(axis=1) + 2.0 * (gw2 * jac_b).sum(axis=1)
         + 2.0 * w2 * feats["trace_b"])
    return ConjRows(a=0.5 * (a + a.swapaxes(1, 2)), b=b, c=c)


def conj_coefficients(data, model, weight):
    """Quadratic-loss coefficients for an exponential-family EBM.

    When the model standardises theta, the coefficients live in that internal
    theta parameterisation; the posterior module handles the affine map back.
    """
    x = _data_matrix(data)
    feats = model.ebm_features(x)
    w2 = weight.weight_sq(x)
    gw2 = weight.weight_sq_grad(x)
    n = x.shape[0]
    jac_t, jac_b = feats["jac_T"], feats["jac_b"]
    a = np.einsum("n,nkd,nld->kl", w2, jac_t, jac_t) / n
    # divergence of each row of w^2 grad T: grad(w^2).(grad T)_k + w^2 tr hess T_k
    div = np.einsum("nkd,nd->nk", jac_t, gw2) + w2[:, None] * feats["trace_T"]
    b = (np.einsum("n,nkd,nd->k", w2, jac_t, jac_b) + div.sum(axis=0)) / n
    c = float(np.mean(w2 * (jac_b ** 2).sum(axis=1)
                      + 2.0 * (gw2 * jac_b).sum(axis=1)
                      + 2.0 * w2 * feats["trace_b"]))
    return ConjCoefficients(a=0.5 * (a + a.T), b=b, c=c, n=n)
