"""Inverse multiquadric data weights with robust location/scatter estimation.

w(x) = (1 + r(x)^2)^(-1/zeta) with r the Mahalanobis radius under a robust
precision matrix, so outliers are smoothly downweighted and grad(w^2) stays
uniformly bounded. Location/scatter come from FAST-MCD or a coordinate-wise
median/MAD fallback.
"""

import warnings

import numpy as np
from scipy import stats

SCATTER_FLOOR = 1e-8
MAD_TO_SD = 1.4826


def default_method(n, d):
    return "mcd" if d <= 10 and n >= 50 else "median-mad"


def robust_location_scatter(data, method="mcd", n_starts=200, max_csteps=30,
                            rng=None):
    """Robust (location, scatter) estimate; degenerate scatter is floored."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    n, d = data.shape
    if method == "median-mad":
        if n < 2:
            raise ValueError("median-mad needs n >= 2")
        loc = np.median(data, axis=0)
        mad = np.median(np.abs(data - loc), axis=0)
        scatter = np.diag((MAD_TO_SD * mad) ** 2)
    elif method == "mcd":
        if n < d + 2:
            raise ValueError("mcd needs n >= d + 2")
        loc, scatter = _fast_mcd(data, n_starts, max_csteps, rng)
    else:
        raise ValueError(f"unknown method {method!r}")
    return loc, _floor_scatter(scatter)


def _floor_scatter(scatter):
    vals = np.linalg.eigvalsh(0.5 * (scatter + scatter.T))
    if vals.min() < SCATTER_FLOOR:
        warnings.warn("degenerate scatter estimate; flooring diagonal",
                      RuntimeWarning)
        scatter = scatter + (SCATTER_FLOOR - min(vals.min(), 0.0)) * np.eye(
            scatter.shape[0])
        vals = np.linalg.eigvalsh(0.5 * (scatter + scatter.T))
        if vals.min() < SCATTER_FLOOR:
            scatter = scatter + SCATTER_FLOOR * np.eye(scatter.shape[0])
    return scatter


def _subset_stats(data, idx):
    sub = data[idx]
    loc = sub.mean(axis=0)
    diff = sub - loc
    cov = diff.T @ diff / len(idx)
    return loc, cov


def _fast_mcd(data, n_starts, max_csteps, rng):
    """FAST-MCD: elemental starts, C-steps to convergence, keep lowest det."""
    rng = np.random.default_rng(0) if rng is None else rng
    n, d = data.shape
    h = int(np.ceil((n + d + 1) / 2))
    best_det = np.inf
    best = None
    # deterministic median/MAD start lands in the global basin on clean data;
    # elemental random starts cover contaminated configurations
    med = np.median(data, axis=0)
    mad = MAD_TO_SD * np.median(np.abs(data - med), axis=0)
    starts = []
    if np.all(mad > 0.0):
        starts.append((med, np.diag(mad ** 2)))
    for _ in range(n_starts):
        idx = rng.choice(n, size=d + 1, replace=False)
        loc, cov = _subset_stats(data, idx)
        # expand singular elemental subsets until the covariance is invertible
        while np.linalg.matrix_rank(cov) < d and len(idx) < n:
            extra = rng.choice(np.setdiff1d(np.arange(n), idx), size=1)
            idx = np.concatenate([idx, extra])
            loc, cov = _subset_stats(data, idx)
        if np.linalg.matrix_rank(cov) < d:
            break  # all data lie in a lower-dimensional subspace
        starts.append((loc, cov))
    for loc, cov in starts:
        prev_det = np.inf
        for _ in range(max_csteps):
            dist = _mahalanobis_sq(data, loc, cov)
            idx = np.argsort(dist)[:h]
            loc, cov = _subset_stats(data, idx)
            det = np.linalg.det(cov)
            if det <= 0.0 or prev_det - det <= 1e-12 * max(prev_det, 1.0):
                break
            prev_det = det
        det = np.linalg.det(cov)
        if det < best_det:
            best_det = det
            best = (loc, cov)
    if best is None:
        # degenerate data; fall back to plain mean/covariance and let the
        # caller's floor handle the singular scatter
        loc = data.mean(axis=0)
        diff = data - loc
        return loc, diff.T @ diff / n
    loc, cov = best
    alpha = h / n
    q = stats.chi2.ppf(alpha, d)
    cov = cov * (alpha / stats.chi2.cdf(q, d + 2))
    # one-step reweighting (standard FAST-MCD finish): restores efficiency
    # lost by the raw half-sample estimate
    cut = stats.chi2.ppf(0.975, d)
    keep = np.flatnonzero(_mahalanobis_sq(data, loc, cov) <= cut)
    if keep.size > d + 1:
        loc, cov = _subset_stats(data, keep)
        cov = cov * (stats.chi2.cdf(cut, d) / stats.chi2.cdf(cut, d + 2))
    return loc, cov


def _mahalanobis_sq(data, loc, cov):
    diff = data - loc
    sol = np.linalg.solve(cov, diff.T).T
    return np.einsum("nd,nd->n", diff, sol)


class ImqWeight:
    """(1 + ||x - loc||^2_prec)^(-1/zeta); holds zeta, location, precision."""

    def __init__(self, location, precision, zeta=1.0):
        self.location = np.asarray(location, dtype=np.float64)
        precision = np.asarray(precision, dtype=np.float64)
        self.precision = 0.5 * (precision + precision.T)
        vals = np.linalg.eigvalsh(self.precision)
        if vals.min() <= 0.0:
            raise ValueError("precision matrix must be positive definite")
        if zeta <= 0.0:
            raise ValueError("zeta must be positive")
        self.zeta = float(zeta)

    @classmethod
    def from_data(cls, data, zeta=1.0, method=None, rng=None):
        data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        n, d = data.shape
        if method is None:
            method = default_method(n, d)
        loc, scatter = robust_location_scatter(data, method=method, rng=rng)
        return cls(loc, np.linalg.inv(scatter), zeta=zeta)

    def _radius_sq(self, x):
        diff = np.atleast_2d(np.asarray(x, dtype=np.float64)) - self.location
        return np.einsum("nd,nd->n", diff @ self.precision, diff), diff

    def weight(self, x):
        r2, _ = self._radius_sq(x)
        out = (1.0 + r2) ** (-1.0 / self.zeta)
        return out if np.ndim(x) > 1 else out[0]

    def weight_sq(self, x):
        r2, _ = self._radius_sq(x)
        out = (1.0 + r2) ** (-2.0 / self.zeta)
        return out if np.ndim(x) > 1 else out[0]

    def weight_sq_grad(self, x):
        r2, diff = self._radius_sq(x)
        coef = -(4.0 / self.zeta) * (1.0 + r2) ** (-2.0 / self.zeta - 1.0)
        out = coef[:, None] * (diff @ self.precision)
        return out if np.ndim(x) > 1 else out[0]

    def sup_grad_bound(self):
        """Uniform bound on ||grad w^2||: (4/zeta) lmax(prec) / sqrt(lmin(prec))."""
        vals = np.linalg.eigvalsh(self.precision)
        return (4.0 / self.zeta) * vals.max() / np.sqrt(vals.min())


class ConstantWeight:
    """w identically 1: plain (unweighted) score matching."""

    def weight(self, x):
        out = np.ones(np.atleast_2d(x).shape[0])
        return out if np.ndim(x) > 1 else out[0]

    def weight_sq(self, x):
        return self.weight(x)

    def weight_sq_grad(self, x):
        out = np.zeros(np.atleast_2d(x).shape)
        return out if np.ndim(x) > 1 else out[0]
