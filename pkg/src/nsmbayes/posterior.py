"""Posterior assembly: conjugate Gaussian closed form, slice-sampled
generalised posteriors, NLE baselines, and the ridge point estimate.

The conjugate path consumes the quadratic-loss coefficients: posterior
precision = prior precision + 2 beta n A_n, posterior mean solves the
shifted linear system. Everything else is a log-density handed to the slice
sampler.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .nsm_loss import nsm_loss
from .sampler import SliceConfig, slice_sample

MAX_CONDITION = 1e12


class GaussianPrior:
    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=np.float64)
        cov = np.asarray(cov, dtype=np.float64)
        self.cov = 0.5 * (cov + cov.T)
        vals = np.linalg.eigvalsh(self.cov)
        if vals.min() <= 0.0:
            raise ValueError("prior covariance must be positive definite")
        # cho_factor leaves junk in the unused triangle; keep a clean factor
        # for sampling.
        self._chol = linalg.cho_factor(self.cov, lower=True)
        self._chol_lower = np.linalg.cholesky(self.cov)
        self._logdet = 2.0 * np.log(np.diag(self._chol_lower)).sum()

    @property
    def dim(self):
        return self.mean.size

    def marginal_sds(self):
        return np.sqrt(np.diag(self.cov))

    def log_density(self, theta):
        diff = np.asarray(theta, dtype=np.float64) - self.mean
        quad = diff @ linalg.cho_solve(self._chol, diff)
        return float(-0.5 * (quad + self._logdet + self.dim * np.log(2.0 * np.pi)))

    def solve_cov(self, rhs):
        return linalg.cho_solve(self._chol, rhs)

    def sample(self, count, rng):
        z = rng.standard_normal((count, self.dim))
        return self.mean + z @ self._chol_lower.T


@dataclass
class GaussianPosterior:
    mean: np.ndarray
    cov: np.ndarray
    beta: float
    n: int
    provenance: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "mean": self.mean.tolist(),
            "cov": self.cov.tolist(),
            "beta": self.beta,
            "n": self.n,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(mean=np.asarray(d["mean"]), cov=np.asarray(d["cov"]),
                   beta=float(d["beta"]), n=int(d["n"]),
                   provenance=dict(d.get("provenance", {})))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _spd_solve_with_diagnostics(matrix, what):
    cond = np.linalg.cond(matrix)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise np.linalg.LinAlgError(
            f"{what} is near-singular (condition number {cond:.3e})")
    try:
        chol = linalg.cho_factor(matrix, lower=True)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError(f"{what} is not positive definite") from err
    return chol


def nsm_conj_posterior(prior, coeffs, beta, n, theta_standardizer=None,
                       provenance=None):
    """Closed-form Gaussian posterior from the quadratic-loss coefficients.

    If the coefficients were assembled in a standardised theta space, pass the
    model's theta standardizer; the prior is mapped in and the result mapped
    back (the affine image of a Gaussian is Gaussian).
    """
    if beta <= 0.0:
        raise ValueError("beta must be positive")
    mean0, cov0 = prior.mean, prior.cov
    if theta_standardizer is not None:
        scale = theta_standardizer.scale
        mean0 = theta_standardizer.transform(mean0)
        cov0 = cov0 / np.outer(scale, scale)
    k = mean0.size
    chol0 = _spd_solve_with_diagnostics(cov0, "prior covariance")
    prior_precision = linalg.cho_solve(chol0, np.eye(k))
    precision = prior_precision + 2.0 * beta * n * coeffs.a
    chol = _spd_solve_with_diagnostics(precision, "posterior precision")
    cov = linalg.cho_solve(chol, np.eye(k))
    cov = 0.5 * (cov + cov.T)
    mean = linalg.cho_solve(chol, linalg.cho_solve(chol0, mean0)
                            - 2.0 * beta * n * coeffs.b)
    if theta_standardizer is not None:
        scale = theta_standardizer.scale
        mean = theta_standardizer.inverse(mean)
        cov = cov * np.outer(scale, scale)
    return GaussianPosterior(mean=mean, cov=cov, beta=float(beta), n=int(n),
                             provenance=dict(provenance or {}))


def ridge_parameter(coeffs):
    k = coeffs.b.size
    return 1e-2 * np.trace(coeffs.a) / k + 1e-12


def theta_hat_closed_form(coeffs, ridge=None):
    """Ridge-stabilised minimiser of the quadratic loss: -(A + ridge I)^-1 B."""
    lam = ridge_parameter(coeffs) if ridge is None else float(ridge)
    k = coeffs.b.size
    return -np.linalg.solve(coeffs.a + lam * np.eye(k), coeffs.b)


def theta_hat_optimize(loss, init, budget=5000):
    """Derivative-free Nelder-Mead minimisation for non-conjugate surrogates."""
    init = np.asarray(init, dtype=np.float64)
    if not np.isfinite(loss(init)):
        raise ValueError("loss must be finite at the initial point")
    res = optimize.minimize(loss, init, method="Nelder-Mead",
                            options={"maxfev": int(budget), "xatol": 1e-8,
                                     "fatol": 1e-12})
    return np.asarray(res.x)


def _resolve_slice_config(prior, cfg):
    if cfg is None:
        return SliceConfig(widths=prior.marginal_sds())
    return cfg


def nsm_sample(prior, data, model, weight, beta, count, rng, cfg=None,
               init=None):
    """Slice-sample the generalised posterior exp(-beta n L_NSM) * prior."""
    x = np.atleast_2d(np.asarray(getattr(data, "x", data), dtype=np.float64))
    n = x.shape[0]
    cfg = _resolve_slice_config(prior, cfg)
    init = prior.mean if init is None else np.asarray(init, dtype=np.float64)

    def log_target(theta):
        return prior.log_density(theta) - beta * n * nsm_loss(theta, x, model,
                                                              weight)

    return slice_sample(log_target, init, count, cfg, rng)


def nle_sample(prior, data, model, count, rng, cfg=None, init=None):
    """Slice-sample the NLE posterior prod_i q(x_i | theta) * prior."""
    x = np.atleast_2d(np.asarray(getattr(data, "x", data), dtype=np.float64))
    if x.size == 0:
        n = 0
    else:
        n = x.shape[0]
    cfg = _resolve_slice_config(prior, cfg)
    init = prior.mean if init is None else np.asarray(init, dtype=np.float64)

    def log_target(theta):
        out = prior.log_density(theta)
        if n:
            out += float(model.log_density(x, theta).sum())
        return out

    return slice_sample(log_target, init, count, cfg, rng)


def samples_to_csv(samples, names, path):
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if len(names) != samples.shape[1]:
        raise ValueError("one column name per parameter required")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        writer.writerows(samples.tolist())


def samples_from_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        names = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    return names, np.asarray(rows, dtype=np.float64)
