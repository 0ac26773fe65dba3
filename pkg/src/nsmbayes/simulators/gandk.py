"""The g-and-k distribution: a quantile-defined family sampled by pushing
standard normal draws through its generator. Parameters live on the
unconstrained scale (theta_1, log theta_2, theta_3, log theta_4); scale and
kurtosis are recovered by exponentiation.
"""

import numpy as np

from ..posterior import GaussianPrior
from .base import Dataset, n_contaminated, record_calls

THETA_STAR = np.array([1.0, 0.5, 1.0, -1.0])
PRIOR_MEAN = np.array([0.0, 0.7, 0.0, -1.5])
PRIOR_DIAG = np.array([5.0, 0.5, 4.0, 0.25])


def gandk_prior():
    return GaussianPrior(PRIOR_MEAN, np.diag(PRIOR_DIAG))


def _check_theta(theta):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (4,) or not np.all(np.isfinite(theta)):
        raise ValueError("theta must be 4 finite unconstrained parameters")
    return theta


def gandk_generator(theta, u):
    """Push base draws u through the quantile generator."""
    theta = _check_theta(theta)
    loc, scale = theta[0], np.exp(theta[1])
    skew, kurt = theta[2], np.exp(theta[3])
    ratio = (1.0 - np.exp(-skew * u)) / (1.0 + np.exp(-skew * u))
    return loc + scale * (1.0 + 0.8 * ratio) * (1.0 + u ** 2) ** kurt * u


def gandk_simulate(theta, count, rng):
    """iid draws, shape (count, 1)."""
    record_calls(count)
    u = rng.standard_normal(count)
    return gandk_generator(theta, u).reshape(-1, 1)


def gandk_contaminate(samples, theta, eps, shift, rng):
    """Replace an eps fraction of rows by fresh shifted draws.

    Returns (samples, flags); clean rows are copied untouched.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    n = samples.shape[0]
    k = n_contaminated(eps, n)
    out = samples.copy()
    flags = np.zeros(n, dtype=bool)
    if k:
        idx = rng.choice(n, size=k, replace=False)
        out[idx] = gandk_simulate(theta, k, rng) + shift
        flags[idx] = True
    return out, flags


def gandk_observed(theta, n, eps, shift, rng):
    """Huber-contaminated observed dataset: (1-eps) P_theta + eps (P_theta + shift)."""
    clean = gandk_simulate(theta, n, rng)
    x, flags = gandk_contaminate(clean, theta, eps, shift, rng)
    meta = {"simulator": "gandk", "theta": list(map(float, theta)),
            "contamination": {"kind": "huber-shift", "eps": eps,
                              "shift": shift}}
    return Dataset(x=x, flags=flags, meta=meta)
