"""Stochastic multipath radio channel: Poisson-process path delays with
exponentially decaying complex Gaussian gains, observed through additive
complex noise in the frequency domain and summarised by log temporal moments
of the received power. Parameters are (log G0, log T, log nu, log sigma_Z^2).
"""

import numpy as np
from scipy import special

from ..posterior import GaussianPrior
from .base import Dataset, n_contaminated, record_calls

PRIOR_MEAN = np.array([-19.0, -19.0, 22.0, -22.0])
PRIOR_DIAG = np.array([1.0, 1.0, 1.0, 1.0])
BANDWIDTH_HZ = 4e9
K_POINTS = 801
DELTA_F_HZ = BANDWIDTH_HZ / (K_POINTS - 1)
N_MOMENTS = 3

# Delay window: the process has exponentially decaying gain variance, so
# truncating at 10x the prior-99.9% quantile of the decay constant T leaves
# a negligible tail.
T_MAX = float(np.exp(PRIOR_MEAN[1] + special.ndtri(0.999)
                     * np.sqrt(PRIOR_DIAG[1])))
DELAY_WINDOW = 10.0 * T_MAX


def turin_prior():
    return GaussianPrior(PRIOR_MEAN, np.diag(PRIOR_DIAG))


def _check_theta(theta):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (4,) or not np.all(np.isfinite(theta)):
        raise ValueError("theta must be 4 finite log parameters")
    return theta


def _complex_noise(sigma2, rng):
    return np.sqrt(sigma2 / 2.0) * (rng.standard_normal(K_POINTS)
                                    + 1j * rng.standard_normal(K_POINTS))


def _log_moments(freq_signal):
    """Log temporal moments of the received power from the frequency signal."""
    y_time = np.fft.ifft(freq_signal)
    dt = 1.0 / (K_POINTS * DELTA_F_HZ)
    t = np.arange(K_POINTS) * dt
    power = np.abs(y_time) ** 2
    return np.array([np.log(np.sum(power * t ** j) * dt)
                     for j in range(N_MOMENTS)])


def turin_simulate(theta, rng):
    """One realisation of the log temporal moments, shape (3,)."""
    record_calls()
    theta = _check_theta(theta)
    g0, t_decay, rate, sigma2 = np.exp(theta)
    noise = _complex_noise(sigma2, rng)
    n_paths = rng.poisson(rate * DELAY_WINDOW)
    delays = rng.uniform(0.0, DELAY_WINDOW, n_paths)
    variance = g0 * np.exp(-delays / t_decay) / rate
    gains = np.sqrt(variance / 2.0) * (rng.standard_normal(n_paths)
                                       + 1j * rng.standard_normal(n_paths))
    k = np.arange(K_POINTS)
    transfer = gains @ np.exp(-2j * np.pi * DELTA_F_HZ
                              * np.outer(delays, k))
    return _log_moments(transfer + noise)


def turin_noise_only(theta, rng):
    """Moments of a trace whose transfer function is zero (faulty antenna)."""
    record_calls()
    theta = _check_theta(theta)
    sigma2 = np.exp(theta[3])
    return _log_moments(_complex_noise(sigma2, rng))


def turin_observed(theta, n, eps, rng):
    """Observed moment rows with an eps fraction replaced by noise-only traces."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    k = n_contaminated(eps, n)
    flags = np.zeros(n, dtype=bool)
    if k:
        flags[rng.choice(n, size=k, replace=False)] = True
    x = np.stack([turin_noise_only(theta, rng) if flag
                  else turin_simulate(theta, rng) for flag in flags])
    meta = {"simulator": "turin", "theta": list(map(float, theta)),
            "contamination": {"kind": "noise-only", "eps": eps}}
    return Dataset(x=x, flags=flags, meta=meta)
