"""Learning-rate selection targeting nominal frequentist coverage.

Two routes share the same stochastic-approximation update on log beta. The
conjugate route rebuilds each bootstrap posterior in closed form from
count-weighted coefficient rows. The MCMC route runs one chain, caches the
per-observation losses, and retargets the chain across trial rates by
self-normalised importance weighting, refreshing the chain whenever the
effective sample size degrades.
"""

import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import linalg, special

from .nsm_loss import conj_coefficient_rows, nsm_loss, per_point_terms
from .posterior import (nsm_conj_posterior, nsm_sample, theta_hat_closed_form,
                        theta_hat_optimize)
from .rng import substream


class EssCollapseError(RuntimeError):
    """Importance weights degenerate even after a chain refresh."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class CalibConfig:
    beta0: float
    alpha: float = 0.05
    n_bootstrap: int = 100
    n_steps: int = 20
    m_draws: int = 500
    ess_floor: float = 0.30
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.beta0 <= 0.0:
            raise ValueError("beta0 must be positive")
        if min(self.n_bootstrap, self.n_steps, self.m_draws) < 1:
            raise ValueError("n_bootstrap, n_steps and m_draws must be >= 1")
        if not 0.0 < self.ess_floor < 1.0:
            raise ValueError("ess_floor must lie in (0, 1)")

    @property
    def clamp(self):
        return self.beta0 / 100.0


@lru_cache(maxsize=None)
def chi2_quantile(p, df):
    """Inverse chi-square CDF by bisecting the regularised incomplete gamma."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    lo, hi = 0.0, float(df) + 1.0
    while special.gammainc(df / 2.0, hi / 2.0) < p:
        hi *= 2.0
    while hi - lo > 1e-12 * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if special.gammainc(df / 2.0, mid / 2.0) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def credible_region_contains(post, theta, alpha):
    """True iff theta lies in the (1 - alpha) Gaussian credible ellipsoid."""
    diff = np.asarray(theta, dtype=np.float64) - post.mean
    chol = linalg.cho_factor(post.cov, lower=True)
    d2 = float(diff @ linalg.cho_solve(chol, diff))
    return d2 <= chi2_quantile(1.0 - alpha, post.mean.size)


def beta_update(beta, coverage, t, alpha, clamp):
    """One log-space stochastic-approximation step, kappa_t = 10/(t+10)."""
    increment = 10.0 / (t + 10.0) * (coverage - (1.0 - alpha))
    if increment == 0.0:
        return max(beta, clamp)
    return max(float(np.exp(np.log(beta) + increment)), clamp)


def bootstrap_coverage(rows, theta_hat, prior, beta, cfg, step_tag,
                       theta_standardizer=None):
    """Fraction of bootstrap posteriors whose credible region holds theta_hat."""
    n = rows.c.shape[0]
    contained = []
    for b in range(cfg.n_bootstrap):
        rng = substream(cfg.seed, "calibrate", step_tag, b)
        counts = rng.multinomial(n, np.full(n, 1.0 / n))
        try:
            post = nsm_conj_posterior(prior, rows.with_counts(counts), beta,
                                      n, theta_standardizer=theta_standardizer)
        except np.linalg.LinAlgError:
            continue
        contained.append(credible_region_contains(post, theta_hat, cfg.alpha))
    if not contained:
        raise RuntimeError("all bootstrap posteriors were degenerate")
    return float(np.mean(contained))


def calibrate_conjugate(data, model, weight, prior, cfg,
                        theta_standardizer=None):
    """Closed-form bootstrap calibration. Returns (beta, trace rows).

    Trace rows are (step, beta, coverage, ess); ess is NaN on this route.
    The last row reports the coverage realised at the returned beta.
    """
    rows = conj_coefficient_rows(data, model, weight)
    theta_hat = theta_hat_closed_form(rows.mean())
    if theta_standardizer is not None:
        theta_hat = theta_standardizer.inverse(theta_hat)
    beta = cfg.beta0
    trace = []
    for t in range(1, cfg.n_steps + 1):
        coverage = bootstrap_coverage(rows, theta_hat, prior, beta, cfg, t,
                                      theta_standardizer)
        trace.append((t - 1, beta, coverage, float("nan")))
        beta = beta_update(beta, coverage, t, cfg.alpha, cfg.clamp)
    coverage = bootstrap_coverage(rows, theta_hat, prior, beta, cfg,
                                  cfg.n_steps + 1, theta_standardizer)
    trace.append((cfg.n_steps, beta, coverage, float("nan")))
    return beta, trace


def is_weights(l_cache, counts, beta, beta_curr):
    """Self-normalised weights retargeting a chain sampled at beta_curr.

    l_cache is the (draws, observations) matrix of per-observation losses;
    counts are the bootstrap multiplicities.
    """
    log_w = -beta * l_cache @ counts + beta_curr * l_cache.sum(axis=1)
    log_w -= log_w.max()
    w = np.exp(log_w)
    return w / w.sum()


def effective_sample_size(weights):
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    return float(total * total / (w @ w))


def weighted_quantile(values, weights, q):
    """Smallest value whose cumulative normalised weight reaches q."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values)
    cum = np.cumsum(np.asarray(weights, dtype=np.float64)[order])
    cum /= cum[-1]
    idx = min(int(np.searchsorted(cum, q, side="left")), values.size - 1)
    return float(values[order[idx]])


def _is_step(draws, l_cache, beta, beta_curr, theta_hat, cfg, step_tag):
    """One reweighted-bootstrap coverage estimate from a cached chain."""
    n = l_cache.shape[1]
    contained = []
    ess_values = []
    for b in range(cfg.n_bootstrap):
        rng = substream(cfg.seed, "calibrate-mcmc", step_tag, b)
        counts = rng.multinomial(n, np.full(n, 1.0 / n))
        w = is_weights(l_cache, counts, beta, beta_curr)
        ess_values.append(effective_sample_size(w))
        mean = w @ draws
        centred = draws - mean
        cov = np.einsum("i,ij,ik->jk", w, centred, centred)
        try:
            chol = linalg.cho_factor(cov, lower=True)
        except np.linalg.LinAlgError:
            continue
        d2 = np.einsum("ij,ij->i", centred,
                       linalg.cho_solve(chol, centred.T).T)
        tau = weighted_quantile(d2, w, 1.0 - cfg.alpha)
        diff = theta_hat - mean
        contained.append(float(diff @ linalg.cho_solve(chol, diff)) <= tau)
    if not contained:
        raise RuntimeError("all reweighted bootstrap posteriors degenerate")
    return float(np.mean(contained)), float(np.mean(ess_values))


def calibrate_mcmc_is(data, model, weight, prior, cfg, sampler_cfg=None):
    """MCMC + importance-reweighting calibration. Returns (beta, trace rows).

    Trace rows are (step, beta, coverage, mean ESS / draws). The chain is
    refreshed at the trial rate when mean ESS drops below the floor; a
    collapse after refresh aborts with the trace attached.
    """
    x = np.atleast_2d(np.asarray(getattr(data, "x", data), dtype=np.float64))
    theta_hat = theta_hat_optimize(
        lambda th: nsm_loss(th, x, model, weight), prior.mean)

    def run_chain(beta_at, tag):
        rng = substream(cfg.seed, "calibrate-mcmc", "chain", tag)
        chain = nsm_sample(prior, x, model, weight, beta_at, cfg.m_draws,
                           rng, cfg=sampler_cfg)
        cache = np.stack([per_point_terms(th, x, model, weight)
                          for th in chain])
        return chain, cache

    beta_curr = cfg.beta0
    draws, l_cache = run_chain(beta_curr, 0)
    beta = cfg.beta0
    trace = []
    for t in range(1, cfg.n_steps + 2):
        step_tag = t if t <= cfg.n_steps else cfg.n_steps + 1
        coverage, mean_ess = _is_step(draws, l_cache, beta, beta_curr,
                                      theta_hat, cfg, step_tag)
        if mean_ess < cfg.ess_floor * cfg.m_draws:
            beta_curr = beta
            draws, l_cache = run_chain(beta_curr, t)
            coverage, mean_ess = _is_step(draws, l_cache, beta, beta_curr,
                                          theta_hat, cfg, step_tag)
            if mean_ess < cfg.ess_floor * cfg.m_draws:
                trace.append((t - 1, beta, coverage,
                              mean_ess / cfg.m_draws))
                raise EssCollapseError(
                    f"mean ESS {mean_ess:.1f} below floor after refresh",
                    trace)
        trace.append((t - 1, beta, coverage, mean_ess / cfg.m_draws))
        if t <= cfg.n_steps:
            beta = beta_update(beta, coverage, t, cfg.alpha, cfg.clamp)
    return beta, trace


def trace_to_csv(trace, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "beta", "coverage", "ess"])
        writer.writerows(trace)


def trace_from_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [(int(r[0]), float(r[1]), float(r[2]), float(r[3]))
                for r in reader]
