"""Evaluation metrics: squared MMD with a Gaussian kernel, posterior MSE,
empirical coverage, and the closed-form posterior-influence probe that sweeps
a single contaminant and tracks the KL divergence of the conjugate posterior.
"""

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .calibrate import credible_region_contains
from .nsm_loss import ConjCoefficients, conj_coefficient_rows
from .posterior import GaussianPosterior, nsm_conj_posterior


@dataclass
class Mmd2Config:
    lengthscale: float = None
    block: int = 256

    def __post_init__(self):
        if self.lengthscale is not None and self.lengthscale <= 0.0:
            raise ValueError("lengthscale must be positive")
        if self.block < 1:
            raise ValueError("block must be >= 1")


def median_lengthscale(pooled):
    """Median-heuristic kernel lengthscale: sqrt(median ||z_i - z_j||^2 / 2)."""
    z = np.atleast_2d(np.asarray(pooled, dtype=np.float64))
    gram = z @ z.T
    norms = np.diag(gram)
    sq = np.maximum(norms[:, None] + norms[None, :] - 2.0 * gram, 0.0)
    upper = sq[np.triu_indices(z.shape[0], k=1)]
    scale = float(np.sqrt(np.median(upper) / 2.0))
    if scale == 0.0:
        raise ValueError("median pairwise distance is zero")
    return scale


def _kernel_sum(a, b, lengthscale, block):
    """Sum of exp(-||a_i - b_j||^2 / 2 l^2) over all pairs, in blocks."""
    total = 0.0
    denom = 2.0 * lengthscale ** 2
    for i in range(0, a.shape[0], block):
        ai = a[i:i + block]
        for j in range(0, b.shape[0], block):
            d2 = ((ai[:, None, :] - b[None, j:j + block, :]) ** 2).sum(axis=2)
            total += float(np.exp(-d2 / denom).sum())
    return total


def mmd2(a, b, cfg=None):
    """Squared MMD V-statistic between two sample sets."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] < 1 or b.shape[0] < 1:
        raise ValueError("both sample sets must be non-empty")
    cfg = Mmd2Config() if cfg is None else cfg
    scale = cfg.lengthscale
    if scale is None:
        scale = median_lengthscale(np.vstack([a, b]))
    n1, n2 = a.shape[0], b.shape[0]
    saa = _kernel_sum(a, a, scale, cfg.block)
    sab = _kernel_sum(a, b, scale, cfg.block)
    sbb = _kernel_sum(b, b, scale, cfg.block)
    return saa / (n1 * n1) - 2.0 * (sab / (n1 * n2)) + sbb / (n2 * n2)


def mse_samples(samples, theta_star):
    """Monte Carlo E||theta - theta*||^2 over posterior draws."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    return float(((samples - theta_star) ** 2).sum(axis=1).mean())


def mse_conjugate(post, theta_star):
    """Closed form ||mu - theta*||^2 + tr(Sigma)."""
    diff = post.mean - np.asarray(theta_star, dtype=np.float64)
    return float(diff @ diff + np.trace(post.cov))


def gaussian_summary(samples):
    """Gaussian-ellipsoid summary of a sample posterior (mean, sample cov)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    return GaussianPosterior(mean=samples.mean(axis=0),
                             cov=np.cov(samples.T, ddof=1).reshape(
                                 samples.shape[1], samples.shape[1]),
                             beta=0.0, n=samples.shape[0],
                             provenance={"method": "sample-summary"})


def empirical_coverage(posteriors, theta_star, alpha=0.05):
    """Fraction of posteriors whose credible region contains theta*.

    Accepts Gaussian posteriors or raw sample arrays (summarised by their
    moments, mirroring the calibration target).
    """
    hits = []
    for post in posteriors:
        if isinstance(post, np.ndarray):
            post = gaussian_summary(post)
        hits.append(credible_region_contains(post, theta_star, alpha))
    if not hits:
        raise ValueError("at least one posterior required")
    return float(np.mean(hits))


def gaussian_kl(mean_p, cov_p, mean_q, cov_q):
    """KL(N(mean_p, cov_p) || N(mean_q, cov_q)), exactly 0 on identical inputs."""
    mean_p = np.asarray(mean_p, dtype=np.float64)
    mean_q = np.asarray(mean_q, dtype=np.float64)
    cov_p = np.atleast_2d(np.asarray(cov_p, dtype=np.float64))
    cov_q = np.atleast_2d(np.asarray(cov_q, dtype=np.float64))
    if np.array_equal(mean_p, mean_q) and np.array_equal(cov_p, cov_q):
        return 0.0
    chol_p = np.linalg.cholesky(cov_p)
    chol_q = linalg.cho_factor(cov_q, lower=True)
    d = mean_p.size
    trace = float(np.trace(linalg.cho_solve(chol_q, cov_p)))
    diff = mean_p - mean_q
    quad = float(diff @ linalg.cho_solve(chol_q, diff))
    logdet_p = 2.0 * float(np.log(np.diag(chol_p)).sum())
    logdet_q = 2.0 * float(np.log(np.diag(chol_q[0])).sum())
    return 0.5 * (trace - d + quad + logdet_q - logdet_p)


def pif_kl_probe(data, model, weight, prior, beta, grid, replace_index=0,
                 theta_standardizer=None):
    """KL(clean posterior || contaminated posterior) along a contaminant grid.

    One observed row is replaced by each grid point and the conjugate
    posterior recomputed; the weight object stays fixed to its clean fit.
    Returns one KL value per grid row.
    """
    x = np.atleast_2d(np.asarray(getattr(data, "x", data), dtype=np.float64))
    grid = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    n = x.shape[0]
    j = replace_index
    rows = conj_coefficient_rows(x, model, weight)
    clean = rows.mean()
    post = nsm_conj_posterior(prior, clean, beta, n,
                              theta_standardizer=theta_standardizer)
    curve = np.zeros(grid.shape[0])
    for g, point in enumerate(grid):
        if np.array_equal(point, x[j]):
            row_a, row_b, row_c = rows.a[j], rows.b[j], rows.c[j]
        else:
            single = conj_coefficient_rows(point[None, :], model, weight)
            row_a, row_b, row_c = single.a[0], single.b[0], single.c[0]
        coeffs = ConjCoefficients(
            a=clean.a + (row_a - rows.a[j]) / n,
            b=clean.b + (row_b - rows.b[j]) / n,
            c=clean.c + float(row_c - rows.c[j]) / n,
            n=n)
        contaminated = nsm_conj_posterior(
            prior, coeffs, beta, n, theta_standardizer=theta_standardizer)
        curve[g] = gaussian_kl(post.mean, post.cov, contaminated.mean,
                               contaminated.cov)
    return curve
