"""Coordinate-wise slice sampler with stepping-out and shrinkage.

Gradient-free, so it works directly on generalised posteriors over neural
surrogates. One sweep updates every coordinate in order; all randomness comes
from the caller's generator, which makes chains bit-reproducible.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass
class SliceConfig:
    widths: np.ndarray = field(default_factory=lambda: np.array([1.0]))
    max_stepout: int = 10
    warmup: int = 500
    thin: int = 1

    def __post_init__(self):
        self.widths = np.atleast_1d(np.asarray(self.widths, dtype=np.float64))
        if np.any(self.widths <= 0.0):
            raise ValueError("bracket widths must be positive")
        if self.thin < 1 or self.warmup < 0:
            raise ValueError("thin must be >= 1 and warmup >= 0")


def _update_coordinate(log_density, x, i, logf_x, width, max_stepout, rng):
    level = logf_x + np.log(rng.uniform())
    xi = x[i]

    def logf_at(value):
        x[i] = value
        out = log_density(x)
        return out if np.isfinite(out) else -np.inf

    # stepping out with a randomly allocated expansion budget keeps the
    # kernel exactly invariant even when the budget truncates the bracket
    left = xi - width * rng.uniform()
    right = left + width
    budget_left = int(np.floor(max_stepout * rng.uniform()))
    budget_right = max_stepout - 1 - budget_left
    lf_left = logf_at(left)
    while budget_left > 0 and lf_left > level:
        left -= width
        budget_left -= 1
        lf_left = logf_at(left)
    lf_right = logf_at(right)
    while budget_right > 0 and lf_right > level:
        right += width
        budget_right -= 1
        lf_right = logf_at(right)
    if budget_left == 0 and budget_right == 0 and \
            (lf_left > level or lf_right > level):
        warnings.warn("slice wider than the full step-out budget",
                      RuntimeWarning)
    for _ in range(1000):
        prop = left + (right - left) * rng.uniform()
        logf_prop = logf_at(prop)
        if logf_prop >= level:
            return prop, logf_prop
        if prop < xi:
            left = prop
        else:
            right = prop
    # the shrinkage interval collapsed numerically; keep the current point
    x[i] = xi
    return xi, logf_x


def slice_sample(log_density, init, count, cfg, rng):
    """Draw `count` post-warmup samples from density proportional to exp(log_density)."""
    x = np.array(init, dtype=np.float64).ravel().copy()
    d = x.size
    widths = np.broadcast_to(cfg.widths, (d,))
    logf = log_density(x)
    if not np.isfinite(logf):
        raise ValueError("log-density must be finite at the initial point")
    out = np.empty((count, d))
    total = cfg.warmup + count * cfg.thin
    kept = 0
    for sweep in range(total):
        for i in range(d):
            value, logf = _update_coordinate(log_density, x, i, logf,
                                             widths[i], cfg.max_stepout, rng)
            x[i] = value
        if sweep >= cfg.warmup and (sweep - cfg.warmup) % cfg.thin == 0:
            out[kept] = x
            kept += 1
    return out
