"""Stochastic discrete-time SIR with binomial transitions and Poisson-observed
case counts, summarised to (attack rate, peak timing, peak height).
Parameters live on the unconstrained scale (log transmission, log recovery,
logit reporting, log initial infected).
"""

import numpy as np
from scipy import special

from ..posterior import GaussianPrior
from .base import Dataset, n_contaminated, record_calls

THETA_STAR = np.array([np.log(0.6), np.log(0.15), special.logit(0.6),
                       np.log(20.0)])
PRIOR_MEAN = np.array([np.log(0.5), np.log(0.2), special.logit(0.5),
                       np.log(20.0)])
PRIOR_DIAG = np.array([0.25, 0.25, 1.0, 0.49])
N_POPULATION = 1000
T_HORIZON = 150
DT = 1.0


def sir_prior():
    return GaussianPrior(PRIOR_MEAN, np.diag(PRIOR_DIAG))


def _rates(theta, n_pop):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (4,) or not np.all(np.isfinite(theta)):
        raise ValueError("theta must be 4 finite unconstrained parameters")
    transmission, recovery = np.exp(theta[0]), np.exp(theta[1])
    reporting = special.expit(theta[2])
    i0 = int(round(np.exp(theta[3])))
    if i0 > n_pop:
        raise ValueError("initial infected exceeds the population")
    return transmission, recovery, reporting, i0


def sir_simulate(theta, rng, n_pop=N_POPULATION, t_horizon=T_HORIZON, dt=DT,
                 return_states=False):
    """One reported-case trajectory y_1..y_T (ints).

    With return_states=True also returns the (T+1, 3) array of (S, I, R).
    """
    record_calls()
    transmission, recovery, reporting, i0 = _rates(theta, n_pop)
    s, i, r = n_pop - i0, i0, 0
    p_rec = -np.expm1(-recovery * dt)
    y = np.zeros(t_horizon, dtype=np.int64)
    states = np.zeros((t_horizon + 1, 3), dtype=np.int64)
    states[0] = (s, i, r)
    for t in range(t_horizon):
        p_inf = -np.expm1(-transmission * (i / n_pop) * dt)
        d_i = rng.binomial(s, p_inf)
        d_r = rng.binomial(i, p_rec)
        s, i, r = s - d_i, i + d_i - d_r, r + d_r
        y[t] = rng.poisson(reporting * d_i)
        states[t + 1] = (s, i, r)
    if return_states:
        return y, states
    return y


def sir_simulate_many(theta, count, rng, n_pop=N_POPULATION,
                      t_horizon=T_HORIZON, dt=DT):
    """`count` trajectories at a shared theta, vectorised across runs."""
    record_calls(count)
    transmission, recovery, reporting, i0 = _rates(theta, n_pop)
    s = np.full(count, n_pop - i0, dtype=np.int64)
    i = np.full(count, i0, dtype=np.int64)
    p_rec = -np.expm1(-recovery * dt)
    y = np.zeros((count, t_horizon), dtype=np.int64)
    for t in range(t_horizon):
        p_inf = -np.expm1(-transmission * (i / n_pop) * dt)
        d_i = rng.binomial(s, p_inf)
        d_r = rng.binomial(i, p_rec)
        s = s - d_i
        i = i + d_i - d_r
        y[:, t] = rng.poisson(reporting * d_i)
    return y


def sir_summaries(y, n_pop=N_POPULATION):
    """(attack rate, normalised peak timing, normalised peak height)."""
    y = np.asarray(y, dtype=np.float64)
    batch = np.atleast_2d(y)
    t = batch.shape[1]
    out = np.column_stack([
        batch.sum(axis=1) / n_pop,
        batch.argmax(axis=1) / (t - 1),
        batch.max(axis=1) / n_pop,
    ])
    return out[0] if y.ndim == 1 else out


def sir_undercount(y, retention, rng):
    """Binomial thinning of one trajectory."""
    if not 0.0 < retention <= 1.0:
        raise ValueError("retention must lie in (0, 1]")
    return rng.binomial(np.asarray(y, dtype=np.int64), retention)


def sir_cauchy_contaminate(summaries, eps, scale, rng):
    """Add componentwise Cauchy noise to an eps fraction of summary rows."""
    summaries = np.atleast_2d(np.asarray(summaries, dtype=np.float64))
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    n = summaries.shape[0]
    k = n_contaminated(eps, n)
    out = summaries.copy()
    flags = np.zeros(n, dtype=bool)
    if k:
        idx = rng.choice(n, size=k, replace=False)
        out[idx] += scale * rng.standard_cauchy((k, summaries.shape[1]))
        flags[idx] = True
    return out, flags


def sir_observed_undercount(theta, n, eps, retention, rng,
                            n_pop=N_POPULATION, t_horizon=T_HORIZON):
    """Observed summaries with an eps fraction of trajectories thinned."""
    trajectories = sir_simulate_many(theta, n, rng, n_pop=n_pop,
                                     t_horizon=t_horizon)
    k = n_contaminated(eps, n)
    flags = np.zeros(n, dtype=bool)
    if k:
        idx = rng.choice(n, size=k, replace=False)
        for j in idx:
            trajectories[j] = sir_undercount(trajectories[j], retention, rng)
        flags[idx] = True
    meta = {"simulator": "sir", "theta": list(map(float, theta)),
            "contamination": {"kind": "undercount", "eps": eps,
                              "retention": retention}}
    return Dataset(x=sir_summaries(trajectories, n_pop=n_pop), flags=flags,
                   meta=meta)


def sir_observed_cauchy(theta, n, eps, scale, rng, n_pop=N_POPULATION,
                        t_horizon=T_HORIZON):
    """Observed summaries with Cauchy noise on an eps fraction of rows."""
    trajectories = sir_simulate_many(theta, n, rng, n_pop=n_pop,
                                     t_horizon=t_horizon)
    x, flags = sir_cauchy_contaminate(sir_summaries(trajectories, n_pop=n_pop),
                                      eps, scale, rng)
    meta = {"simulator": "sir", "theta": list(map(float, theta)),
            "contamination": {"kind": "cauchy", "eps": eps, "scale": scale}}
    return Dataset(x=x, flags=flags, meta=meta)
