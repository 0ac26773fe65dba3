"""Config-driven experiment runner: simulate -> train -> calibrate -> infer -> metrics.

Each stage reads its inputs from the output directory of the previous stages
and validates their manifests, so a trained model can be reused across many
observed datasets without touching the simulator again.  All randomness is
drawn from counter-based substreams keyed by (master seed, stage, task), so
results are bit-identical for a fixed seed regardless of worker count.
"""

import argparse
import configparser
import hashlib
import json
import multiprocessing
import os
import subprocess
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .calibrate import (
    CalibConfig,
    EssCollapseError,
    calibrate_conjugate,
    calibrate_mcmc_is,
    credible_region_contains,
    trace_to_csv,
)
from .metrics import mse_conjugate, mse_samples
from .nsm_loss import conj_coefficient_rows
from .posterior import (
    GaussianPosterior,
    nle_sample,
    nsm_conj_posterior,
    nsm_sample,
    samples_from_csv,
    samples_to_csv,
)
from .rng import substream
from .sampler import SliceConfig
from .simulators import (
    ManifestError,
    gandk_observed,
    gandk_prior,
    gandk_simulate,
    load_bank,
    load_dataset,
    save_bank,
    save_dataset,
    sir_observed_cauchy,
    sir_observed_undercount,
    sir_prior,
    sir_simulate,
    sir_summaries,
    turin_observed,
    turin_prior,
    turin_simulate,
)
from .simulators import gandk as _gandk
from .simulators import sir as _sir
from .surrogates import ExpFamEbm, Maf, Mdn, load_model, save_model
from .train import TrainConfig, fit_nle, fit_score_matching
from .weights import ConstantWeight, ImqWeight

STAGES = ("simulate", "train", "calibrate", "infer", "metrics")
METHODS = ("nle", "nsm", "nsm-conj")
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_MANIFEST = 4
_BANK_CHUNK = 2048


class ConfigError(ValueError):
    pass


# -- experiment configuration -------------------------------------------------


@dataclass
class ExperimentConfig:
    seed: int
    method: str
    simulator: str
    m: int
    n: int
    theta_star: np.ndarray
    contamination: dict
    family: str
    surrogate: dict
    train: TrainConfig
    zeta: float
    weight_estimator: str
    beta0: float
    alpha: float
    calibration: dict
    draws: int
    warmup: int
    metrics: tuple
    out: str
    sim_constants: dict = field(default_factory=dict)


_SIM_KINDS = {
    "gandk": ("huber-shift", "none"),
    "sir": ("undercount", "cauchy", "none"),
    "turin": ("noise-only", "none"),
}
_THETA_STAR_DEFAULTS = {
    "gandk": _gandk.THETA_STAR,
    "sir": _sir.THETA_STAR,
    "turin": None,  # no published value; the prior mean stands in
}
_PRIORS = {"gandk": gandk_prior, "sir": sir_prior, "turin": turin_prior}


def _get(parser, section, key, conv, default=None, required=False):
    if not parser.has_option(section, key):
        if required:
            raise ConfigError(f"missing [{section}] {key}")
        return default
    raw = parser.get(section, key)
    try:
        return conv(raw)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad [{section}] {key} = {raw!r}: {err}") from err


def _floats(raw):
    return np.array([float(v) for v in raw.split()])


def _bool(raw):
    lowered = raw.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError("expected a boolean")


def parse_config(path, seed_override=None, out_override=None):
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if not parser.read(path):
        raise ConfigError(f"config file not found: {path}")

    seed = seed_override
    if seed is None:
        seed = _get(parser, "experiment", "seed", int, required=True)
    method = _get(parser, "experiment", "method", str, required=True)
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
    out = out_override or _get(parser, "experiment", "output", str)

    simulator = _get(parser, "simulator", "id", str, required=True)
    if simulator not in _SIM_KINDS:
        raise ConfigError(f"unknown simulator {simulator!r}")
    sim_constants = {}
    if simulator == "sir":
        sim_constants["n_pop"] = _get(parser, "simulator", "n_population",
                                      int, default=_sir.N_POPULATION)
        sim_constants["t_horizon"] = _get(parser, "simulator", "t_horizon",
                                          int, default=_sir.T_HORIZON)

    m = _get(parser, "bank", "m", int, required=True)
    n = _get(parser, "observed", "n", int, required=True)
    if m < 1 or n < 1:
        raise ConfigError("bank m and observed n must be positive")

    theta_star = _get(parser, "observed", "theta_star", _floats)
    if theta_star is None:
        theta_star = _THETA_STAR_DEFAULTS[simulator]
        if theta_star is None:
            theta_star = _PRIORS[simulator]().mean
    theta_star = np.asarray(theta_star, dtype=np.float64)
    if theta_star.shape != (4,):
        raise ConfigError("theta_star must have four entries")

    kind = _get(parser, "observed", "contamination", str, default="none")
    if kind not in _SIM_KINDS[simulator]:
        raise ConfigError(
            f"contamination {kind!r} not supported by {simulator!r}")
    contamination = {"kind": kind,
                     "eps": _get(parser, "observed", "eps", float, 0.0)}
    if not 0.0 <= contamination["eps"] <= 1.0:
        raise ConfigError("eps must lie in [0, 1]")
    if kind == "huber-shift":
        contamination["shift"] = _get(parser, "observed", "shift", float,
                                      required=True)
    elif kind == "undercount":
        contamination["retention"] = _get(parser, "observed", "retention",
                                          float, required=True)
    elif kind == "cauchy":
        contamination["scale"] = _get(parser, "observed", "scale", float,
                                      required=True)

    family = _get(parser, "surrogate", "family", str, required=True)
    allowed = {"nle": ("maf", "mdn"), "nsm": ("maf", "mdn", "ebm"),
               "nsm-conj": ("ebm",)}[method]
    if family not in allowed:
        raise ConfigError(
            f"method {method!r} requires surrogate family in {allowed}")
    surrogate = {"hidden_width": _get(parser, "surrogate", "hidden_width",
                                      int, default=128)}
    if family == "maf":
        surrogate["n_transforms"] = _get(parser, "surrogate", "n_transforms",
                                         int, default=5)
    if family == "mdn":
        surrogate["components"] = _get(parser, "surrogate", "components",
                                       int, default=10)
    standardize_theta = _get(parser, "surrogate", "standardize_theta", _bool,
                             default=False)
    surrogate["standardize_theta"] = standardize_theta

    train = TrainConfig(
        learning_rate=_get(parser, "surrogate", "learning_rate", float, 5e-4),
        weight_decay=_get(parser, "surrogate", "weight_decay", float, 1e-5),
        batch_size=_get(parser, "surrogate", "batch_size", int, 128),
        max_epochs=_get(parser, "surrogate", "max_epochs", int, 1000),
        val_fraction=_get(parser, "surrogate", "val_fraction", float, 0.2),
        patience=_get(parser, "surrogate", "patience", int, 20),
        seed=seed)

    zeta = _get(parser, "weight", "zeta", float, default=1.0)
    weight_estimator = _get(parser, "weight", "estimator", str,
                            default="auto")
    if weight_estimator not in ("auto", "median-mad", "mcd", "constant"):
        raise ConfigError(f"unknown weight estimator {weight_estimator!r}")

    beta0 = _get(parser, "calibration", "beta0", float)
    if method != "nle" and beta0 is None:
        raise ConfigError(f"method {method!r} requires [calibration] beta0")
    alpha = _get(parser, "calibration", "alpha", float, default=0.05)
    calibration = {
        "n_bootstrap": _get(parser, "calibration", "n_bootstrap", int, 100),
        "n_steps": _get(parser, "calibration", "n_steps", int, 20),
        "m_draws": _get(parser, "calibration", "m_draws", int, 500),
        "ess_floor": _get(parser, "calibration", "ess_floor", float, 0.30),
    }

    draws = _get(parser, "sampler", "draws", int, default=500)
    warmup = _get(parser, "sampler", "warmup", int, default=500)
    if draws < 1 or warmup < 0:
        raise ConfigError("draws must be >= 1 and warmup >= 0")

    metrics = tuple(_get(parser, "metrics", "list", str,
                         default="mse coverage").split())
    for name in metrics:
        if name not in ("mse", "coverage"):
            raise ConfigError(f"unknown metric {name!r}")

    return ExperimentConfig(
        seed=seed, method=method, simulator=simulator, m=m, n=n,
        theta_star=theta_star, contamination=contamination, family=family,
        surrogate=surrogate, train=train, zeta=zeta,
        weight_estimator=weight_estimator, beta0=beta0, alpha=alpha,
        calibration=calibration, draws=draws, warmup=warmup, metrics=metrics,
        out=out, sim_constants=sim_constants)


def config_echo(cfg):
    doc = {}
    for key, value in vars(cfg).items():
        if isinstance(value, np.ndarray):
            doc[key] = value.tolist()
        elif isinstance(value, TrainConfig):
            doc[key] = {k: v for k, v in vars(value).items()}
        else:
            doc[key] = value
    return doc


# -- simulation bank ----------------------------------------------------------


def _bank_chunk(args):
    simulator, seed, chunk_index, count, constants = args
    rng = substream(seed, "simulate", "bank", chunk_index)
    prior = _PRIORS[simulator]()
    thetas = prior.sample(count, rng)
    rows = []
    for theta in thetas:
        if simulator == "gandk":
            rows.append(gandk_simulate(theta, 1, rng)[0])
        elif simulator == "sir":
            y = sir_simulate(theta, rng, **constants)
            rows.append(sir_summaries(y, n_pop=constants.get(
                "n_pop", _sir.N_POPULATION)))
        else:
            rows.append(turin_simulate(theta, rng))
    return thetas, np.asarray(rows)


def build_bank(cfg, workers):
    jobs = []
    start = 0
    index = 0
    while start < cfg.m:
        count = min(_BANK_CHUNK, cfg.m - start)
        jobs.append((cfg.simulator, cfg.seed, index, count,
                     cfg.sim_constants))
        start += count
        index += 1
    if workers > 1 and len(jobs) > 1:
        with multiprocessing.Pool(min(workers, len(jobs))) as pool:
            parts = pool.map(_bank_chunk, jobs)
        # worker processes kept their own call tallies; mirror them here
        from .simulators import record_calls
        record_calls(cfg.m)
    else:
        parts = [_bank_chunk(job) for job in jobs]
    thetas = np.vstack([p[0] for p in parts])
    xs = np.vstack([p[1] for p in parts])
    return thetas, xs


def build_observed(cfg):
    rng = substream(cfg.seed, "simulate", "observed")
    kind = cfg.contamination["kind"]
    eps = cfg.contamination["eps"]
    if cfg.simulator == "gandk":
        shift = cfg.contamination.get("shift", 0.0) if kind != "none" else 0.0
        return gandk_observed(cfg.theta_star, cfg.n,
                              eps if kind != "none" else 0.0, shift, rng)
    if cfg.simulator == "sir":
        consts = cfg.sim_constants
        if kind == "cauchy":
            return sir_observed_cauchy(cfg.theta_star, cfg.n, eps,
                                       cfg.contamination["scale"], rng,
                                       **consts)
        retention = cfg.contamination.get("retention", 1.0)
        return sir_observed_undercount(
            cfg.theta_star, cfg.n, eps if kind != "none" else 0.0,
            retention if kind != "none" else 1.0, rng, **consts)
    return turin_observed(cfg.theta_star, cfg.n,
                          eps if kind != "none" else 0.0, rng)


# -- shared stage helpers -----------------------------------------------------


def _require(out, names, producer):
    for name in names:
        if not os.path.exists(os.path.join(out, name)):
            raise ManifestError(
                f"{name} not found in {out}; run the {producer} stage first")


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _check_pairing(cfg, *metas):
    for meta in metas:
        got = meta.get("simulator")
        if got != cfg.simulator:
            raise ManifestError(
                f"artifact was produced for simulator {got!r}, config says "
                f"{cfg.simulator!r}")


def build_weight(cfg, x):
    if cfg.weight_estimator == "constant":
        return ConstantWeight()
    method = None if cfg.weight_estimator == "auto" else cfg.weight_estimator
    return ImqWeight.from_data(x, zeta=cfg.zeta, method=method,
                               rng=substream(cfg.seed, "weight"))


def _prior(cfg):
    return _PRIORS[cfg.simulator]()


def _slice_config(cfg):
    return SliceConfig(widths=_prior(cfg).marginal_sds(), warmup=cfg.warmup)


def _theta_names(dim):
    return [f"theta_{j}" for j in range(dim)]


# -- stages -------------------------------------------------------------------


def stage_simulate(cfg, out, workers):
    thetas, xs = build_bank(cfg, workers)
    save_bank(os.path.join(out, "bank"), thetas, xs,
              {"simulator": cfg.simulator, "seed": cfg.seed,
               "constants": cfg.sim_constants})
    observed = build_observed(cfg)
    save_dataset(os.path.join(out, "observed"), observed)
    return ["bank.csv", "bank.json", "observed.csv", "observed.json"]


def stage_train(cfg, out, workers):
    _require(out, ["bank.csv", "bank.json"], "simulate")
    thetas, xs, manifest = load_bank(os.path.join(out, "bank"))
    _check_pairing(cfg, manifest)
    kwargs = dict(cfg.surrogate)
    standardize_theta = kwargs.pop("standardize_theta")
    makers = {"ebm": ExpFamEbm, "maf": Maf, "mdn": Mdn}
    model = makers[cfg.family](x_dim=xs.shape[1], theta_dim=thetas.shape[1],
                               seed=cfg.seed, **kwargs)
    if cfg.family == "ebm":
        report = fit_score_matching(model, thetas, xs, cfg.train,
                                    standardize_theta=standardize_theta)
    else:
        report = fit_nle(model, thetas, xs, cfg.train)
    save_model(model, os.path.join(out, "model.json"),
               meta={"simulator": cfg.simulator, "m": int(thetas.shape[0]),
                     "bank_sha256": _sha256(os.path.join(out, "bank.csv"))})
    with open(os.path.join(out, "train_report.json"), "w") as fh:
        json.dump(report, fh)
    return ["model.json", "train_report.json"]


def stage_calibrate(cfg, out, workers):
    _require(out, ["observed.csv", "observed.json"], "simulate")
    doc = {"method": cfg.method, "alpha": cfg.alpha, "fallback": False}
    trace = []
    if cfg.method == "nle":
        doc["beta"] = 1.0
        trace = [(0, 1.0, float("nan"), float("nan"))]
    else:
        _require(out, ["model.json"], "train")
        observed = load_dataset(os.path.join(out, "observed"))
        model, meta = load_model(os.path.join(out, "model.json"))
        _check_pairing(cfg, observed.meta, meta)
        weight = build_weight(cfg, observed.x)
        calib = CalibConfig(beta0=cfg.beta0, alpha=cfg.alpha, seed=cfg.seed,
                            **cfg.calibration)
        if cfg.method == "nsm-conj":
            beta, trace = calibrate_conjugate(
                observed.x, model, weight, _prior(cfg), calib,
                theta_standardizer=model.theta_standardizer)
        else:
            beta, trace = calibrate_mcmc_is(
                observed.x, model, weight, _prior(cfg), calib,
                sampler_cfg=_slice_config(cfg))
        doc["beta0"] = cfg.beta0
        doc["final_coverage"] = float(trace[-1][2])
        if trace[-1][2] == 0.0:
            # the point estimate never entered any bootstrap region (the
            # closed-form theta_hat can be unstable); keep the initial rate
            doc["fallback"] = True
            beta = cfg.beta0
        doc["beta"] = float(beta)
    trace_to_csv(trace, os.path.join(out, "calibration_trace.csv"))
    with open(os.path.join(out, "beta.json"), "w") as fh:
        json.dump(doc, fh, indent=2)
    return ["calibration_trace.csv", "beta.json"]


def stage_infer(cfg, out, workers):
    _require(out, ["observed.csv", "observed.json"], "simulate")
    _require(out, ["model.json"], "train")
    _require(out, ["beta.json"], "calibrate")
    observed = load_dataset(os.path.join(out, "observed"))
    model, meta = load_model(os.path.join(out, "model.json"))
    _check_pairing(cfg, observed.meta, meta)
    with open(os.path.join(out, "beta.json")) as fh:
        beta_doc = json.load(fh)
    if beta_doc["method"] != cfg.method:
        raise ManifestError(
            f"calibration was produced for method {beta_doc['method']!r}, "
            f"config says {cfg.method!r}")
    beta = beta_doc["beta"]
    prior = _prior(cfg)
    n = observed.n
    provenance = {"method": cfg.method, "simulator": cfg.simulator,
                  "seed": cfg.seed}
    if cfg.method == "nsm-conj":
        weight = build_weight(cfg, observed.x)
        rows = conj_coefficient_rows(observed.x, model, weight)
        post = nsm_conj_posterior(prior, rows.mean(), beta, n,
                                  theta_standardizer=model.theta_standardizer,
                                  provenance=provenance)
        chol = np.linalg.cholesky(post.cov)
        z = substream(cfg.seed, "infer", "draws").standard_normal(
            (cfg.draws, post.mean.size))
        samples = post.mean + z @ chol.T
    else:
        rng = substream(cfg.seed, "infer", "chain")
        if cfg.method == "nle":
            samples = nle_sample(prior, observed.x, model, cfg.draws, rng,
                                 cfg=_slice_config(cfg))
        else:
            weight = build_weight(cfg, observed.x)
            samples = nsm_sample(prior, observed.x, model, weight, beta,
                                 cfg.draws, rng, cfg=_slice_config(cfg))
        mean = samples.mean(axis=0)
        centred = samples - mean
        cov = centred.T @ centred / (samples.shape[0] - 1)
        provenance["summary"] = "sample-moments"
        post = GaussianPosterior(mean=mean, cov=cov, beta=float(beta), n=n,
                                 provenance=provenance)
    post.save(os.path.join(out, "posterior.json"))
    samples_to_csv(samples, _theta_names(samples.shape[1]),
                   os.path.join(out, "posterior_samples.csv"))
    return ["posterior.json", "posterior_samples.csv"]


def stage_metrics(cfg, out, workers):
    _require(out, ["posterior.json", "posterior_samples.csv"], "infer")
    _require(out, ["observed.json"], "simulate")
    post = GaussianPosterior.load(os.path.join(out, "posterior.json"))
    if post.provenance.get("simulator") != cfg.simulator:
        raise ManifestError(
            f"posterior was produced for simulator "
            f"{post.provenance.get('simulator')!r}, config says "
            f"{cfg.simulator!r}")
    observed = load_dataset(os.path.join(out, "observed"))
    report = {"method": cfg.method, "simulator": cfg.simulator,
              "seed": cfg.seed, "n": observed.n, "beta": post.beta,
              "theta_star": cfg.theta_star.tolist(),
              "n_contaminated": int(observed.flags.sum())}
    if "mse" in cfg.metrics:
        if cfg.method == "nsm-conj":
            report["mse"] = mse_conjugate(post, cfg.theta_star)
        else:
            _, samples = samples_from_csv(
                os.path.join(out, "posterior_samples.csv"))
            report["mse"] = mse_samples(samples, cfg.theta_star)
    if "coverage" in cfg.metrics:
        report["covered"] = bool(
            credible_region_contains(post, cfg.theta_star, cfg.alpha))
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        json.dump(report, fh, indent=2)
    with open(os.path.join(out, "metrics.csv"), "w") as fh:
        keys = sorted(report)
        fh.write(",".join(keys) + "\n")
        fh.write(",".join(str(report[k]) for k in keys) + "\n")
    return ["metrics.json", "metrics.csv"]


_STAGE_FUNCS = {
    "simulate": stage_simulate,
    "train": stage_train,
    "calibrate": stage_calibrate,
    "infer": stage_infer,
    "metrics": stage_metrics,
}


# -- driver -------------------------------------------------------------------


def _git_describe():
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=os.path.dirname(os.path.abspath(__file__)),
            capture_output=True, text=True, timeout=10)
        if result.returncode == 0:
            return result.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _append_manifest(out, record):
    with open(os.path.join(out, "manifest.jsonl"), "a") as fh:
        fh.write(json.dumps(record) + "\n")


def run_stages(cfg, out, stages, workers, config_path):
    os.makedirs(out, exist_ok=True)
    git = _git_describe()
    echo = config_echo(cfg)
    for name in stages:
        started = time.time()
        try:
            outputs = _STAGE_FUNCS[name](cfg, out, workers)
        except Exception as err:
            print(f"stage {name} failed: {err}", file=sys.stderr)
            raise
        _append_manifest(out, {
            "stage": name,
            "utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
            "wall_s": round(time.time() - started, 3),
            "git": git,
            "seed": cfg.seed,
            "workers": workers,
            "outputs": outputs,
            "config_sha256": _sha256(config_path),
            "config": echo,
        })


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nsmbayes",
        description="simulation-based robust posterior experiments")
    parser.add_argument("command", choices=("run",) + STAGES)
    parser.add_argument("--config", required=True, help="experiment config")
    parser.add_argument("--out", help="experiment directory")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="worker processes for simulation")
    parser.add_argument("--stage", choices=STAGES,
                        help="with `run`: execute a single stage")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = parse_config(args.config, seed_override=args.seed,
                           out_override=args.out)
        out = cfg.out
        if not out:
            raise ConfigError("no output directory: set --out or "
                              "[experiment] output")
        if args.command == "run":
            stages = (args.stage,) if args.stage else STAGES
        else:
            stages = (args.command,)
        run_stages(cfg, out, stages, args.workers, args.config)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ManifestError as err:
        print(f"manifest mismatch: {err}", file=sys.stderr)
        return EXIT_MANIFEST
    except (FloatingPointError, np.linalg.LinAlgError, EssCollapseError,
            ValueError, ZeroDivisionError, RuntimeError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
