"""Surrogate fitting: NLL training for MDN/MAF, score matching for the EBM.

Both paths share one Adam loop with an 80/20 split, early stopping on the
validation loss and restoration of the best-validation parameters. Data are
standardised per dimension before training; the fitted model stores its
standardizers so later evaluations stay in original data coordinates.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import grad
from .rng import substream


class Standardizer:
    """Per-dimension affine map z = (x - shift) / scale."""

    def __init__(self, shift, scale):
        self.shift = np.asarray(shift, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)
        if np.any(self.scale <= 0.0):
            raise ValueError("scale must be positive")

    @classmethod
    def from_data(cls, data, floor=1e-8):
        data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        return cls(data.mean(axis=0), np.maximum(data.std(axis=0), floor))

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.shift) / self.scale

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * self.scale + self.shift

    def to_dict(self):
        return {"shift": self.shift.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["shift"]), np.asarray(d["scale"]))


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 1e-5
    batch_size: int = 128
    max_epochs: int = 1000
    val_fraction: float = 0.2
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.max_epochs,
               self.patience) <= 0 or self.weight_decay < 0:
            raise ValueError("training hyperparameters must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


class Adam:
    def __init__(self, dim, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0

    def step(self, p, g):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g ** 2
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _fit(model, theta_int, x_int, cfg):
    m = x_int.shape[0]
    if m < cfg.batch_size:
        raise ValueError(f"need at least batch_size={cfg.batch_size} pairs, got {m}")
    split_rng = substream(cfg.seed, "train", "split")
    shuffle_rng = substream(cfg.seed, "train", "shuffle")
    perm = split_rng.permutation(m)
    n_val = max(1, int(round(cfg.val_fraction * m)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    p = model.param_vector()
    opt = Adam(p.size, cfg.learning_rate)
    best_p = p.copy()
    best_val = np.inf
    best_epoch = -1
    wait = 0
    train_curve, val_curve = [], []
    for epoch in range(cfg.max_epochs):
        order = shuffle_rng.permutation(train_idx)
        batch_losses = []
        for b, start in enumerate(range(0, order.size, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            try:
                value, g = grad(
                    lambda tape, node: model.tape_loss(tape, node,
                                                       theta_int[idx], x_int[idx]),
                    p)
            except FloatingPointError as err:
                raise FloatingPointError(
                    f"non-finite loss for {model.family} at epoch {epoch}, "
                    f"batch {b}: {err}") from err
            g = g + cfg.weight_decay * p
            p = opt.step(p, g)
            batch_losses.append(value)
        model.set_param_vector(p)
        val = model.numpy_loss(theta_int[val_idx], x_int[val_idx])
        if not np.isfinite(val):
            raise FloatingPointError(
                f"non-finite validation loss for {model.family} at epoch {epoch}")
        train_curve.append(float(np.mean(batch_losses)))
        val_curve.append(float(val))
        if val < best_val:
            best_val = float(val)
            best_p = p.copy()
            best_epoch = epoch
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    model.set_param_vector(best_p)
    report = {
        "family": model.family,
        "epochs_run": len(val_curve),
        "best_epoch": best_epoch,
        "best_val_loss": best_val,
        "train_curve": train_curve,
        "val_curve": val_curve,
        "n_train": int(train_idx.size),
        "n_val": int(val_idx.size),
        "config": asdict(cfg),
    }
    if model.standardizer is not None:
        report["x_standardizer"] = model.standardizer.to_dict()
    if getattr(model, "theta_standardizer", None) is not None:
        report["theta_standardizer"] = model.theta_standardizer.to_dict()
    return report


def fit_nle(model, thetas, xs, cfg=None):
    """Fit MDN/MAF by negative log-likelihood on standardised (theta, x) pairs."""
    cfg = cfg or TrainConfig()
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    model.standardizer = Standardizer.from_data(xs)
    model.theta_standardizer = Standardizer.from_data(thetas)
    return _fit(model, model.theta_standardizer.transform(thetas),
                model.standardizer.transform(xs), cfg)


def fit_score_matching(model, thetas, xs, cfg=None, standardize_theta=False):
    """Fit the EBM by the score-matching objective mean[||score||^2 + 2 trace]."""
    cfg = cfg or TrainConfig()
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    model.standardizer = Standardizer.from_data(xs)
    theta_int = thetas
    if standardize_theta:
        model.theta_standardizer = Standardizer.from_data(thetas)
        theta_int = model.theta_standardizer.transform(thetas)
    return _fit(model, theta_int, model.standardizer.transform(xs), cfg)
