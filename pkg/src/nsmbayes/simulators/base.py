"""Shared simulator infrastructure: datasets with contamination flags, the
simulator call counter backing the amortisation contract, and bank files
(CSV of draws plus a JSON manifest).
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

_CALLS = {"count": 0}

VALID_KINDS = ("huber-shift", "undercount", "cauchy", "noise-only")


class ManifestError(RuntimeError):
    """A bank or dataset file disagrees with its manifest."""


def record_calls(n=1):
    _CALLS["count"] += int(n)


def simulator_calls():
    return _CALLS["count"]


def reset_simulator_calls():
    _CALLS["count"] = 0


@dataclass
class ContaminationSpec:
    kind: str
    eps: float
    shift: float = 0.0
    retention: float = 0.5
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in VALID_KINDS:
            raise ValueError(f"unknown contamination kind {self.kind!r}")
        if not 0.0 <= self.eps <= 1.0:
            raise ValueError("eps must lie in [0, 1]")
        if not 0.0 < self.retention <= 1.0:
            raise ValueError("retention must lie in (0, 1]")

    def to_dict(self):
        return {"kind": self.kind, "eps": self.eps, "shift": self.shift,
                "retention": self.retention, "scale": self.scale}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Dataset:
    """Observed rows plus per-row contamination flags and provenance."""

    x: np.ndarray
    flags: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.flags = np.asarray(self.flags, dtype=bool)
        if self.flags.shape != (self.x.shape[0],):
            raise ValueError("one flag per row required")

    @property
    def n(self):
        return self.x.shape[0]


def n_contaminated(eps, n):
    return int(round(eps * n))


def save_dataset(stem, dataset):
    """Write <stem>.csv (x columns + contaminated flag) and <stem>.json."""
    stem = str(stem)
    d = dataset.x.shape[1]
    with open(stem + ".csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x_{j}" for j in range(d)] + ["contaminated"])
        for row, flag in zip(dataset.x, dataset.flags):
            writer.writerow(list(row) + [int(flag)])
    with open(stem + ".json", "w") as fh:
        json.dump({"n": dataset.n, "x_cols": d, "meta": dataset.meta}, fh,
                  indent=2)


def load_dataset(stem):
    stem = str(stem)
    with open(stem + ".json") as fh:
        manifest = json.load(fh)
    with open(stem + ".csv", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = list(reader)
    if len(rows) != manifest["n"]:
        raise ManifestError(
            f"dataset has {len(rows)} rows, manifest says {manifest['n']}")
    x = np.array([[float(v) for v in r[:-1]] for r in rows])
    flags = np.array([bool(int(r[-1])) for r in rows])
    return Dataset(x=x, flags=flags, meta=manifest["meta"])


def save_bank(stem, thetas, xs, manifest):
    """Write a simulation bank: <stem>.csv of (theta, x) rows + <stem>.json."""
    stem = str(stem)
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if thetas.shape[0] != xs.shape[0]:
        raise ValueError("theta and x row counts differ")
    manifest = dict(manifest)
    manifest.update({"count": thetas.shape[0], "theta_cols": thetas.shape[1],
                     "x_cols": xs.shape[1]})
    with open(stem + ".csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"theta_{j}" for j in range(thetas.shape[1])]
                        + [f"x_{j}" for j in range(xs.shape[1])])
        for t, x in zip(thetas, xs):
            writer.writerow(list(t) + list(x))
    with open(stem + ".json", "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_bank(stem):
    stem = str(stem)
    with open(stem + ".json") as fh:
        manifest = json.load(fh)
    with open(stem + ".csv", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = np.array([[float(v) for v in r] for r in reader])
    if rows.shape[0] != manifest["count"]:
        raise ManifestError(
            f"bank has {rows.shape[0]} rows, manifest says "
            f"{manifest['count']}")
    k = manifest["theta_cols"]
    return rows[:, :k], rows[:, k:], manifest
