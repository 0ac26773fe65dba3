"""Neural density and energy surrogates over simulator outputs."""

import json

import numpy as np

from ..train import Standardizer
from .ebm import ExpFamEbm
from .maf import Maf
from .mdn import Mdn

__all__ = ["ExpFamEbm", "Maf", "Mdn", "load_model", "save_model"]


def _init_spec(model):
    if model.family == "ebm":
        return {"x_dim": model.x_dim, "theta_dim": model.theta_dim,
                "hidden_width": model.hidden_width,
                "t_hidden": list(model.t_net.hidden_widths)}
    if model.family == "maf":
        net = model.transforms[0]
        return {"x_dim": model.x_dim, "theta_dim": model.theta_dim,
                "n_transforms": len(model.transforms),
                "hidden_width": net.hidden_widths[0],
                "hidden_layers": len(net.hidden_widths)}
    if model.family == "mdn":
        return {"x_dim": model.x_dim, "theta_dim": model.theta_dim,
                "components": model.components,
                "hidden_width": model.net.hidden_widths[0],
                "var_floor": model.var_floor}
    raise ValueError(f"unknown surrogate family {model.family!r}")


def save_model(model, path, meta=None):
    """Serialise a fitted surrogate (architecture + weights) to JSON."""
    doc = {
        "family": model.family,
        "init": _init_spec(model),
        "params": model.param_vector().tolist(),
        "standardizer": (model.standardizer.to_dict()
                         if model.standardizer is not None else None),
        "theta_standardizer": (model.theta_standardizer.to_dict()
                               if model.theta_standardizer is not None
                               else None),
        "meta": dict(meta or {}),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_model(path):
    """Rebuild a surrogate saved by `save_model`. Returns (model, meta)."""
    with open(path) as fh:
        doc = json.load(fh)
    families = {"ebm": ExpFamEbm, "maf": Maf, "mdn": Mdn}
    if doc["family"] not in families:
        raise ValueError(f"unknown surrogate family {doc['family']!r}")
    model = families[doc["family"]](**doc["init"])
    model.set_param_vector(np.asarray(doc["params"], dtype=np.float64))
    if doc["standardizer"] is not None:
        model.standardizer = Standardizer.from_dict(doc["standardizer"])
    if doc["theta_standardizer"] is not None:
        model.theta_standardizer = Standardizer.from_dict(
            doc["theta_standardizer"])
    return model, doc["meta"]
