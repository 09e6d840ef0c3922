"""Versioned model files: one self-describing JSON document with the spec
echo, all fitted blocks in full precision (base64 little-endian float64),
the seed, and construction metadata."""

from __future__ import annotations

import base64
import json

import numpy as np

from .errors import DataError
from .io import atomic_write
from .losses import Loss
from .model import Gamma1, Margin, ModelSpec, ModelState
from .sideinfo import SideMetric

FORMAT_NAME = "matcomp-model"
FORMAT_VERSION = 1


def _enc_array(arr):
    if arr is None:
        return None
    a = np.ascontiguousarray(np.asarray(arr, dtype=np.float64)).astype("<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _dec_array(obj):
    if obj is None:
        return None
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(obj["shape"])


def _enc_metric(m: SideMetric):
    return {
        "dim": m.dim,
        "vectors": _enc_array(m.vectors),
        "values": _enc_array(m.values),
        "null_basis": _enc_array(m.null_basis),
        "metadata": m.metadata,
    }


def _dec_metric(obj):
    return SideMetric(
        int(obj["dim"]),
        _dec_array(obj["vectors"]),
        _dec_array(obj["values"]),
        _dec_array(obj["null_basis"]),
        metadata=obj.get("metadata") or {},
    )


def _enc_margin(m: Margin):
    return {"dim": m.dim, "metric": _enc_metric(m.metric), "transform": _enc_array(m.transform)}


def _dec_margin(obj):
    return Margin(int(obj["dim"]), _dec_metric(obj["metric"]), _dec_array(obj["transform"]))


def _enc_spec(spec: ModelSpec):
    return {
        "loss": {"kind": spec.loss.kind, "theta_cap": spec.loss.theta_cap},
        "n_rows": spec.n_rows,
        "n_cols": spec.n_cols,
        "lam_gamma": spec.lam_gamma,
        "lam_alpha": spec.lam_alpha,
        "lam_beta": spec.lam_beta,
        "intercept": spec.intercept,
        "row_effects": spec.row_effects,
        "col_effects": spec.col_effects,
        "row_features": _enc_array(spec.row_features),
        "col_features": _enc_array(spec.col_features),
        "row_margin": _enc_margin(spec.row_margin),
        "col_margin": _enc_margin(spec.col_margin),
        "metadata": spec.metadata,
    }


def _dec_spec(obj):
    return ModelSpec(
        loss=Loss(obj["loss"]["kind"], obj["loss"]["theta_cap"]),
        n_rows=int(obj["n_rows"]),
        n_cols=int(obj["n_cols"]),
        lam_gamma=float(obj["lam_gamma"]),
        lam_alpha=float(obj["lam_alpha"]),
        lam_beta=float(obj["lam_beta"]),
        intercept=bool(obj["intercept"]),
        row_effects=obj["row_effects"],
        col_effects=obj["col_effects"],
        row_features=_dec_array(obj["row_features"]),
        col_features=_dec_array(obj["col_features"]),
        row_margin=_dec_margin(obj["row_margin"]),
        col_margin=_dec_margin(obj["col_margin"]),
        metadata=obj.get("metadata") or {},
    )


def save_model(path, spec: ModelSpec, state: ModelState, seed=None, extra=None):
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "seed": seed,
        "spec": _enc_spec(spec),
        "state": {
            "mu": state.mu,
            "alpha": _enc_array(state.alpha),
            "beta": _enc_array(state.beta),
            "gamma1": {
                "left": _enc_array(state.gamma1.left),
                "values": _enc_array(state.gamma1.values),
                "right": _enc_array(state.gamma1.right),
            },
            "gamma2": _enc_array(state.gamma2),
            "gamma3": _enc_array(state.gamma3),
        },
        "extra": extra or {},
    }
    atomic_write(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_model(path):
    """Returns (spec, state, document) for a saved model file."""
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: not a model file ({e})") from None
    if doc.get("format") != FORMAT_NAME:
        raise DataError(f"{path}: not a {FORMAT_NAME} file")
    if doc.get("version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported model format version {doc.get('version')}")
    spec = _dec_spec(doc["spec"])
    st = doc["state"]
    g1 = st["gamma1"]
    state = ModelState(
        mu=float(st["mu"]),
        alpha=_dec_array(st["alpha"]),
        beta=_dec_array(st["beta"]),
        gamma1=Gamma1(_dec_array(g1["left"]), _dec_array(g1["values"]),
                      _dec_array(g1["right"])),
        gamma2=_dec_array(st["gamma2"]),
        gamma3=_dec_array(st["gamma3"]),
    )
    return spec, state, doc
