"""Versioned model files.

Layout::

    b"FRODAM"  u32 version  u64 header_length  JSON header (utf-8)
    FRODA1 matrix blocks, in the order listed by header["matrices"]

Vectors are stored as single-column matrices.
"""

import io
import json
import struct

import numpy as np

from .data import FormatError, read_matrix_block, write_matrix_block
from .model import FactorizedModel, HyperParams
from .solvers import JointProjection, SolverConfig

MODEL_MAGIC = b"FRODAM"
MODEL_VERSION = 1
_PREFIX = struct.Struct("<6sIQ")

_MATRICES = ("V", "U", "U_src", "S", "T", "W", "Xs", "Xt")


def save_model(model, path, extra=None):
    matrices = {name: getattr(model, name) for name in _MATRICES}
    if model.source_labels is not None:
        matrices["source_labels"] = np.asarray(model.source_labels, float)[:, None]
    if model.projection is not None:
        matrices["projection_basis"] = model.projection.basis
        matrices["projection_mean"] = model.projection.mean[:, None]
    order = [k for k, v in matrices.items() if v is not None]
    hp = model.hyperparams.as_dict()
    header = {
        "format": "froda-model",
        "version": MODEL_VERSION,
        "variant": model.variant,
        "hyperparams": hp,
        "n_classes": model.n_classes,
        "n_source_known": model.n_source_known,
        "n_iter": model.n_iter,
        "converged": model.converged,
        "objective_trace": [float(v) for v in model.objective_trace],
        "fit_seconds": model.fit_seconds,
        "iter_seconds": list(model.iter_seconds),
        "matrices": order,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MODEL_MAGIC, MODEL_VERSION, len(blob)))
        fh.write(blob)
        for name in order:
            write_matrix_block(fh, np.atleast_2d(matrices[name]))


def load_model(path):
    """Read a model file; returns ``(model, extra)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PREFIX.size:
        raise FormatError("bad model file")
    magic, version, length = _PREFIX.unpack_from(raw)
    if magic != MODEL_MAGIC:
        raise FormatError("bad model file")
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}")
    fh = io.BytesIO(raw[_PREFIX.size :])
    try:
        header = json.loads(fh.read(length).decode("utf-8"))
        mats = {name: read_matrix_block(fh) for name in header["matrices"]}
    except (ValueError, KeyError) as exc:
        raise FormatError(f"bad model file: {exc}") from None
    hp_dict = dict(header["hyperparams"])
    inner = SolverConfig(**hp_dict.pop("inner"))
    hp = HyperParams(inner=inner, **hp_dict)
    projection = None
    if "projection_basis" in mats:
        projection = JointProjection(
            mats["projection_basis"], mats["projection_mean"][:, 0]
        )
    labels = mats.get("source_labels")
    model = FactorizedModel(
        variant=header["variant"],
        V=mats["V"],
        U=mats["U"],
        S=mats["S"],
        T=mats["T"],
        Xs=mats["Xs"],
        Xt=mats["Xt"],
        hyperparams=hp,
        U_src=mats.get("U_src"),
        W=mats.get("W"),
        source_labels=None if labels is None else labels[:, 0].astype(int),
        n_classes=header["n_classes"],
        n_source_known=header["n_source_known"],
        projection=projection,
        objective_trace=header["objective_trace"],
        n_iter=header["n_iter"],
        converged=header["converged"],
        fit_seconds=header["fit_seconds"],
        iter_seconds=header["iter_seconds"],
    )
    return model, header.get("extra", {})
