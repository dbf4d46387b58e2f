"""Binary model container.

Layout: magic ``PAGB``, u32 format version, then a length-prefixed JSON
header describing scalar fields and array descriptors (name, dtype, shape,
byte length, in order), followed by the raw C-order array bytes. Writing the
same model twice yields identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np

from .ensemble import MetaFit, StackedEnsemble
from .learners import (
    GBTParams,
    GradientBoostedModel,
    Hyperparams,
    RandomForestModel,
    RFParams,
    SVRModel,
    SVRParams,
)

MAGIC = b"PAGB"
FORMAT_VERSION = 1


class ModelIOError(ValueError):
    pass


def _pack(kind: str, scalars: dict, arrays: dict[str, np.ndarray]) -> bytes:
    descriptors = []
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        blob = arr.tobytes()
        descriptors.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "nbytes": len(blob),
        })
        blobs.append(blob)
    header = json.dumps(
        {"kind": kind, "scalars": scalars, "arrays": descriptors},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<Q", len(header))
    out += header
    for blob in blobs:
        out += blob
    return bytes(out)


def _unpack(data: bytes) -> tuple[str, dict, dict[str, np.ndarray]]:
    if len(data) < 16 or data[:4] != MAGIC:
        raise ModelIOError("not a PAGB model file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ModelIOError(f"unsupported format version {version}")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    arrays: dict[str, np.ndarray] = {}
    for desc in header["arrays"]:
        nbytes = desc["nbytes"]
        arr = np.frombuffer(data[offset:offset + nbytes], dtype=np.dtype(desc["dtype"]))
        arrays[desc["name"]] = arr.reshape(desc["shape"]).copy()
        offset += nbytes
    if offset != len(data):
        raise ModelIOError("trailing bytes after declared arrays")
    return header["kind"], header["scalars"], arrays


def _model_to_parts(model) -> tuple[str, dict, dict[str, np.ndarray]]:
    payload = model.params_payload()
    scalars = {k: v for k, v in payload.items() if not isinstance(v, np.ndarray)}
    arrays = {k: v for k, v in payload.items() if isinstance(v, np.ndarray)}
    return model.kind, scalars, arrays


def _model_from_parts(kind: str, scalars: dict, arrays: dict[str, np.ndarray]):
    if kind == "rf":
        return RandomForestModel(
            features=arrays["features"], thresholds=arrays["thresholds"],
            lefts=arrays["lefts"], rights=arrays["rights"], values=arrays["values"],
            training_seed=int(scalars["training_seed"]),
        )
    if kind == "gbt":
        return GradientBoostedModel(
            f0=float(scalars["f0"]), learning_rate=float(scalars["learning_rate"]),
            features=arrays["features"], thresholds=arrays["thresholds"],
            lefts=arrays["lefts"], rights=arrays["rights"], values=arrays["values"],
            training_seed=int(scalars["training_seed"]),
        )
    if kind == "svr":
        return SVRModel(
            X_train_scaled=arrays["X_train_scaled"], beta=arrays["beta"],
            x_mean=arrays["x_mean"], x_sd=arrays["x_sd"],
            gamma=float(scalars["gamma"]), converged=bool(scalars["converged"]),
            training_seed=int(scalars["training_seed"]),
        )
    raise ModelIOError(f"unknown model kind {kind!r}")


def save_model(model, path) -> None:
    kind, scalars, arrays = _model_to_parts(model)
    with open(path, "wb") as fh:
        fh.write(_pack(kind, scalars, arrays))


def load_model(path):
    with open(path, "rb") as fh:
        kind, scalars, arrays = _unpack(fh.read())
    if kind == "ensemble":
        raise ModelIOError("file holds an ensemble; use load_ensemble")
    return _model_from_parts(kind, scalars, arrays)


def save_ensemble(ens: StackedEnsemble, path) -> None:
    arrays: dict[str, np.ndarray] = {
        "meta_coefficients": np.asarray(ens.meta.coefficients, dtype=np.float64),
        "loo_matrix": np.asarray(ens.loo_matrix, dtype=np.float64),
    }
    bases = []
    for name, model in zip(("rf", "gbt", "svr"), ens.base_models):
        kind, mscalars, marrays = _model_to_parts(model)
        bases.append({"name": name, "kind": kind, "scalars": mscalars,
                      "array_names": sorted(marrays)})
        for aname in sorted(marrays):
            arrays[f"base:{name}:{aname}"] = marrays[aname]
    scalars = {
        "meta_ridge_fallback": bool(ens.meta.ridge_fallback),
        "hyperparams": {
            "rf": asdict(ens.hyperparams.rf),
            "gbt": asdict(ens.hyperparams.gbt),
            "svr": asdict(ens.hyperparams.svr),
        },
        "training_seed": int(ens.training_seed),
        "bases": bases,
    }
    with open(path, "wb") as fh:
        fh.write(_pack("ensemble", scalars, arrays))


def load_ensemble(path) -> StackedEnsemble:
    with open(path, "rb") as fh:
        kind, scalars, arrays = _unpack(fh.read())
    if kind != "ensemble":
        raise ModelIOError(f"file holds a {kind!r} model, not an ensemble")
    models = {}
    for entry in scalars["bases"]:
        marrays = {a: arrays[f"base:{entry['name']}:{a}"] for a in entry["array_names"]}
        models[entry["name"]] = _model_from_parts(entry["kind"], entry["scalars"], marrays)
    hp = Hyperparams(
        rf=RFParams(**scalars["hyperparams"]["rf"]),
        gbt=GBTParams(**scalars["hyperparams"]["gbt"]),
        svr=SVRParams(**scalars["hyperparams"]["svr"]),
    )
    meta = MetaFit(coefficients=arrays["meta_coefficients"],
                   ridge_fallback=bool(scalars["meta_ridge_fallback"]))
    return StackedEnsemble(
        rf=models["rf"], gbt=models["gbt"], svr=models["svr"], meta=meta,
        loo_matrix=arrays["loo_matrix"], hyperparams=hp,
        training_seed=int(scalars["training_seed"]),
    )
