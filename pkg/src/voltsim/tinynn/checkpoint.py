"""Binary model checkpoint container.

Layout: magic "VSCK", u32 little-endian JSON length, JSON metadata
(schema_version, model kind, spec, flags, bounds, array index with offsets),
then raw little-endian C-order array bytes. Arrays are float64 unless the
index says otherwise.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from ..qgemm import AnomalyBound
from .models import (
    ControllerModel,
    EntropyPredictor,
    PlannerModel,
    TransformerSpec,
)

MAGIC = b"VSCK"
SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model) -> None:
    arrays = model.params
    index = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        index.append(
            {
                "name": name,
                "dtype": a.dtype.str.lstrip("<>|"),
                "shape": list(a.shape),
                "offset": offset,
            }
        )
        offset += a.nbytes
    meta = {
        "schema_version": SCHEMA_VERSION,
        "kind": model.kind,
        "flags": dict(model.flags),
        "bounds": {
            site: {"mode": b.mode, "threshold_dequant": b.threshold_dequant}
            for site, b in getattr(model, "bounds", {}).items()
        },
        "arrays": index,
    }
    if hasattr(model, "spec"):
        meta["spec"] = model.spec.to_dict()
    if hasattr(model, "n_actions"):
        meta["n_actions"] = model.n_actions
    blob = json.dumps(meta).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name in sorted(arrays):
            a = np.ascontiguousarray(arrays[name])
            f.write(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    (meta_len,) = struct.unpack("<I", raw[4:8])
    meta = json.loads(raw[8 : 8 + meta_len].decode())
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(
            f"{path}: unsupported schema_version {meta.get('schema_version')}"
        )
    base = 8 + meta_len
    params = {}
    for ent in meta["arrays"]:
        dt = np.dtype(ent["dtype"]).newbyteorder("<")
        count = int(np.prod(ent["shape"])) if ent["shape"] else 1
        a = np.frombuffer(raw, dtype=dt, count=count, offset=base + ent["offset"])
        params[ent["name"]] = a.reshape(ent["shape"]).astype(dt.newbyteorder("="))
    kind = meta["kind"]
    if kind == "planner":
        model = PlannerModel(TransformerSpec(**meta["spec"]), params)
    elif kind == "controller":
        model = ControllerModel(
            TransformerSpec(**meta["spec"]), params, meta.get("n_actions", 9)
        )
    elif kind == "predictor":
        model = EntropyPredictor(params)
    else:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    model.flags = dict(meta.get("flags", {}))
    if hasattr(model, "bounds"):
        model.bounds = {
            site: AnomalyBound(b["mode"], b["threshold_dequant"])
            for site, b in meta.get("bounds", {}).items()
        }
    return model
