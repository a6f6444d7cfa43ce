"""Binary checkpoint container shared by every method.

Layout: the magic bytes ``BDCK1``, an unsigned 64-bit little-endian header
length, a UTF-8 JSON header (sorted keys), then every parameter as
little-endian float64 in header order.  The header lists name, shape, dtype
and byte offset (relative to the payload start) per parameter, plus the
method kind, role, model dims, training config and standardization stats.
"""
from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from .baselines import AeModel, EnsembleModel, FillingModel, SingleModalityModel
from .data import Standardizer
from .model import BDModel, ModelDims, build_clinical_only, build_image_only
from .numcore import ParamStore

MAGIC = b"BDCK1"
METHODS = ("bd", "filling", "ae", "ensemble", "image-only", "clinical-only")


class CheckpointError(ValueError):
    pass


@dataclasses.dataclass
class Checkpoint:
    method: str
    model: object
    role: str = "clinical"
    config: dict = dataclasses.field(default_factory=dict)
    standardizer: Standardizer | None = None


def model_params(method: str, model) -> ParamStore:
    if method == "ae":
        return model.all_params
    return model.params


def method_of(model) -> str:
    if isinstance(model, BDModel):
        return "bd"
    return model.method


def _role_of(method, model):
    return getattr(model, "role", "clinical")


def _dims_dict(dims: ModelDims):
    d = dataclasses.asdict(dims)
    d["prompt_hidden"] = list(d["prompt_hidden"])
    return d


def _dims_of(model):
    if isinstance(model, SingleModalityModel):
        return model.net.dims
    return model.dims


def to_bytes(model, config=None, standardizer: Standardizer | None = None) -> bytes:
    method = method_of(model)
    if method not in METHODS:
        raise CheckpointError(f"unknown method kind {method!r}")
    params = model_params(method, model)
    entries, chunks, offset = [], [], 0
    for name, p in params.items():
        raw = np.ascontiguousarray(p.value, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(p.value.shape), "dtype": "<f8", "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": 1,
        "method": method,
        "role": _role_of(method, model),
        "dims": _dims_dict(_dims_of(model)),
        "config": dict(config or {}),
        "standardizer": standardizer.to_dict() if standardizer else None,
        "params": entries,
        "payload_bytes": offset,
    }
    if method == "ensemble":
        header["alpha"] = model.alpha
    if method == "ae":
        header["ae_hidden"] = model.hidden
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(chunks)


def save(path, model, config=None, standardizer=None):
    data = to_bytes(model, config, standardizer)
    with open(path, "wb") as fh:
        fh.write(data)
    return path


def _build(method, dims: ModelDims, role, header):
    if method == "bd":
        return BDModel(dims, None, role)
    if method == "filling":
        return FillingModel(dims, None, role)
    if method == "ae":
        m = AeModel(dims, None, role, header.get("ae_hidden", 64))
        m.set_stage1(FillingModel(dims, None, role))
        return m
    if method == "ensemble":
        return EnsembleModel(dims, None, header.get("alpha", 0.5))
    if method == "image-only":
        return SingleModalityModel(build_image_only(dims, None), "image")
    if method == "clinical-only":
        return SingleModalityModel(build_clinical_only(dims, None), "clinical")
    raise CheckpointError(f"unknown method kind {method!r}")


def from_bytes(data: bytes, source="<bytes>") -> Checkpoint:
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    start = len(MAGIC) + 8
    if len(data) < start:
        raise CheckpointError(f"{source}: truncated header")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC):start])
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: unreadable header ({e})") from None
    payload = data[start + hlen:]
    if len(payload) != header.get("payload_bytes", -1):
        raise CheckpointError(f"{source}: payload is {len(payload)} bytes, header says {header.get('payload_bytes')}")
    d = dict(header["dims"])
    d["prompt_hidden"] = tuple(d["prompt_hidden"])
    dims = ModelDims(**d)
    method, role = header["method"], header["role"]
    model = _build(method, dims, role, header)
    params = model_params(method, model)
    stored = {}
    for e in header["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype=e["dtype"], count=n, offset=e["offset"])
        stored[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    if set(stored) != set(params.names()):
        missing = sorted(set(params.names()) ^ set(stored))
        raise CheckpointError(f"{source}: parameter set mismatch for method {method!r}: {missing[:5]}")
    params.load(stored)
    if method == "ae":
        model.stage1_digest = model.stage1.params.digest()
        model.stage2_done = True
    st = header.get("standardizer")
    return Checkpoint(method, model, role, header.get("config", {}),
                      Standardizer(st["mean"], st["std"]) if st else None)


def load(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return from_bytes(data, str(path))
