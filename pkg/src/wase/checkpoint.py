"""Single-file binary checkpoints.

Layout: ``b"WASE"``, uint32 format version, uint64 header length, a canonical JSON
header (config, parameter manifest with name/shape/byte offset, optional training
state), then every array as little-endian float64 in manifest order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import WASE, ModelConfig
from .tensor import Tensor

MAGIC = b"WASE"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: WASE, extra_arrays: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    arrays = {f"param/{k}": p.data for k, p in model.params.items()}
    for k, v in (extra_arrays or {}).items():
        arrays[f"extra/{k}"] = np.asarray(v, dtype=np.float64)
    manifest, offset = [], 0
    for name, arr in arrays.items():
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = json.dumps(
        {"config": model.cfg.to_dict(), "manifest": manifest, "meta": meta or {}},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(raw[16:16 + hlen])
    body = raw[16 + hlen:]
    arrays = {}
    for entry in header["manifest"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + 8 * n > len(body):
            raise CheckpointError(f"{path}: truncated at {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(body, dtype="<f8", count=n, offset=start).reshape(entry["shape"]).copy()
    return header, arrays


def load_checkpoint(path) -> tuple[WASE, dict[str, np.ndarray], dict]:
    """Rebuild the model; shapes are validated against a freshly configured model."""
    header, arrays = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    model = WASE(cfg)
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    if set(params) != set(model.params):
        missing = sorted(set(model.params) - set(params))
        unexpected = sorted(set(params) - set(model.params))
        raise CheckpointError(f"{path}: parameter set mismatch, missing {missing[:5]}, unexpected {unexpected[:5]}")
    for name, arr in params.items():
        if arr.shape != model.params[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, config expects {model.params[name].shape}")
        model.params[name] = Tensor(arr, requires_grad=True, name=name)
    extras = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    return model, extras, header["meta"]
