"""Portable tensor container.

Binary layout (``.spt``):

* line 1: a UTF-8 JSON header terminated by ``\\n``::

    {"format": "superpose-tensors", "version": 1, "meta": {...},
     "tensors": [{"name": ..., "shape": [...], "offset": <float index>}, ...]}

* then the payload: every tensor's entries as little-endian float64 in
  row-major order, concatenated in header order. ``offset`` counts float64
  entries from the start of the payload.

The JSON variant (``.json``) stores the same header with each tensor's
flattened row-major data inline under ``"data"``.

Network checkpoints list tensors in the order of
:meth:`superpose.convnet.ConvNetParams.tensors`: ``first_conv``, then per
trunk block ``trunk.{i}.kernel`` and ``trunk.{i}.act_b``, then
``bind_keys`` ``(N, D)``, ``unbind`` ``(N, D_out, D_out)``,
``classifier.W`` ``(D_out, classes)``, ``classifier.b``. Strides and
activation kinds travel in ``meta["layout"]``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "superpose-tensors"
VERSION = 1
_LE = np.dtype("<f8")


def _header(tensors: dict, meta: dict | None) -> tuple[dict, list[np.ndarray]]:
    entries, arrays, offset = [], [], 0
    for name, value in tensors.items():
        a = np.ascontiguousarray(value, dtype=np.float64)
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        arrays.append(a)
        offset += a.size
    return {"format": FORMAT, "version": VERSION, "meta": meta or {}, "tensors": entries}, arrays


def save_tensors(path, tensors: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    header, arrays = _header(tensors, meta)
    if path.suffix == ".json":
        for entry, a in zip(header["tensors"], arrays):
            entry["data"] = a.reshape(-1).tolist()
        path.write_text(json.dumps(header, sort_keys=True) + "\n")
        return path
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for a in arrays:
            fh.write(a.astype(_LE, copy=False).tobytes(order="C"))
    return path


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read either variant; returns ``(tensors in stored order, meta)``."""
    raw = Path(path).read_bytes()
    head, _, payload = raw.partition(b"\n")
    try:
        header = json.loads(head)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not a tensor container") from exc
    if header.get("format") != FORMAT or header.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported container {header.get('format')!r} v{header.get('version')}")
    flat = None if payload.strip() == b"" else np.frombuffer(payload, dtype=_LE)
    out = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if "data" in entry:
            data = np.asarray(entry["data"], dtype=np.float64)
        else:
            if flat is None or entry["offset"] + count > flat.size:
                raise ValueError(f"{path}: payload too short for tensor {entry['name']!r}")
            data = flat[entry["offset"]:entry["offset"] + count].astype(np.float64)
        if data.size != count:
            raise ValueError(f"{path}: tensor {entry['name']!r} has {data.size} entries, shape needs {count}")
        out[entry["name"]] = data.reshape(shape)
    return out, header["meta"]


def save_checkpoint(path, params, meta: dict | None = None) -> Path:
    meta = dict(meta or {})
    meta["layout"] = params.layout()
    return save_tensors(path, params.tensors(), meta)


def load_checkpoint(path):
    from .convnet import ConvNetParams

    tensors, meta = load_tensors(path)
    if "layout" not in meta:
        raise ValueError(f"{path}: no network layout in checkpoint metadata")
    return ConvNetParams.from_tensors(tensors, meta["layout"]), meta
