"""Binary checkpoint format.

Layout::

    MAGIC (8 bytes) | header length (uint64 LE) | JSON header | float32 LE payload

The header records the model config, whether the model is fused, the
reparameterization structure of every rep-conv, and an index of
``(name, shape, offset)`` entries.  Offsets are in bytes from the payload
start and tensors are stored back to back in index order.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .network import DistillSRNet, ModelConfig, build_model, fuse_model, rep_convs

MAGIC = b"RDSRCKPT"
VERSION = 1
_LEN = struct.Struct("<Q")


class CheckpointError(Exception):
    pass


class HeaderError(CheckpointError):
    """Bad magic, unparsable or inconsistent header."""


class ShapeMismatchError(CheckpointError):
    """Indexed tensors do not match the architecture the config describes."""


class TruncatedError(CheckpointError):
    """The payload is shorter than the index requires."""


def _structure(model: DistillSRNet) -> dict:
    return {name: ("fused" if m.is_fused else m.style) for name, m in rep_convs(model)}


def encode(model: DistillSRNet) -> bytes:
    state = model.state_dict()
    index, chunks, offset = [], [], 0
    for name, arr in state.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {
        "format": "repdistill-checkpoint",
        "version": VERSION,
        "config": model.cfg.to_dict(),
        "fused": bool(model.fused),
        "structure": _structure(model),
        "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + _LEN.pack(len(hbytes)) + hbytes + b"".join(chunks)


def save_checkpoint(model: DistillSRNet, path) -> None:
    Path(path).write_bytes(encode(model))


def _read_header(buf: bytes) -> tuple[dict, int]:
    if len(buf) < len(MAGIC) + _LEN.size or buf[: len(MAGIC)] != MAGIC:
        raise HeaderError("not a checkpoint file (bad magic)")
    (hlen,) = _LEN.unpack_from(buf, len(MAGIC))
    start = len(MAGIC) + _LEN.size
    if start + hlen > len(buf):
        raise HeaderError("header length exceeds file size")
    try:
        header = json.loads(buf[start : start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"unparsable header: {exc}") from None
    for key in ("version", "config", "fused", "structure", "tensors"):
        if key not in header:
            raise HeaderError(f"header missing {key!r}")
    if header["version"] != VERSION:
        raise HeaderError(f"unsupported checkpoint version {header['version']}")
    return header, start + hlen


def decode(buf: bytes) -> DistillSRNet:
    header, start = _read_header(buf)
    try:
        cfg = ModelConfig.from_dict(header["config"])
    except (TypeError, ValueError) as exc:
        raise HeaderError(f"invalid config in header: {exc}") from None
    model = build_model(cfg)
    if header["fused"]:
        model = fuse_model(model)
    else:
        model.eval()
    if header["structure"] != _structure(model):
        raise ShapeMismatchError("rep-conv structure tags do not match the config")

    expected = OrderedDict((n, a.shape) for n, a in model.state_dict().items())
    index = header["tensors"]
    names = [e.get("name") for e in index]
    if len(set(names)) != len(names):
        raise HeaderError("tensor named more than once")
    if names != list(expected):
        missing = sorted(set(expected) - set(names))
        extra = sorted(set(names) - set(expected))
        raise ShapeMismatchError(f"tensor index mismatch; missing={missing[:5]} unexpected={extra[:5]}")
    offset = 0
    for e in index:
        shape = tuple(e["shape"])
        if shape != tuple(expected[e["name"]]):
            raise ShapeMismatchError(f"{e['name']}: stored shape {shape}, model expects {expected[e['name']]}")
        if e["offset"] != offset:
            raise HeaderError(f"{e['name']}: offset {e['offset']} breaks contiguous layout (expected {offset})")
        offset += 4 * int(np.prod(shape, dtype=np.int64))
    payload = memoryview(buf)[start:]
    if len(payload) < offset:
        raise TruncatedError(f"payload has {len(payload)} bytes, index needs {offset}")
    if len(payload) > offset:
        raise HeaderError(f"{len(payload) - offset} trailing bytes after payload")

    params = dict(model.named_parameters())
    owners = {}
    for prefix, m in model.named_modules():
        for b in m._buffers:
            owners[f"{prefix}.{b}" if prefix else b] = (m, b)
    for e in index:
        shape = tuple(e["shape"])
        arr = np.frombuffer(payload, dtype="<f4", count=int(np.prod(shape, dtype=np.int64)),
                            offset=e["offset"]).reshape(shape).astype(np.float32)
        if e["name"] in params:
            params[e["name"]].data = arr
        else:
            m, b = owners[e["name"]]
            setattr(m, b, arr)
    return model


def load_checkpoint(path) -> DistillSRNet:
    return decode(Path(path).read_bytes())
