"""Binary model files.

Layout (all integers u32 little-endian)::

    b"GTNET1" | version | tensor count
    per tensor: name length | UTF-8 name | rank | dims... | float64 LE data

Model files store the architecture as ``config.*`` tensors ahead of the
parameters, so a file is self-describing.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .pipeline.config import ModelConfig
from .pipeline.model import Detector

MAGIC = b"GTNET1"
VERSION = 1

_CONFIG_FIELDS = (
    "c_fpn", "k_cat", "ranks", "k_out", "l1_weight", "ga_enabled", "tba_enabled",
    "in_channels", "stem_width", "widths", "prior_prob", "shared_head",
)


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")  # keeps rank 0, unlike ascontiguousarray
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode_tensors(data: bytes) -> dict[str, np.ndarray]:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad magic, not a GTNET1 file", 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", r.pos - 4)
    count = r.u32("tensor count")
    out = {}
    for _ in range(count):
        start = r.pos
        name_len = r.u32("name length")
        try:
            name = r.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", start + 4) from None
        if name in out:
            raise FormatError(f"duplicate tensor {name!r}", start)
        rank = r.u32("rank")
        dims = [r.u32("dimension") for _ in range(rank)]
        n = int(np.prod(dims)) if dims else 1
        payload = r.take(8 * n, f"data of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(tuple(dims))
    if r.pos != len(data):
        raise FormatError("trailing bytes after the last tensor", r.pos)
    return out


def model_tensors(model: Detector) -> dict[str, np.ndarray]:
    cfg = model.cfg
    tensors = {}
    for f in _CONFIG_FIELDS:
        value = cfg.k_out_resolved if f == "k_out" else getattr(cfg, f)
        tensors[f"config.{f}"] = np.atleast_1d(np.asarray(value, dtype=np.float64))
    for name, var in model.parameters().items():
        tensors[name] = var.value
    return tensors


def save_model(model: Detector, path) -> None:
    path = Path(path)
    data = encode_tensors(model_tensors(model))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _config_from(tensors: dict[str, np.ndarray], end: int) -> ModelConfig:
    kwargs = {}
    for f in _CONFIG_FIELDS:
        key = f"config.{f}"
        if key not in tensors:
            raise FormatError(f"missing {key}", end)
        v = tensors[key]
        if f in ("ranks", "widths"):
            kwargs[f] = tuple(int(x) for x in v)
        elif f in ("ga_enabled", "tba_enabled", "shared_head"):
            kwargs[f] = bool(v[0])
        elif f in ("l1_weight", "prior_prob"):
            kwargs[f] = float(v[0])
        else:
            kwargs[f] = int(v[0])
    if kwargs["k_out"] == kwargs["c_fpn"]:
        kwargs["k_out"] = None  # the default, stored resolved
    try:
        return ModelConfig(**kwargs)
    except ValueError as exc:
        raise FormatError(f"invalid stored configuration: {exc}", end) from exc


def model_from_tensors(tensors: dict[str, np.ndarray], end: int = 0) -> Detector:
    model = Detector(_config_from(tensors, end))
    params = model.parameters()
    stored = {k for k in tensors if not k.startswith("config.")}
    if stored != set(params):
        missing = sorted(set(params) - stored)
        extra = sorted(stored - set(params))
        raise FormatError(f"parameter set mismatch (missing {missing[:3]}, unexpected {extra[:3]})", end)
    for name, var in params.items():
        arr = tensors[name]
        if arr.shape != var.shape:
            raise FormatError(f"{name}: stored shape {arr.shape}, expected {var.shape}", end)
        var.value = arr.copy()
    return model


def load_model(path) -> Detector:
    data = Path(path).read_bytes()
    return model_from_tensors(decode_tensors(data), len(data))
