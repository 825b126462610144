"""Binary checkpoint format.

Layout (all little-endian):
  magic "EVOT", version u32,
  8 config u32s (image_side, patch_side, channels_in, embed_dim, heads,
  depth, ffn_hidden, num_classes),
  param count u32, then per parameter:
  name length u16, name bytes (utf-8), rows u32, cols u32,
  row-major float64 data.
Vectors are stored with rows = 1. Round trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .encoder import EncoderConfig
from .errors import FormatError
from .params import ParamSet, Parameter

MAGIC = b"EVOT"
VERSION = 1
_CFG_FIELDS = ("image_side", "patch_side", "channels_in", "embed_dim",
               "heads", "depth", "ffn_hidden", "num_classes")


def save_checkpoint(path, cfg: EncoderConfig, params: ParamSet):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name in _CFG_FIELDS:
            fh.write(struct.pack("<I", getattr(cfg, name)))
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            v = p.value
            rows, cols = (1, v.shape[0]) if v.ndim == 1 else v.shape
            fh.write(struct.pack("<II", rows, cols))
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (EncoderConfig, ParamSet)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise FormatError(
            f"bad checkpoint magic {data[:4]!r} at offset 0, "
            f"expected {MAGIC!r}")
    off = 4
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    fields = {}
    for name in _CFG_FIELDS:
        (fields[name],) = struct.unpack_from("<I", data, off)
        off += 4
    cfg = EncoderConfig(**fields)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    params = ParamSet()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        nbytes = rows * cols * 8
        if off + nbytes > len(data):
            raise FormatError(
                f"truncated checkpoint: parameter {name!r} needs "
                f"{nbytes} bytes at offset {off}, file has {len(data)}")
        value = np.frombuffer(
            data, dtype="<f8", count=rows * cols, offset=off
        ).reshape(rows, cols).copy()
        off += nbytes
        if rows == 1 and _is_vector_param(name):
            value = value.reshape(-1)
        params.add(name, value, decay=_decays(name))
    return cfg, params


def _is_vector_param(name: str) -> bool:
    return name == "cls" or name.endswith((".b", ".g", ".b1", ".b2"))


def _decays(name: str) -> bool:
    return name.endswith((".w", "wq", "wk", "wv", "wo", ".w1", ".w2"))
