"""Binary checkpoint format.

Layout (little-endian)::

    magic  b"XVPIDCKP"        8 bytes
    version                  u32
    header_len               u32
    header                   UTF-8 JSON, header_len bytes
    payload                  raw tensors, back to back
    crc32                    u32 over every preceding byte

The header lists each tensor (name, section, dtype, shape, offset, nbytes),
the model configuration, optimizer scalars and the branch gains written as
``float.hex`` strings so they reload bit-exactly.  Sections are ``param``,
``adam_m`` and ``adam_v``.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"XVPIDCKP"
VERSION = 1
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


class CheckpointError(Exception):
    """Base class for unreadable checkpoints."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


def save_checkpoint(path, model, optimizer=None, meta: dict | None = None) -> Path:
    tensors = []
    chunks = []
    offset = 0

    def add(name, section, arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr)
        dt = "float64" if arr.dtype == np.float64 else "float32"
        raw = arr.astype(_DTYPES[dt]).tobytes()
        tensors.append({"name": name, "section": section, "dtype": dt, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    named = model.named_parameters()
    for name, p in named.items():
        add(name, "param", p.data)
    opt_header = None
    if optimizer is not None:
        index = {id(p): i for i, p in enumerate(optimizer.params)}
        for name, p in named.items():
            if id(p) in index:
                i = index[id(p)]
                add(name, "adam_m", optimizer.m[i])
                add(name, "adam_v", optimizer.v[i])
        opt_header = {"t": optimizer.t, "lr": optimizer.lr, "beta1": optimizer.beta1,
                      "beta2": optimizer.beta2, "eps": optimizer.eps, "max_norm": optimizer.max_norm,
                      "lrs": getattr(optimizer, "lrs", None)}
    coef = {k: float(v).hex() for k, v in model.coefficients.values().items()}
    header = {
        "format": "crossview-pid-checkpoint",
        "model_config": model.config.to_dict(),
        "dtype": str(model.dtype),
        "tensors": tensors,
        "optimizer": opt_header,
        "coefficients": coef,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    return out


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(header, {(section, name): array})`` after all integrity checks."""
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise CheckpointTruncatedError(f"{path}: {len(raw)} bytes is too short for a checkpoint")
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {raw[:8]!r})")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {VERSION}")
    if len(raw) < 16 + hlen + 4:
        raise CheckpointTruncatedError(f"{path}: header runs past the end of the file")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        (crc,) = struct.unpack("<I", raw[-4:])
        if zlib.crc32(raw[:-4]) != crc:
            raise CheckpointChecksumError(f"{path}: CRC32 mismatch") from None
        raise CheckpointError(f"{path}: unreadable header") from None
    payload_len = sum(t["nbytes"] for t in header.get("tensors", []))
    expected = 16 + hlen + payload_len + 4
    if len(raw) < expected:
        raise CheckpointTruncatedError(f"{path}: expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise CheckpointError(f"{path}: {len(raw) - expected} trailing bytes")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise CheckpointChecksumError(f"{path}: CRC32 mismatch")
    base = 16 + hlen
    arrays = {}
    for t in header["tensors"]:
        start = base + t["offset"]
        arr = np.frombuffer(raw[start:start + t["nbytes"]], dtype=_DTYPES[t["dtype"]]).reshape(t["shape"])
        arrays[(t["section"], t["name"])] = arr.copy()
    return header, arrays


def load_checkpoint(path, with_optimizer: bool = False):
    """Rebuild the network (and optionally an Adam state dict) from ``path``."""
    from .refine import ModelConfig, RefinementNetwork

    header, arrays = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model_config"])
    model = RefinementNetwork(cfg, np.dtype(header["dtype"]))
    model.load_state_dict({n: a for (s, n), a in arrays.items() if s == "param"})
    for k, hexval in header["coefficients"].items():
        stored = float.fromhex(hexval)
        if float(getattr(model.coefficients, k).data[0]) != stored:
            raise CheckpointError(f"{path}: coefficient {k} disagrees with its tensor")
    if not with_optimizer:
        return model, header
    opt = None
    if header.get("optimizer") is not None:
        opt = dict(header["optimizer"])
        opt["m"] = {n: a for (s, n), a in arrays.items() if s == "adam_m"}
        opt["v"] = {n: a for (s, n), a in arrays.items() if s == "adam_v"}
    return model, header, opt
