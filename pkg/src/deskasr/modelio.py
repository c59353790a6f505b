"""Model persistence: PFLW weight files plus key=value config files.

Weight file layout (all integers u32 little-endian)::

    b"PFLW" | version | tensor count | per tensor: name length, UTF-8 name,
    rank, dims..., float32 LE data
"""

from __future__ import annotations

import dataclasses
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .layers import ParamStore

MAGIC = b"PFLW"
VERSION = 1
_U32 = struct.Struct("<I")
MAX_RANK = 8


class ModelFormatError(ValueError):
    """Base class for unreadable or inconsistent model files."""


class NotAModelFile(ModelFormatError):
    pass


class VersionMismatch(ModelFormatError):
    pass


class TruncatedData(ModelFormatError):
    pass


class ShapeMismatch(ModelFormatError):
    pass


class ConfigError(ModelFormatError):
    pass


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr)
        if a.ndim > MAX_RANK:
            raise ValueError(f"{name}: rank {a.ndim} > {MAX_RANK}")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(a.ndim)]
        parts += [_U32.pack(d) for d in a.shape]
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    """Parse a whole PFLW buffer; nothing is returned unless every tensor is intact."""
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise NotAModelFile("not a model file (bad magic)")
    pos = 4

    def u32() -> int:
        nonlocal pos
        if pos + 4 > len(buf):
            raise TruncatedData("truncated tensor data")
        (v,) = _U32.unpack_from(buf, pos)
        pos += 4
        return v

    version = u32()
    if version != VERSION:
        raise VersionMismatch(f"model file version {version}, expected {VERSION}")
    count = u32()
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        n = u32()
        if pos + n > len(buf):
            raise TruncatedData("truncated tensor data")
        try:
            name = buf[pos : pos + n].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ModelFormatError(f"tensor name is not UTF-8: {exc}") from None
        pos += n
        rank = u32()
        if rank > MAX_RANK:
            raise ModelFormatError(f"{name}: implausible rank {rank}")
        shape = tuple(u32() for _ in range(rank))
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise TruncatedData("truncated tensor data")
        if name in out:
            raise ModelFormatError(f"duplicate tensor {name}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).astype(np.float32).reshape(shape)
        pos += nbytes
    if pos != len(buf):
        raise ModelFormatError(f"{len(buf) - pos} trailing bytes after the last tensor")
    return out


def save_store(store: ParamStore, path) -> None:
    _atomic_write(Path(path), encode_tensors({k: p.data for k, p in store.items()}))


def load_store(store: ParamStore, path) -> None:
    """Fill ``store`` from ``path``; names and shapes must match exactly."""
    path = Path(path)
    tensors = decode_tensors(path.read_bytes())
    missing = [k for k in store if k not in tensors]
    extra = [k for k in tensors if k not in store]
    if missing or extra:
        raise ShapeMismatch(f"{path.name}: missing tensors {missing}, unexpected {extra}")
    for k, p in store.items():
        if tensors[k].shape != p.data.shape:
            raise ShapeMismatch(f"{path.name}: {k} has shape {tensors[k].shape}, model expects {p.data.shape}")
    for k, p in store.items():
        p.data = tensors[k].copy()
        p.requires_grad = False
        p.grad = None


# --------------------------------------------------------------------------
# key=value config files


def format_config(values: dict[str, Any]) -> str:
    lines = []
    for k, v in values.items():
        if "=" in k or "\n" in k:
            raise ValueError(f"bad config key {k!r}")
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> dict[str, str]:
    out = {}
    for i, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {i}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def dataclass_to_config(cfg) -> dict[str, Any]:
    return {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}


def config_to_dataclass(cls, values: dict[str, str]):
    """Build ``cls`` from string values, typed by each field's default."""
    kwargs = {}
    proto = cls()
    for f in dataclasses.fields(cls):
        if f.name not in values:
            continue
        default = getattr(proto, f.name)
        raw = values[f.name]
        try:
            kwargs[f.name] = _coerce(raw, default)
        except ValueError as exc:
            raise ConfigError(f"{cls.__name__}.{f.name}: {exc}") from None
    return cls(**kwargs)


def _coerce(raw: str, default):
    if isinstance(default, bool):
        if raw not in ("True", "False"):
            raise ValueError(f"expected True/False, got {raw!r}")
        return raw == "True"
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        if not raw:
            return ()
        proto = default[0] if default else 0
        return tuple(_coerce(x, proto) for x in raw.split(","))
    if isinstance(default, dict):
        raise ValueError("dict-valued fields are not stored")
    return raw


def write_text_atomic(path, text: str) -> None:
    _atomic_write(Path(path), text.encode("utf-8"))


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
