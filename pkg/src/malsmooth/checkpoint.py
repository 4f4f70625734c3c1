"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SMCV"  u16 version  u32 config_len  config_json
    repeated until EOF:
        u16 name_len  name  u8 rank  u32 dims[rank]  f32 values[prod(dims)]
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigMismatchError, FormatError
from .model import PARAM_NAMES, Model, ModelConfig

MAGIC = b"SMCV"
VERSION = 1
_F32 = np.dtype("<f4")


def dumps(model: Model) -> bytes:
    config = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(config)), config]
    for name in PARAM_NAMES:
        arr = np.ascontiguousarray(model.params[name], dtype=_F32)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps(model))
    return path


class _Reader:
    def __init__(self, buf: bytes, origin: str):
        self.buf, self.pos, self.origin = buf, 0, origin

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.origin}: truncated while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def done(self) -> bool:
        return self.pos >= len(self.buf)


def loads(buf: bytes, expected_config: ModelConfig | None = None, origin: str = "<bytes>") -> Model:
    r = _Reader(buf, origin)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError(f"{origin}: bad magic tag, not a checkpoint")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"{origin}: unsupported checkpoint version {version} (expected {VERSION})")
    (config_len,) = r.unpack("<I", "config length")
    try:
        config = ModelConfig.from_dict(json.loads(r.take(config_len, "config block").decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{origin}: invalid config block: {exc}") from None
    if expected_config is not None and config != expected_config:
        diffs = {
            k: (v, getattr(expected_config, k))
            for k, v in config.to_dict().items()
            if getattr(expected_config, k) != v
        }
        raise ConfigMismatchError(f"{origin}: checkpoint config differs from expected: {diffs}")
    params = {}
    while not r.done:
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "parameter name").decode("utf-8")
        (rank,) = r.unpack("<B", f"{name} rank")
        dims = r.unpack(f"<{rank}I", f"{name} dims")
        count = int(np.prod(dims)) if rank else 1
        raw = r.take(count * _F32.itemsize, f"{name} values")
        if name in params:
            raise FormatError(f"{origin}: duplicate parameter {name!r}")
        params[name] = np.frombuffer(raw, dtype=_F32).reshape(dims).astype(np.float32)
    missing = set(PARAM_NAMES) - set(params)
    if missing:
        raise FormatError(f"{origin}: missing parameters {sorted(missing)}")
    try:
        return Model(config, params, dtype=np.float32)
    except ValueError as exc:
        raise FormatError(f"{origin}: {exc}") from None


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Model:
    path = Path(path)
    return loads(path.read_bytes(), expected_config, origin=str(path))
