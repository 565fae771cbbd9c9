"""Binary checkpoint format.

Layout (all integers little-endian):

    b"SATC"  u32 version  u32 config_len  config JSON (utf-8)
    u32 n_params
    per parameter: u32 name_len, name (utf-8), u32 rank, rank x u32 dims,
                   u8 precision (64 or 32), payload (IEEE-754, little-endian)
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .model import ModelConfig, SAttisUNet

MAGIC = b"SATC"
VERSION = 1


def save_checkpoint(model: SAttisUNet, path: str | os.PathLike) -> None:
    cfg = json.dumps(model.cfg.to_dict(), sort_keys=True).encode("utf-8")
    params = list(model.named_parameters())
    chunks = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(params))]
    for name, p in params:
        bits = 64 if p.dtype == np.float64 else 32
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        chunks.append(struct.pack("<B", bits))
        chunks.append(np.ascontiguousarray(p.data, dtype=f"<f{bits // 8}").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ValidationError(f"{self.path}: truncated checkpoint reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path: str | os.PathLike, dtype: str | None = None) -> SAttisUNet:
    """Rebuild the model and restore parameters.

    ``dtype`` (``"float32"``/``"float64"``) states the expected precision; a
    checkpoint stored at the other precision is rejected.
    """
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    if r.take(4, "magic") != MAGIC:
        raise ValidationError(f"{path}: bad magic bytes, not a SATC checkpoint")
    version = r.u32("version")
    if version != VERSION:
        raise ValidationError(f"{path}: checkpoint format version {version}, this build reads {VERSION}")
    try:
        cfg_dict = json.loads(r.take(r.u32("config length"), "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: malformed config block ({exc})") from exc
    cfg = ModelConfig.from_dict(cfg_dict)
    if dtype is not None and dtype != cfg.dtype:
        raise ValidationError(f"{path}: checkpoint precision is {cfg.dtype}, caller expects {dtype}")
    model = SAttisUNet(cfg)
    expected = dict(model.named_parameters())
    n = r.u32("parameter count")
    if n != len(expected):
        raise ValidationError(f"{path}: {n} parameters stored, config builds {len(expected)}")
    want_bits = 64 if cfg.dtype == "float64" else 32
    for _ in range(n):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        rank = r.u32("rank")
        dims = tuple(struct.unpack(f"<{rank}I", r.take(4 * rank, "dims")))
        bits = r.take(1, "precision flag")[0]
        if bits not in (32, 64):
            raise ValidationError(f"{path}: parameter {name!r} has invalid precision flag {bits}")
        if bits != want_bits:
            raise ValidationError(f"{path}: parameter {name!r} stored at {bits}-bit, config says {cfg.dtype}")
        p = expected.get(name)
        if p is None:
            raise ValidationError(f"{path}: unknown parameter {name!r} for this config")
        if dims != p.shape:
            raise ValidationError(f"{path}: parameter {name!r} has shape {dims}, expected {p.shape}")
        count = int(np.prod(dims)) if dims else 1
        raw = r.take(count * bits // 8, f"payload of {name!r}")
        p.data[...] = np.frombuffer(raw, dtype=f"<f{bits // 8}").reshape(dims)
    if r.pos != len(buf):
        raise ValidationError(f"{path}: {len(buf) - r.pos} trailing bytes after the last parameter")
    model.eval()
    return model
