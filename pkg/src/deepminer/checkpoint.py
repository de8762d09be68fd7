"""Binary checkpoint format.

Layout (all integers unsigned 32-bit little-endian)::

    b"DMKT1\\n"
    n_lines, then n_lines x (length, UTF-8 "key=value")
    n_tensors, then n_tensors x (name length, name, rank, extents..., float64 LE data)

Config lines hold the model config plus ``meta.*`` entries and the build seed.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import DeepMiner, ModelConfig

MAGIC = b"DMKT1\n"


def _u32(v: int) -> bytes:
    return struct.pack("<I", v)


def save_checkpoint(model: DeepMiner, path, metadata: dict[str, str] | None = None) -> None:
    lines = [f"{k}={v}" for k, v in model.config.to_items()]
    lines.append(f"seed={model.seed}")
    meta = dict(getattr(model, "metadata", {}) or {})
    meta.update(metadata or {})
    for k, v in meta.items():
        if "\n" in f"{k}{v}" or "=" in k:
            raise ValueError(f"metadata entry {k!r} cannot be serialised")
        lines.append(f"meta.{k}={v}")

    chunks = [MAGIC, _u32(len(lines))]
    for line in lines:
        raw = line.encode("utf-8")
        chunks += [_u32(len(raw)), raw]
    tensors = list(model.named_tensors())
    chunks.append(_u32(len(tensors)))
    for name, t in tensors:
        raw = name.encode("utf-8")
        chunks += [_u32(len(raw)), raw, _u32(t.data.ndim)]
        chunks += [_u32(s) for s in t.data.shape]
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path) -> DeepMiner:
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad magic bytes: not a deepminer checkpoint")

    items: dict[str, str] = {}
    for i in range(r.u32("header line count")):
        raw = r.take(r.u32(f"header line {i} length"), f"header line {i}")
        try:
            key, sep, value = raw.decode("utf-8").partition("=")
        except UnicodeDecodeError:
            raise FormatError(f"header line {i} is not UTF-8") from None
        if not sep:
            raise FormatError(f"header line {i} is not key=value")
        items[key] = value

    seed = int(items.pop("seed", "0"))
    metadata = {k[5:]: v for k, v in items.items() if k.startswith("meta.")}
    model_items = {k: v for k, v in items.items() if not k.startswith("meta.")}
    try:
        cfg = ModelConfig.from_items(model_items)
        model = DeepMiner(cfg, seed)
    except (ValueError, TypeError) as exc:
        raise FormatError(f"invalid config in checkpoint: {exc}") from None
    model.metadata = metadata

    expected = dict(model.named_tensors())
    seen = set()
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("tensor name length"), "tensor name").decode("utf-8", errors="replace")
        rank = r.u32(f"rank of {name}")
        shape = tuple(r.u32(f"extent of {name}") for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(8 * count, f"data of {name}"), dtype="<f8").astype(np.float64)
        if name not in expected:
            raise FormatError(f"unexpected tensor {name!r} for the declared config")
        target = expected[name]
        if shape != target.data.shape:
            raise FormatError(f"tensor {name!r} has shape {shape}, config implies {target.data.shape}")
        target.data = data.reshape(shape)
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise FormatError(f"checkpoint lacks tensors: {sorted(missing)}")
    if r.pos != len(buf):
        raise FormatError("trailing bytes after the last tensor")
    return model
