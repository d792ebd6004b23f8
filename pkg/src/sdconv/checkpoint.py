"""Binary checkpoint format.

Layout (little-endian)::

    b"SDCV" | u32 version | u32 tensor count
    per tensor: u16 name length | name (UTF-8) | u8 rank | u32 dims[rank] | f32 payload
    trailer: UTF-8 ``key=value`` lines (step, schedule state, config snapshot)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sdconv.errors import IngestionError

MAGIC = b"SDCV"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict
    step: int = 0
    schedule: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def with_prefix(self, prefix):
        """Tensors under ``prefix.``, with the prefix removed."""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}


def encode(ckpt):
    parts = [MAGIC, struct.pack("<II", VERSION, len(ckpt.tensors))]
    for name, value in ckpt.tensors.items():
        arr = np.asarray(value)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    lines = [f"step={ckpt.step}"]
    lines += [f"schedule.{k}={_fmt(v)}" for k, v in ckpt.schedule.items()]
    lines += [f"meta.{k}={_fmt(v)}" for k, v in ckpt.meta.items()]
    lines += [f"config.{k}={_fmt(v)}" for k, v in ckpt.config.items()]
    parts.append(("\n".join(lines) + "\n").encode("utf-8"))
    return b"".join(parts)


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def decode(buf):
    view = memoryview(buf)
    if len(buf) < 12:
        raise IngestionError("truncated checkpoint header", offset=len(buf))
    if bytes(view[:4]) != MAGIC:
        raise IngestionError(f"bad checkpoint magic {bytes(view[:4])!r}", offset=0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise IngestionError(f"unsupported checkpoint version {version}", offset=4)
    pos = 12
    tensors = {}

    def need(n):
        if pos + n > len(buf):
            raise IngestionError(f"truncated checkpoint: need {n} bytes", offset=pos)

    for _ in range(count):
        need(2)
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(name_len + 1)
        try:
            name = bytes(view[pos:pos + name_len]).decode("utf-8")
        except UnicodeDecodeError:
            raise IngestionError("tensor name is not UTF-8", offset=pos) from None
        pos += name_len
        rank = buf[pos]
        pos += 1
        need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(dims, dtype=np.int64))
        need(4 * size)
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).astype(np.float32).reshape(dims)
        pos += 4 * size
    try:
        trailer = bytes(view[pos:]).decode("utf-8")
    except UnicodeDecodeError:
        raise IngestionError("checkpoint trailer is not UTF-8", offset=pos) from None

    ckpt = Checkpoint(tensors)
    for line in trailer.splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        if key == "step":
            ckpt.step = int(value)
        else:
            group, _, name = key.partition(".")
            target = {"schedule": ckpt.schedule, "config": ckpt.config, "meta": ckpt.meta}.get(group)
            if target is None:
                raise IngestionError(f"unknown checkpoint trailer key {key!r}", offset=pos)
            target[name] = value
    return ckpt


def save(path, ckpt):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)


def load(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read checkpoint {path}: {exc.strerror}", offset=0) from None
    return decode(buf)
