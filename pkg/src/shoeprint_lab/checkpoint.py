"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes   b"SHNET1\\0\\0"
    version    u32
    fingerprint 32 bytes  sha256 of the architecture description
    step       u64
    count      u32
    count x  { name_len u16, name utf-8, rank u8, dims u32 * rank, float32 payload }
    optimizer  u8 flag; when 1: adam_step u64, then per array in the same
               order: u8 has_moments, and when 1 the m and v float32 payloads

Arrays are the graph parameters followed by its BatchNorm running statistics.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import ModelGraph
from .optim import AdamState

MAGIC = b"SHNET1\0\0"
VERSION = 1
HEADER_SIZE = 8 + 4 + 32 + 8 + 4


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    fingerprint: bytes
    arrays: dict
    step: int = 0
    optimizer: AdamState | None = None
    version: int = VERSION
    extras: dict = field(default_factory=dict)


def _f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def encode(ckpt: Checkpoint) -> bytes:
    out = bytearray()
    if len(ckpt.fingerprint) != 32:
        raise CheckpointError("fingerprint must be 32 bytes")
    out += MAGIC
    out += struct.pack("<I", ckpt.version)
    out += ckpt.fingerprint
    out += struct.pack("<Q", ckpt.step)
    out += struct.pack("<I", len(ckpt.arrays))
    for name, arr in ckpt.arrays.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += _f32(arr)
    opt = ckpt.optimizer
    if opt is None:
        out += b"\x00"
    else:
        out += b"\x01" + struct.pack("<Q", opt.step)
        for name in ckpt.arrays:
            if name in opt.m:
                out += b"\x01" + _f32(opt.m[name]) + _f32(opt.v[name])
            else:
                out += b"\x00"
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(8) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    fingerprint = r.take(32)
    (step,) = r.unpack("<Q")
    (count,) = r.unpack("<I")
    arrays: dict = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("corrupt parameter name") from exc
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        arrays[name] = r.floats(dims)
    (flag,) = r.unpack("<B")
    opt = None
    if flag == 1:
        (ostep,) = r.unpack("<Q")
        opt = AdamState(step=ostep)
        for name, arr in arrays.items():
            (has,) = r.unpack("<B")
            if has:
                opt.m[name] = r.floats(arr.shape)
                opt.v[name] = r.floats(arr.shape)
    elif flag != 0:
        raise CheckpointError(f"corrupt optimizer flag {flag}")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(fingerprint, arrays, step, opt, version)


def from_graph(graph: ModelGraph, step: int = 0, optimizer: AdamState | None = None) -> Checkpoint:
    return Checkpoint(graph.fingerprint(), graph.state_arrays(), step, optimizer)


def save_checkpoint(graph: ModelGraph, path, step: int = 0, optimizer: AdamState | None = None) -> int:
    data = encode(from_graph(graph, step, optimizer))
    Path(path).write_bytes(data)
    return len(data)


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def restore(graph: ModelGraph, ckpt: Checkpoint) -> None:
    """Copy checkpoint arrays into ``graph`` after checking the fingerprint."""
    if ckpt.fingerprint != graph.fingerprint():
        raise CheckpointError("architecture fingerprint mismatch: checkpoint was written for a different model")
    expected = set(graph.state_arrays())
    if set(ckpt.arrays) != expected:
        missing = sorted(expected - set(ckpt.arrays))
        raise CheckpointError(f"checkpoint arrays do not match the graph (missing {missing[:3]})")
    graph.load_state({k: v.astype(np.float64) for k, v in ckpt.arrays.items()})


def expected_size(arrays: dict, optimizer: AdamState | None = None) -> int:
    """Byte size implied by the layout above."""
    size = HEADER_SIZE
    for name, arr in arrays.items():
        size += 2 + len(name.encode("utf-8")) + 1 + 4 * arr.ndim + 4 * arr.size
    size += 1
    if optimizer is not None:
        size += 8
        for name, arr in arrays.items():
            size += 1 + (8 * arr.size if name in optimizer.m else 0)
    return size


def sidecar_path(path) -> Path:
    return Path(str(path) + ".arch.json")


def save_model(graph: ModelGraph, path, step: int = 0, optimizer: AdamState | None = None) -> int:
    """Checkpoint plus a JSON sidecar naming the architecture and its config."""
    cfg = graph.meta.get("config")
    if cfg is None:
        raise CheckpointError("graph carries no build config; build it with zoo.build")
    meta = {"arch": graph.arch, "config": json.loads(cfg.to_json()), "head": graph.head}
    sidecar_path(path).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return save_checkpoint(graph, path, step, optimizer)


def load_model(path):
    """Rebuild the graph named by the sidecar and restore the checkpoint into it."""
    from .zoo import ArchConfig, build

    data = Path(path).read_bytes()  # a missing checkpoint is an I/O error, not a format one
    side = sidecar_path(path)
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"missing architecture sidecar {side}") from None
    graph = build(meta["arch"], ArchConfig(**meta["config"]))
    ckpt = decode(data)
    restore(graph, ckpt)
    return graph, ckpt
