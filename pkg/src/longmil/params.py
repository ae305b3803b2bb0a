"""Parameters, module tree walking, and checkpoint serialization.

Modules are plain objects whose attributes may be Params, sub-Modules,
or lists of sub-Modules; named_params discovers them by walking
attribute paths like "blocks.0.attn.wq.w".  Checkpoints are a flat
name -> float64 tensor map in a little-endian binary container.
"""

from __future__ import annotations

import struct
from collections.abc import Iterator

import numpy as np

from .errors import FormatError, ShapeError

__all__ = [
    "Param",
    "Module",
    "flatten_params",
    "unflatten_params",
    "save_checkpoint",
    "load_checkpoint",
]

CKPT_MAGIC = b"LMCKPT1\x00"


class Param:
    """A trainable tensor with its gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[:] = 0.0

    def __repr__(self) -> str:
        return f"Param(shape={self.value.shape})"


class Module:
    """Base for layers; provides recursive parameter discovery."""

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for name, attr in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(attr, Param):
                yield path, attr
            elif isinstance(attr, Module):
                yield from attr.named_params(f"{path}.")
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{path}.{i}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, attr in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(attr, Module):
                yield from attr.named_modules(f"{path}.")
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{path}.{i}.")

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self.named_params()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_params())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in own.items():
            t = state[name]
            if tuple(t.shape) != tuple(p.value.shape):
                raise ShapeError(f"{name}: checkpoint shape {t.shape} vs model {p.value.shape}")
            p.value[:] = t


def flatten_params(module: Module) -> np.ndarray:
    """All parameter scalars as one f64 vector, in named_params order."""
    parts = [p.value.ravel() for _, p in module.named_params()]
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def unflatten_params(module: Module, vec: np.ndarray) -> None:
    """Inverse of flatten_params; round-trips bit-exactly."""
    vec = np.asarray(vec, dtype=np.float64)
    off = 0
    total = sum(p.value.size for _, p in module.named_params())
    if vec.shape != (total,):
        raise ShapeError(f"flat vector must have {total} entries, got {vec.shape}")
    for _, p in module.named_params():
        p.value[:] = vec[off:off + p.value.size].reshape(p.value.shape)
        off += p.value.size


def save_checkpoint(path: str, state: dict[str, np.ndarray]) -> None:
    """Write a name -> tensor map: magic, u32 count, then per-tensor
    u32 name length + utf-8 name + u32 rank + u32 dims + f64 payload."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(state)))
        for name in sorted(state):
            # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
            t = np.asarray(state[name], dtype=np.float64)
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", t.ndim))
            f.write(struct.pack(f"<{t.ndim}I", *t.shape))
            f.write(t.tobytes(order="C"))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def pull(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.blob):
            raise FormatError(f"truncated while reading {what}", offset=self.off)
        piece = self.blob[self.off:self.off + n]
        self.off += n
        return piece


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob)
    magic = r.pull(len(CKPT_MAGIC), "magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    (count,) = struct.unpack("<I", r.pull(4, "tensor count"))
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", r.pull(4, "name length"))
        name = r.pull(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", r.pull(4, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", r.pull(4 * rank, f"dims of {name}"))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.pull(8 * size, f"payload of {name}")
        state[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    if r.off != len(blob):
        raise FormatError("trailing bytes after last tensor", offset=r.off)
    return state
