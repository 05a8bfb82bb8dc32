"""Adam with linear warmup/decay, and the binary checkpoint format."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    base_lr: float = 5e-4
    warmup_steps: int = 1000
    total_steps: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def lr_at(self, step: int) -> float:
        """Learning rate used by update number ``step`` (1-based)."""
        lr = self.base_lr
        if self.warmup_steps > 0:
            lr *= min(1.0, step / self.warmup_steps)
        if self.total_steps is not None and step > self.warmup_steps:
            span = max(1, self.total_steps - self.warmup_steps)
            lr = self.base_lr * max(0.0, (self.total_steps - step) / span)
        return lr


def adam_step(
    state: AdamState,
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    accum_count: int = 1,
) -> float:
    """Apply one Adam update in place; returns the learning rate used.

    ``grads`` hold sums over ``accum_count`` micro-batches and are averaged
    here. Parameters missing from ``grads`` are left untouched.
    """
    if accum_count < 1:
        raise ValueError("accum_count must be >= 1")
    state.step += 1
    t = state.step
    lr = state.lr_at(t)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} vs parameter {p.shape} for {name}")
        g = g / accum_count
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.data -= update.astype(p.dtype, copy=False)
    return lr


# ---------------------------------------------------------------------------
# checkpoint file: b"PPIB", u32 version, then per parameter until EOF:
# u32 name length, name (utf-8), u32 rank, rank x u32 extents, f32 data (LE)

CHECKPOINT_MAGIC = b"PPIB"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(dest: str | Path | BinaryIO, params: Mapping[str, np.ndarray | Tensor]) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if isinstance(dest, (str, Path)):
        Path(dest).write_bytes(buf.getvalue())
    else:
        dest.write(buf.getvalue())


def read_checkpoint(src: str | Path | bytes) -> dict[str, np.ndarray]:
    data = Path(src).read_bytes() if isinstance(src, (str, Path)) else bytes(src)
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(data) < 8 or struct.unpack_from("<I", data, 4)[0] != CHECKPOINT_VERSION:
        raise CheckpointError("unsupported checkpoint version")
    out: dict[str, np.ndarray] = {}
    pos = 8
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{rank}I", data, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * count > len(data):
                raise CheckpointError(f"truncated data for {name}")
            out[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return out
