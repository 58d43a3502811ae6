"""Learnable-layer helpers shared by the encoders, fusion block and decoder.

Initialization is uniform in +-1/sqrt(fan_in) from a caller-supplied
generator, so a seeded config reproduces weights bit-for-bit.

Parameters are addressed through *slots* -- (name, owner, attribute)
triples -- so callers can both read the current tensors and substitute new
ones (the gradient auditor swaps in its own probe tensors; the checkpoint
loader swaps in restored ones).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, UsageError


def uniform_init(rng: np.random.Generator, shape, fan_in: int,
                 dtype=np.float32) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv3x3:
    """3x3 convolution with bias (stride 1, padding 1 keeps the shape)."""

    def __init__(self, rng, cin: int, cout: int, dtype=np.float32,
                 bias_init: float = 0.0):
        fan_in = cin * 9
        self.w = Tensor(uniform_init(rng, (cout, cin, 3, 3), fan_in, dtype),
                        requires_grad=True)
        self.b = Tensor(np.full((cout, 1, 1), bias_init, dtype=dtype),
                        requires_grad=True)

    def __call__(self, x: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
        return T.add(T.conv2d(x, self.w, stride, padding), self.b)

    def slots(self, prefix: str):
        return [(f"{prefix}.w", self, "w"), (f"{prefix}.b", self, "b")]


class Linear:
    """x @ W + b on 2-D inputs; W is (in, out)."""

    def __init__(self, rng, fin: int, fout: int, bias: bool = True,
                 dtype=np.float32):
        self.w = Tensor(uniform_init(rng, (fin, fout), fin, dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros((fout,), dtype=dtype), requires_grad=True) \
            if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.w)
        if self.b is not None:
            out = T.add(out, self.b)
        return out

    def slots(self, prefix: str):
        out = [(f"{prefix}.w", self, "w")]
        if self.b is not None:
            out.append((f"{prefix}.b", self, "b"))
        return out


def named_parameters(slots) -> list:
    """[(name, Tensor)] for a slot list."""
    return [(name, getattr(owner, attr)) for name, owner, attr in slots]


def load_parameters(slots, tensors):
    """Substitute the given tensors into the slots (shape-checked)."""
    tensors = list(tensors)
    if len(tensors) != len(slots):
        raise UsageError(f"expected {len(slots)} parameter tensors, "
                         f"got {len(tensors)}")
    for (name, owner, attr), t in zip(slots, tensors):
        cur = getattr(owner, attr)
        if t.shape != cur.shape:
            raise UsageError(f"{name}: shape {t.shape} != expected {cur.shape}")
        setattr(owner, attr, t)


def load_param_arrays(slots, arrays):
    """Replace slot tensors with fresh leaves built from raw arrays."""
    arrays = list(arrays)
    if len(arrays) != len(slots):
        raise UsageError(f"expected {len(slots)} parameter arrays, "
                         f"got {len(arrays)}")
    for (name, owner, attr), arr in zip(slots, arrays):
        cur = getattr(owner, attr)
        arr = np.asarray(arr)
        if arr.shape != cur.shape:
            raise UsageError(f"{name}: shape {arr.shape} != expected {cur.shape}")
        setattr(owner, attr, Tensor(arr, requires_grad=True, dtype=cur.dtype))
