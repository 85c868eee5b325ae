"""Layers, parameter containers, the Adam optimiser and checkpoint I/O."""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Minimal parameter container with train/eval switching.

    Parameters are Tensor attributes with ``requires_grad``; buffers are numpy
    arrays registered through :meth:`register_buffer`.  Children are Module
    attributes or lists of Modules.
    """

    def __init__(self):
        self.training = True
        self._buffers: dict = {}

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def children(self) -> Iterator[tuple]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state dict lacks {sorted(missing)}")
        for name, p in params.items():
            p.data = np.array(state[name], dtype=p.data.dtype).reshape(p.shape)
        for name, b in buffers.items():
            b[...] = np.asarray(state[name], dtype=b.dtype).reshape(b.shape)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Linear(Module):
    """``y = x W + b`` with ``W`` of shape (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32, bias=True):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.weight = parameter(glorot(rng, n_in, n_out, (n_in, n_out), dtype))
        self.bias = parameter(np.zeros(n_out, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise T.DimensionError(f"Linear expects {self.n_in} input features, got shape {x.shape}")
        y = T.matmul(x, self.weight)
        return y if self.bias is None else T.add(y, self.bias)


class Conv2d(Module):
    """3x3 convolution with padding 1 and bias."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        std = math.sqrt(2.0 / (c_in * 9))
        self.weight = parameter((rng.standard_normal((c_out, c_in, 3, 3)) * std).astype(dtype))
        self.bias = parameter(np.zeros(c_out, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)


class Conv1x1(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.weight = parameter(glorot(rng, c_in, c_out, (c_out, c_in), dtype))
        self.bias = parameter(np.zeros(c_out, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1x1(x, self.weight, self.bias)


class BatchNorm(Module):
    """Batch normalisation over axis 1; momentum 0.1, eps 1e-5."""

    def __init__(self, n: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = parameter(np.ones(n, dtype=dtype))
        self.beta = parameter(np.zeros(n, dtype=dtype))
        self.momentum, self.eps = momentum, eps
        self.register_buffer("running_mean", np.zeros(n, dtype=dtype))
        self.register_buffer("running_var", np.ones(n, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm(
            x,
            self.gamma,
            self.beta,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            self.training and (x.ndim > 2 or x.shape[0] > 1),
            self.momentum,
            self.eps,
        )


class Dropout(Module):
    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        return T.dropout(x, self.rate, self.training, rng)


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params, lr=5e-4, weight_decay=3e-5, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)


# -- checkpoint format --------------------------------------------------------
# One JSON header line {"tensors": [{name, shape, offset}]}, newline, then the
# concatenated little-endian float32 payload.  Offsets are in bytes from the
# start of the payload.

def save_checkpoint(path, state: dict) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"format": "f32le", "tensors": entries}, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    cut = raw.index(b"\n")
    header = json.loads(raw[:cut].decode("utf-8"))
    payload = raw[cut + 1:]
    out = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        out[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return out
