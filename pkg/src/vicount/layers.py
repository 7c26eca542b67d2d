"""Named parameter sets and the small dense building blocks shared by the models."""
from __future__ import annotations

import math

import numpy as np

from . import tape as tp
from .tape import Tensor


class ParamSet:
    """Ordered mapping of parameter names to leaf tensors, plus shape metadata."""

    kind = "params"

    def __init__(self, tensors: dict[str, Tensor], **meta):
        self.tensors = dict(tensors)
        self.meta = meta
        for name, t in self.tensors.items():
            t.name = name
            t.requires_grad = True

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self):
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def size(self) -> int:
        return int(sum(t.value.size for t in self.tensors.values()))

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.tensors.items():
            v = np.asarray(arrays[k], dtype=np.float64)
            if v.shape != t.value.shape:
                raise ValueError(f"{k}: expected shape {t.value.shape}, got {v.shape}")
            t.value = v.copy()

    def copy(self):
        clone = object.__new__(type(self))
        ParamSet.__init__(clone, {k: Tensor(t.value.copy()) for k, t in self.tensors.items()}, **self.meta)
        return clone

    def zero_(self) -> None:
        for t in self.tensors.values():
            t.value = np.zeros_like(t.value)


def dense_init(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0):
    w = rng.normal(0.0, gain / math.sqrt(fan_in), size=(fan_in, fan_out))
    return Tensor(w), Tensor(np.zeros(fan_out))


def add_mlp(tensors: dict, prefix: str, dims: list[int], rng: np.random.Generator, last_gain=1.0):
    for k in range(len(dims) - 1):
        gain = last_gain if k == len(dims) - 2 else 1.0
        w, b = dense_init(rng, dims[k], dims[k + 1], gain)
        tensors[f"{prefix}.w{k}"] = w
        tensors[f"{prefix}.b{k}"] = b


def linear(x, params: ParamSet, prefix: str):
    return x @ params[f"{prefix}.w"] + params[f"{prefix}.b"]


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh approximation of the Gaussian error linear unit."""
    x = tp.as_tensor(x)
    return x * (1.0 + tp.tanh((x + 0.044715 * x * x * x) * _GELU_C)) * 0.5


ACTIVATIONS = {"tanh": tp.tanh, "gelu": gelu}


def mlp(x, params: ParamSet, prefix: str, activation: str = "tanh"):
    """Dense layers ``prefix.w0/b0, w1/b1, ...`` with ``activation`` between them."""
    act = ACTIVATIONS[activation]
    k = 0
    while f"{prefix}.w{k + 1}" in params:
        x = act(x @ params[f"{prefix}.w{k}"] + params[f"{prefix}.b{k}"])
        k += 1
    return x @ params[f"{prefix}.w{k}"] + params[f"{prefix}.b{k}"]


def attention(queries, keys, values):
    """Single-head scaled dot-product attention, softmax over the keys."""
    queries = tp.as_tensor(queries)
    dim = queries.shape[1]
    logits = (queries @ tp.as_tensor(keys).T) * (1.0 / math.sqrt(dim))
    return tp.softmax(logits, axis=1) @ values
