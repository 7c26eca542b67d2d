"""Head descriptors: density-masked feature extraction and the attentional GNN.

The GNN alternates self-attention (even layers, within a frame) and
cross-attention (odd layers, to the other frame). Each layer updates a
descriptor residually with an MLP of ``[descriptor || message]``; a final
linear projection produces the association descriptors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as tp
from .grid import BinaryMask
from .layers import ParamSet, add_mlp, attention, dense_init, linear, mlp
from .tape import Tensor

__all__ = [
    "AgnnParams",
    "DescriptorSet",
    "agnn_forward",
    "attention",
    "describe_pair",
    "encode_position",
    "extract_descriptors",
]


@dataclass
class DescriptorSet:
    vectors: np.ndarray  # (n, D)
    coords: np.ndarray  # (n, 2) integer grid cells as (x, y)
    frame_tag: str = "t"

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        vectors = np.asarray(self.vectors, dtype=np.float64)
        width = vectors.shape[-1] if vectors.ndim == 2 else -1
        if len(self.coords) == 0 and width == -1:
            width = 0
        self.vectors = vectors.reshape(len(self.coords), width)

    def __len__(self):
        return len(self.coords)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


class AgnnParams(ParamSet):
    kind = "agnn"

    @classmethod
    def init(cls, dim: int, n_layers: int, rng: np.random.Generator) -> AgnnParams:
        if n_layers < 1:
            raise ValueError("the GNN needs at least one layer")
        t = {}
        # start close to the identity map: small positional and message terms and
        # an identity projection, so raw descriptor similarity drives early training
        add_mlp(t, "pos", [2, dim, dim], rng, last_gain=0.1)
        for layer in range(n_layers):
            for name in ("wq", "wk", "wv"):
                t[f"layer{layer}.{name}"], _ = dense_init(rng, dim, dim)
            add_mlp(t, f"layer{layer}.msg", [2 * dim, 2 * dim, dim], rng, last_gain=0.1)
        t["proj.w"], t["proj.b"] = Tensor(np.eye(dim)), Tensor(np.zeros(dim))
        return cls(t, dim=dim, n_layers=n_layers)

    @property
    def dim(self) -> int:
        return self.meta["dim"]

    @property
    def n_layers(self) -> int:
        return self.meta["n_layers"]


def extract_descriptors(feature_grid: np.ndarray, mask: BinaryMask, frame_tag: str = "t") -> DescriptorSet:
    feature_grid = np.asarray(feature_grid, dtype=np.float64)
    if feature_grid.shape[:2] != mask.bits.shape:
        raise ValueError(
            f"feature grid {feature_grid.shape[:2]} and mask {mask.bits.shape} differ in shape"
        )
    ys, xs = np.nonzero(mask.bits)
    return DescriptorSet(feature_grid[ys, xs], np.stack([xs, ys], axis=1), frame_tag)


def normalized_coords(coords: np.ndarray, grid_shape: tuple[int, int]) -> np.ndarray:
    """Cell (x, y) -> cell-center position scaled into [0, 1]; grid_shape is (H, W)."""
    height, width = grid_shape
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    return (coords + 0.5) / np.array([width, height], dtype=np.float64)


def encode_position(coords, params: AgnnParams, grid_shape: tuple[int, int]):
    return mlp(normalized_coords(coords, grid_shape), params, "pos")


def _message_layer(x, source, params: AgnnParams, layer: int):
    wq, wk, wv = (params[f"layer{layer}.{n}"] for n in ("wq", "wk", "wv"))
    message = attention(x @ wq, source @ wk, source @ wv)
    return x + mlp(tp.concat([x, message], axis=1), params, f"layer{layer}.msg")


def agnn_forward(xa, xb, params: AgnnParams):
    """Run the message-passing stack on layer-0 descriptors of both frames.

    ``xa`` (N, D) and ``xb`` (M, D) already include the positional encoding.
    Returns the projected association descriptors ``(dA, dB)`` as tensors.
    """
    xa, xb = tp.as_tensor(xa), tp.as_tensor(xb)
    if xa.shape[0] == 0 or xb.shape[0] == 0:
        raise ValueError("cannot run the GNN on an empty descriptor set")
    for layer in range(params.n_layers):
        if layer % 2 == 0:
            xa, xb = _message_layer(xa, xa, params, layer), _message_layer(xb, xb, params, layer)
        else:
            xa, xb = _message_layer(xa, xb, params, layer), _message_layer(xb, xa, params, layer)
    return linear(xa, params, "proj"), linear(xb, params, "proj")


def describe_pair(set_a: DescriptorSet, set_b: DescriptorSet, params: AgnnParams, grid_shape):
    """Positional enhancement followed by the GNN for one frame pair."""
    xa = tp.as_tensor(set_a.vectors) + encode_position(set_a.coords, params, grid_shape)
    xb = tp.as_tensor(set_b.vectors) + encode_position(set_b.coords, params, grid_shape)
    return agnn_forward(xa, xb, params)
