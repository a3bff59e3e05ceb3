"""Bias-free fully-connected ReLU network that exposes every feature map."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, as_tensor, matmul, relu


@dataclass
class ForwardTrace:
    """Feature maps ``[F0, ..., FK]`` for one batch.

    ``F0`` is the raw input, ``Fk`` the post-ReLU output of layer ``k`` and
    ``FK`` the pre-softmax logits. Entries are live tape nodes.
    """

    feature_maps: list[Tensor]

    def __len__(self) -> int:
        return len(self.feature_maps)

    @property
    def batch_size(self) -> int:
        return self.feature_maps[0].shape[0]


@dataclass
class MLPBackbone:
    layer_dims: list[int]
    weights: list[Tensor] = field(repr=False)

    def __post_init__(self):
        if len(self.layer_dims) < 3:
            raise ConfigurationError(
                f"need at least one hidden layer, got layer_dims={self.layer_dims}")
        if len(self.weights) != len(self.layer_dims) - 1:
            raise ConfigurationError("one weight matrix per consecutive pair of layer dims")
        for k, w in enumerate(self.weights):
            expected = (self.layer_dims[k], self.layer_dims[k + 1])
            if w.shape != expected:
                raise DimensionError(f"W{k + 1} has shape {w.shape}, expected {expected}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def forward(self, x) -> Tensor:
        return forward_with_trace(self, x)[0]

    def predict(self, x) -> np.ndarray:
        """Untracked forward pass on raw arrays; returns logits."""
        h = np.asarray(x, dtype=np.float64)
        squeeze = h.ndim == 1
        if squeeze:
            h = h[None, :]
        last = len(self.weights) - 1
        for k, w in enumerate(self.weights):
            h = h @ w.data
            if k < last:
                h = np.where(h > 0, h, 0.0)
        return h[0] if squeeze else h

    def copy(self) -> "MLPBackbone":
        return MLPBackbone(list(self.layer_dims),
                           [Tensor(w.data, requires_grad=True) for w in self.weights])

    def with_weights(self, arrays: Sequence[np.ndarray]) -> "MLPBackbone":
        return MLPBackbone(list(self.layer_dims),
                           [Tensor(a, requires_grad=True) for a in arrays])

    def to_dict(self) -> dict:
        return {"layer_dims": list(self.layer_dims),
                "weights": [w.data.reshape(-1).tolist() for w in self.weights]}

    @classmethod
    def from_dict(cls, doc: dict) -> "MLPBackbone":
        dims = [int(d) for d in doc["layer_dims"]]
        flat = doc["weights"]
        if len(flat) != len(dims) - 1:
            raise ConfigurationError("checkpoint has the wrong number of weight arrays")
        arrays = []
        for k, values in enumerate(flat):
            arr = np.asarray(values, dtype=np.float64)
            if arr.size != dims[k] * dims[k + 1]:
                raise DimensionError(f"checkpoint weight {k} has {arr.size} values, "
                                     f"expected {dims[k] * dims[k + 1]}")
            arrays.append(arr.reshape(dims[k], dims[k + 1]))
        return cls(dims, [Tensor(a, requires_grad=True) for a in arrays])


def init_backbone(layer_dims: Sequence[int], seed: int) -> MLPBackbone:
    """He-initialised weights, ``W_k ~ N(0, 2 / d_{k-1})``, reproducible per seed."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 3:
        raise ConfigurationError(f"need at least one hidden layer, got layer_dims={dims}")
    if any(d < 1 for d in dims):
        raise ConfigurationError(f"every layer dim must be >= 1, got {dims}")
    rng = np.random.default_rng(seed)
    weights = [Tensor(rng.standard_normal((d_in, d_out)) * np.sqrt(2.0 / d_in), requires_grad=True)
               for d_in, d_out in zip(dims[:-1], dims[1:])]
    return MLPBackbone(dims, weights)


def forward_with_trace(model: MLPBackbone, x) -> tuple[Tensor, ForwardTrace]:
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != model.layer_dims[0]:
        raise DimensionError(f"input of shape {x.shape} does not match input dim "
                             f"{model.layer_dims[0]}")
    maps = [x]
    h = x
    last = model.n_layers - 1
    for k, w in enumerate(model.weights):
        h = matmul(h, w)
        if k < last:
            h = relu(h)
        maps.append(h)
    return h, ForwardTrace(maps)


def save_checkpoint(model: MLPBackbone, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()), encoding="utf-8")


def load_checkpoint(path) -> MLPBackbone:
    return MLPBackbone.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
