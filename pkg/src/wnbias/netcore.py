"""Bias-free homogeneous feed-forward networks with hand-written backprop.

Parameters live in one flat vector.  Layer ``l`` owns a row-major block
``W_l`` of shape ``(layer_dims[l + 1], layer_dims[l])``; each row is the
incoming weight vector of one node and forms a :class:`NeuronGroup`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Sequence

import numpy as np


class Activation(str, Enum):
    LINEAR = "linear"
    RELU = "relu"
    RELU_SQUARED = "relu_squared"


class ShapeError(ValueError):
    """Dimension mismatch; ``layer`` is the 1-based layer at fault (0 = input)."""

    def __init__(self, message: str, layer: int):
        super().__init__(message)
        self.layer = layer


@dataclass(frozen=True)
class NeuronGroup:
    node_id: int
    start: int
    stop: int
    layer: int

    @property
    def param_indices(self) -> range:
        return range(self.start, self.stop)

    @property
    def size(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    layer_dims: tuple[int, ...]
    activations: tuple[Activation, ...]
    frozen_mask: np.ndarray | None = None
    shapes: tuple[tuple[int, int], ...] = field(init=False, repr=False)
    offsets: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self):
        dims = tuple(int(n) for n in self.layer_dims)
        if len(dims) < 2 or any(n <= 0 for n in dims):
            raise ValueError(f"layer_dims must hold >= 2 positive integers, got {self.layer_dims}")
        acts = tuple(Activation(a) for a in self.activations)
        if len(acts) != len(dims) - 2:
            raise ValueError(
                f"need one activation per hidden layer ({len(dims) - 2}), got {len(acts)}"
            )
        shapes = tuple((dims[i + 1], dims[i]) for i in range(len(dims) - 1))
        offsets = [0]
        for r, c in shapes:
            offsets.append(offsets[-1] + r * c)
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "activations", acts)
        object.__setattr__(self, "shapes", shapes)
        object.__setattr__(self, "offsets", tuple(offsets))
        if self.frozen_mask is not None:
            mask = np.asarray(self.frozen_mask, dtype=bool).copy()
            if mask.shape != (offsets[-1],):
                raise ValueError(
                    f"frozen_mask has shape {mask.shape}, expected ({offsets[-1]},)"
                )
            mask.flags.writeable = False
            object.__setattr__(self, "frozen_mask", mask)

    @property
    def n_params(self) -> int:
        return self.offsets[-1]

    @property
    def n_layers(self) -> int:
        return len(self.shapes)

    @cached_property
    def groups(self) -> list[NeuronGroup]:
        out = []
        for layer, ((rows, cols), off) in enumerate(zip(self.shapes, self.offsets), start=1):
            for r in range(rows):
                out.append(NeuronGroup(len(out), off + r * cols, off + (r + 1) * cols, layer))
        return out

    @cached_property
    def n_groups(self) -> int:
        return sum(r for r, _ in self.shapes)

    @cached_property
    def group_starts(self) -> np.ndarray:
        return np.array([g.start for g in self.groups], dtype=np.intp)

    @cached_property
    def group_sizes(self) -> np.ndarray:
        return np.array([g.size for g in self.groups], dtype=np.intp)

    @cached_property
    def group_layers(self) -> np.ndarray:
        return np.array([g.layer for g in self.groups], dtype=np.intp)

    def trainable(self) -> np.ndarray:
        if self.frozen_mask is None:
            return np.ones(self.n_params, dtype=bool)
        return ~self.frozen_mask

    def unflatten(self, params: np.ndarray) -> list[np.ndarray]:
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise ShapeError(
                f"parameter vector has length {params.size}, expected {self.n_params}", layer=0
            )
        return [
            params[off:off + r * c].reshape(r, c)
            for (r, c), off in zip(self.shapes, self.offsets)
        ]

    def to_dict(self) -> dict:
        d = {
            "layer_dims": list(self.layer_dims),
            "activations": [a.value for a in self.activations],
        }
        if self.frozen_mask is not None:
            d["frozen"] = np.flatnonzero(self.frozen_mask).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        if d.get("bias"):
            raise ValueError("bias parameters break homogeneity and are not supported")
        spec = cls(tuple(d["layer_dims"]), tuple(d.get("activations", ())))
        frozen = d.get("frozen")
        if frozen:
            mask = np.zeros(spec.n_params, dtype=bool)
            mask[np.asarray(frozen, dtype=np.intp)] = True
            spec = cls(spec.layer_dims, spec.activations, mask)
        return spec


def _act(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.LINEAR:
        return z
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    r = np.maximum(z, 0.0)
    return r * r


def _act_grad(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.LINEAR:
        return np.ones_like(z)
    if kind is Activation.RELU:
        # derivative at exactly 0 is 0
        return (z > 0.0).astype(z.dtype)
    return 2.0 * np.maximum(z, 0.0)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    output: np.ndarray


def forward_batch(spec: NetworkSpec, params: np.ndarray, X: np.ndarray) -> ForwardCache:
    """Evaluate the network on the rows of ``X``; keeps what backprop needs."""
    Ws = spec.unflatten(params)
    a = np.asarray(X, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != spec.layer_dims[0]:
        raise ShapeError(
            f"input has shape {a.shape}, layer 1 expects width {spec.layer_dims[0]}", layer=1
        )
    inputs, preacts = [], []
    for i, W in enumerate(Ws):
        inputs.append(a)
        z = a @ W.T
        preacts.append(z)
        a = _act(spec.activations[i], z) if i < len(spec.activations) else z
    return ForwardCache(inputs, preacts, a)


def backward_batch(
    spec: NetworkSpec, params: np.ndarray, cache: ForwardCache, dout: np.ndarray
) -> np.ndarray:
    """Return ``sum_i dout[i] . d Phi(w, x_i) / dw`` as a flat vector."""
    Ws = spec.unflatten(params)
    delta = np.asarray(dout, dtype=np.float64)
    if delta.shape != cache.output.shape:
        raise ShapeError(
            f"output seed has shape {delta.shape}, expected {cache.output.shape}",
            layer=spec.n_layers,
        )
    grads: list[np.ndarray] = [None] * len(Ws)  # type: ignore[list-item]
    for i in range(len(Ws) - 1, -1, -1):
        grads[i] = delta.T @ cache.inputs[i]
        if i > 0:
            delta = (delta @ Ws[i]) * _act_grad(spec.activations[i - 1], cache.preacts[i - 1])
    g = np.concatenate([gr.ravel() for gr in grads])
    if spec.frozen_mask is not None:
        g[spec.frozen_mask] = 0.0
    return g


def forward(spec: NetworkSpec, params: np.ndarray, x: Sequence[float]) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a single input vector, got shape {x.shape}", layer=0)
    return forward_batch(spec, params, x[None, :]).output[0]


def gradient(spec: NetworkSpec, params: np.ndarray, x: Sequence[float]) -> np.ndarray:
    """Jacobian of the outputs, shape ``(k, n_params)``; frozen columns are 0."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a single input vector, got shape {x.shape}", layer=0)
    cache = forward_batch(spec, params, x[None, :])
    k = spec.layer_dims[-1]
    rows = []
    for j in range(k):
        seed = np.zeros((1, k))
        seed[0, j] = 1.0
        rows.append(backward_batch(spec, params, cache, seed))
    return np.stack(rows)


def homogeneity_order(spec: NetworkSpec) -> int:
    degree = 0
    for i in range(spec.n_layers):
        degree += 1
        if i < len(spec.activations) and spec.activations[i] is Activation.RELU_SQUARED:
            degree *= 2
    return degree


def group_sq_norms(spec: NetworkSpec, vec: np.ndarray) -> np.ndarray:
    return np.add.reduceat(vec * vec, spec.group_starts)


def init_uniform_fan_in(spec: NetworkSpec, rng: np.random.Generator) -> np.ndarray:
    """Entries of each layer ~ U(-a, a) with a = 1/sqrt(fan_in)."""
    parts = []
    for rows, cols in spec.shapes:
        a = 1.0 / np.sqrt(cols)
        parts.append(rng.uniform(-a, a, size=rows * cols))
    return np.concatenate(parts)
