"""Exponential and cross-entropy losses evaluated in log scale.

The gradient is returned factored as ``grad L = exp(log_total) * grad_core``
where ``grad_core`` stays O(1) however small the loss gets, so training to
``L = e^-300`` never forms a number near the float64 underflow boundary.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import LabeledSet
from .netcore import NetworkSpec, backward_batch, forward_batch, homogeneity_order


def logsumexp(a: np.ndarray, axis=None) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True)) + amax
    return out.squeeze(axis) if axis is not None else out.reshape(())


@dataclass
class LogLossReport:
    log_total: float
    per_example_log: np.ndarray
    softmax_weights: np.ndarray
    grad_core: np.ndarray
    margins: np.ndarray
    outputs: np.ndarray

    @property
    def total(self) -> float:
        return float(np.exp(self.log_total))

    def gradient(self) -> np.ndarray:
        """Plain ``grad L``; underflows to zero once the loss is tiny."""
        return np.exp(self.log_total) * self.grad_core


@dataclass
class CrossEntropyWeights:
    log_M: np.ndarray

    @property
    def M(self) -> np.ndarray:
        return np.exp(self.log_M)


def _check_binary(data: LabeledSet) -> None:
    if not data.is_binary:
        raise ValueError("exponential loss needs labels in {-1, +1}")


def exp_loss(spec: NetworkSpec, params: np.ndarray, data: LabeledSet) -> LogLossReport:
    _check_binary(data)
    if spec.layer_dims[-1] != 1:
        raise ValueError("exponential loss needs a scalar-output network")
    cache = forward_batch(spec, params, data.X)
    phi = cache.output[:, 0]
    y = data.y.astype(np.float64)
    margins = y * phi
    per_log = -margins
    log_total = float(logsumexp(per_log))
    p = np.exp(per_log - log_total)
    p /= p.sum()
    core = backward_batch(spec, params, cache, (-p * y)[:, None])
    return LogLossReport(log_total, per_log, p, core, margins, cache.output)


def _pairwise(outputs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """``Phi_{y_i} - Phi_j`` with +inf on the true-class column."""
    m = outputs.shape[0]
    true = outputs[np.arange(m), labels]
    diff = true[:, None] - outputs
    diff[np.arange(m), labels] = np.inf
    return diff


def _check_labels(data: LabeledSet, k: int) -> np.ndarray:
    y = np.asarray(data.y)
    if k < 2:
        raise ValueError("cross-entropy needs at least 2 outputs")
    if not np.issubdtype(y.dtype, np.integer) and not np.all(y == np.round(y)):
        raise ValueError("cross-entropy labels must be integers")
    y = y.astype(np.intp)
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]")
    return y


def _log_softplus_exp(ls: np.ndarray) -> np.ndarray:
    """``log(log1p(exp(ls)))`` accurate over the whole real line."""
    out = np.empty_like(ls)
    small = ls < -30.0
    # log1p(s) = s (1 - s/2 + ...), so log log1p(s) = ls + log1p(-s/2 + ...)
    out[small] = ls[small] + np.log1p(-0.5 * np.exp(ls[small]))
    out[~small] = np.log(np.logaddexp(0.0, ls[~small]))
    return out


def xent_loss(
    spec: NetworkSpec, params: np.ndarray, data: LabeledSet, return_weights: bool = False
):
    k = spec.layer_dims[-1]
    y = _check_labels(data, k)
    cache = forward_batch(spec, params, data.X)
    out = cache.output
    m = out.shape[0]
    diff = _pairwise(out, y)
    log_M = -diff  # -inf on the true class
    ls = logsumexp(log_M, axis=1)  # log s_i
    per_log = _log_softplus_exp(ls)
    log_total = float(logsumexp(per_log))
    p = np.exp(per_log - log_total)
    p /= p.sum()
    # d l_i / d Phi_j = e^{-(Phi_y - Phi_j)} / (1 + s_i) for j != y_i, the
    # negated row sum on j = y_i; divided by L in log space.
    log_coef = log_M - np.logaddexp(0.0, ls)[:, None] - log_total
    seed = np.exp(log_coef)
    seed[np.arange(m), y] = 0.0
    seed[np.arange(m), y] = -seed.sum(axis=1)
    core = backward_batch(spec, params, cache, seed)
    margins = np.min(diff, axis=1)
    report = LogLossReport(log_total, per_log, p, core, margins, out)
    if return_weights:
        return report, CrossEntropyWeights(log_M)
    return report


def compute_loss(kind: str, spec: NetworkSpec, params: np.ndarray, data: LabeledSet):
    if kind == "exp":
        return exp_loss(spec, params, data)
    if kind == "xent":
        return xent_loss(spec, params, data)
    raise ValueError(f"unknown loss {kind!r}")


def normalized_margin(spec: NetworkSpec, params: np.ndarray, data: LabeledSet) -> float:
    norm = float(np.linalg.norm(params))
    if norm == 0.0:
        raise ValueError("normalized margin is undefined at w = 0")
    out = forward_batch(spec, params, data.X).output
    if spec.layer_dims[-1] == 1 and data.is_binary:
        raw = np.min(data.y * out[:, 0])
    else:
        y = _check_labels(data, spec.layer_dims[-1])
        raw = np.min(_pairwise(out, y))
    return float(raw / norm ** homogeneity_order(spec))
