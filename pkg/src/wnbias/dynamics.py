"""Discrete-time steppers for EWN, SWN, plain GD and the adaptive-rate emulation.

Every stepper consumes a :class:`~wnbias.lossland.LogLossReport` and uses the
factored gradient ``exp(log_total) * grad_core``; the scalar
``eta * exp(log_total)`` is formed in log space.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .lossland import LogLossReport
from .netcore import NetworkSpec

KINDS = ("unnorm", "swn", "ewn")


class NonFiniteStepError(FloatingPointError):
    pass


@dataclass(eq=False)
class ParamState:
    """Parameters of one network under one parameterization.

    ``v`` uses the flat layout of the network.  For normalized groups it holds
    the direction vectors ``v_u``; everywhere else it holds raw weights.
    ``scale`` is ``alpha_u`` (EWN) or ``gamma_u`` (SWN) per group.
    """

    spec: NetworkSpec
    kind: str
    v: np.ndarray
    scale: np.ndarray
    normalized: np.ndarray
    step_count: int = 0
    d: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown parameterization {self.kind!r}")

    @classmethod
    def from_weights(
        cls, spec: NetworkSpec, w: np.ndarray, kind: str, normalized_layers=None
    ) -> "ParamState":
        """Represent ``w`` exactly under ``kind`` with ``|v_u| = 1``.

        Fully frozen groups are never normalized so their values stay bit-exact.
        """
        w = np.array(w, dtype=np.float64)
        if w.shape != (spec.n_params,):
            raise ValueError(f"weights have shape {w.shape}, expected ({spec.n_params},)")
        G = spec.n_groups
        normalized = np.zeros(G, dtype=bool)
        scale = np.zeros(G)
        if kind == "unnorm":
            return cls(spec, kind, w, scale, normalized)
        if normalized_layers is None:
            mask = np.ones(G, dtype=bool)
        else:
            mask = np.isin(spec.group_layers, list(normalized_layers))
        frozen = spec.frozen_mask
        v = w.copy()
        for g in spec.groups:
            sl = slice(g.start, g.stop)
            if not mask[g.node_id]:
                continue
            if frozen is not None:
                fz = frozen[sl]
                if fz.all():
                    continue
                if fz.any() and np.any(w[sl][fz] != 0.0):
                    raise ValueError(
                        f"node {g.node_id}: partially frozen groups need frozen entries at 0"
                    )
            norm = np.linalg.norm(w[sl])
            if norm == 0.0:
                raise ValueError(f"node {g.node_id} has zero weights; cannot normalize")
            v[sl] = w[sl] / norm
            scale[g.node_id] = np.log(norm) if kind == "ewn" else norm
            normalized[g.node_id] = True
        return cls(spec, kind, v, scale, normalized)

    def copy(self) -> "ParamState":
        return replace(self, v=self.v.copy(), scale=self.scale.copy(),
                       normalized=self.normalized.copy())

    def group_factor(self) -> np.ndarray:
        """Per-group ``|w_u| / |v_u|`` (``e^alpha`` or ``gamma``) for normalized groups."""
        if self.kind == "ewn":
            return np.exp(self.scale)
        return self.scale.copy()

    def materialize(self) -> np.ndarray:
        if self.kind == "unnorm" or not self.normalized.any():
            return self.v.copy()
        starts = self.spec.group_starts
        sizes = self.spec.group_sizes
        vnorm = np.sqrt(np.add.reduceat(self.v * self.v, starts))
        with np.errstate(divide="ignore", invalid="ignore"):
            factor = np.where(self.normalized, self.group_factor() / vnorm, 1.0)
        return self.v * np.repeat(factor, sizes)


def _step_scale(eta: float, log_total: float) -> float:
    if eta < 0 or not np.isfinite(eta):
        raise ValueError(f"learning rate must be finite and >= 0, got {eta}")
    if eta == 0.0:
        return 0.0
    with np.errstate(over="ignore"):
        return float(np.exp(np.log(eta) + log_total))


def _normalized_step(state: ParamState, report: LogLossReport, eta: float, expo: bool):
    s = _step_scale(eta, report.log_total)
    spec = state.spec
    starts, sizes = spec.group_starts, spec.group_sizes
    G = report.grad_core
    v = state.v
    vsq = np.add.reduceat(v * v, starts)
    vnorm = np.sqrt(vsq)
    dot = np.add.reduceat(v * G, starts)
    norm_mask = state.normalized
    with np.errstate(over="raise", invalid="raise"):
        try:
            factor = np.where(norm_mask, state.group_factor(), 0.0)
            safe_vnorm = np.where(norm_mask, vnorm, 1.0)
            coef = s * factor / safe_vnorm
            # d alpha carries e^alpha (= factor); d gamma has no gamma factor
            scale_coef = coef if expo else s / safe_vnorm
            scale = state.scale - np.where(norm_mask, scale_coef * dot, 0.0)
            # v_u <- v_u - coef (G_u - v_u (v_u.G_u)/|v_u|^2); raw groups get plain GD
            proj = np.where(norm_mask, dot / np.where(norm_mask, vsq, 1.0), 0.0)
            rep_coef = np.repeat(np.where(norm_mask, coef, s), sizes)
            new_v = v - rep_coef * (G - v * np.repeat(proj, sizes))
        except FloatingPointError as exc:
            raise NonFiniteStepError(f"{state.kind} step overflowed: {exc}") from exc
    if not (np.all(np.isfinite(new_v)) and np.all(np.isfinite(scale))):
        raise NonFiniteStepError(f"{state.kind} step produced non-finite parameters")
    if expo and np.any(scale[norm_mask] > 700.0):
        raise NonFiniteStepError("exp(alpha) about to overflow")
    return replace(state, v=new_v, scale=scale, step_count=state.step_count + 1,
                   d=state.d + eta, normalized=state.normalized.copy())


def ewn_step(state: ParamState, report: LogLossReport, eta: float) -> ParamState:
    """One gradient step on ``(alpha_u, v_u)`` with ``w_u = e^alpha_u v_u/|v_u|``."""
    if state.kind != "ewn":
        raise TypeError(f"ewn_step needs an EWN state, got {state.kind}")
    return _normalized_step(state, report, eta, expo=True)


def swn_step(state: ParamState, report: LogLossReport, eta: float) -> ParamState:
    """One gradient step on ``(gamma_u, v_u)`` with ``w_u = gamma_u v_u/|v_u|``."""
    if state.kind != "swn":
        raise TypeError(f"swn_step needs an SWN state, got {state.kind}")
    return _normalized_step(state, report, eta, expo=False)


def unnorm_step(state: ParamState, report: LogLossReport, eta: float) -> ParamState:
    if state.kind != "unnorm":
        raise TypeError(f"unnorm_step needs an Unnorm state, got {state.kind}")
    s = _step_scale(eta, report.log_total)
    with np.errstate(over="ignore", invalid="ignore"):
        new_w = state.v - s * report.grad_core
    if not np.all(np.isfinite(new_w)):
        raise NonFiniteStepError("unnorm step produced non-finite parameters")
    return replace(state, v=new_w, step_count=state.step_count + 1, d=state.d + eta)


def adaptive_unnorm_step(state: ParamState, report: LogLossReport, eta: float) -> ParamState:
    """Per-node rate ``eta |w_u|^2``: forward Euler on the EWN flow in w-space."""
    if state.kind != "unnorm":
        raise TypeError(f"adaptive_unnorm_step needs an Unnorm state, got {state.kind}")
    s = _step_scale(eta, report.log_total)
    spec = state.spec
    w = state.v
    sq = np.add.reduceat(w * w, spec.group_starts)
    with np.errstate(over="ignore", invalid="ignore"):
        new_w = w - s * np.repeat(sq, spec.group_sizes) * report.grad_core
    if not np.all(np.isfinite(new_w)):
        raise NonFiniteStepError("adaptive step produced non-finite parameters")
    return replace(state, v=new_w, step_count=state.step_count + 1, d=state.d + eta)


STEPPERS = {
    "ewn": ewn_step,
    "swn": swn_step,
    "unnorm": unnorm_step,
    "adaptive_unnorm": adaptive_unnorm_step,
}


def state_kind(dynamics: str) -> str:
    return "unnorm" if dynamics == "adaptive_unnorm" else dynamics


# -- learning-rate schedules --------------------------------------------------

@dataclass
class LRSchedule:
    """``Constant`` uses ``eta``; ``power`` uses ``eta = k / L^c``.

    In the power schedule ``k`` grows by ``grow`` after a step that lowers the
    loss and shrinks by ``shrink`` otherwise, never exceeding ``cap``.
    """

    kind: str = "constant"
    eta: float = 1e-3
    c: float = 1.0
    k: float = 0.01
    grow: float = 1.1
    shrink: float = 1.1
    cap: float = 0.01

    def __post_init__(self):
        if self.kind not in ("constant", "power"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.kind == "power":
            if not 0.0 < self.c <= 1.0:
                raise ValueError(f"power schedule needs c in (0, 1], got {self.c}")
            if not 0.0 < self.k <= self.cap:
                raise ValueError(f"need 0 < k <= cap, got k={self.k}, cap={self.cap}")
        elif self.eta < 0:
            raise ValueError("constant learning rate must be >= 0")

    def log_eta(self, log_total: float) -> float:
        if self.kind == "constant":
            return float(np.log(self.eta)) if self.eta > 0 else -np.inf
        return float(np.log(self.k) - self.c * log_total)

    def rate(self, log_total: float) -> float:
        return float(np.exp(self.log_eta(log_total)))

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "eta": self.eta}
        return {"kind": "power", "c": self.c, "k": self.k, "grow": self.grow,
                "shrink": self.shrink, "cap": self.cap}


def schedule_next(sched: LRSchedule, prev_log_total: float, new_log_total: float) -> LRSchedule:
    if sched.kind == "constant":
        return sched
    k = sched.k * sched.grow if new_log_total < prev_log_total else sched.k / sched.shrink
    return replace(sched, k=min(k, sched.cap))


# -- per-node diagnostics -------------------------------------------------------

@dataclass
class NodeStats:
    """Per-node quantities at one iterate, all logs natural."""

    norms: np.ndarray
    log_grad_norms: np.ndarray
    cosines: np.ndarray
    log_a5: np.ndarray = field(default=None)  # type: ignore[assignment]


def node_stats(spec: NetworkSpec, w: np.ndarray, report: LogLossReport,
               log_eta: float | None = None) -> NodeStats:
    starts = spec.group_starts
    G = report.grad_core
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        wn = np.sqrt(np.add.reduceat(w * w, starts))
        gn = np.sqrt(np.add.reduceat(G * G, starts))
        dot = np.add.reduceat(w * G, starts)
        lgn = report.log_total + np.log(gn)
        cos = np.where((wn > 0) & (gn > 0), -dot / (wn * gn), 0.0)
    cos = np.clip(cos, -1.0, 1.0)
    stats = NodeStats(wn, lgn, cos)
    if log_eta is not None:
        with np.errstate(divide="ignore"):
            stats.log_a5 = log_eta + np.log(wn) + lgn
    return stats


def a5_monitor(state: ParamState, report: LogLossReport, eta: float) -> np.ndarray:
    """Per-node ``eta |w_u| |grad_u L|``, evaluated in log space."""
    if eta == 0.0:
        return np.zeros(state.spec.n_groups)
    w = state.materialize()
    stats = node_stats(state.spec, w, report, float(np.log(eta)))
    return np.exp(stats.log_a5)


@dataclass
class StepReport:
    norms_before: np.ndarray
    norms_after: np.ndarray
    log_grad_norms: np.ndarray
    cosines: np.ndarray
    accepted: bool


def step_report(before: ParamState, after: ParamState, report: LogLossReport,
                new_log_total: float) -> StepReport:
    spec = before.spec
    wb, wa = before.materialize(), after.materialize()
    stats = node_stats(spec, wb, report)
    na = np.sqrt(np.add.reduceat(wa * wa, spec.group_starts))
    return StepReport(stats.norms, na, stats.log_grad_norms, stats.cosines,
                      bool(new_log_total < report.log_total))
