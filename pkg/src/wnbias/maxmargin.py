"""Exact hard-margin separator through the origin (no intercept).

Solves ``min 1/2 |w|^2  s.t.  y_i <w, x_i> >= 1`` and reports the unit
direction ``w / |w|`` together with the geometric margin ``1 / |w|``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

KKT_TOL = 1e-8


class NotSeparableError(ValueError):
    pass


@dataclass
class MarginSolution:
    w_star: np.ndarray
    margin: float
    support_indices: np.ndarray
    duals: np.ndarray
    kkt_residual: float


def _kkt_residual(Z: np.ndarray, lam: np.ndarray) -> float:
    """Scale-free KKT violation of a dual vector for the canonical problem."""
    w = Z.T @ lam
    s = Z @ w
    primal = max(0.0, 1.0 - s.min())
    slack = np.max(np.abs(lam * (s - 1.0))) if lam.size else 0.0
    dual = max(0.0, -lam.min()) if lam.size else 0.0
    return float(max(primal, slack, dual) / max(1.0, np.linalg.norm(w)))


def _solve_support(Z: np.ndarray, support) -> tuple[np.ndarray, np.ndarray] | None:
    Zs = Z[list(support)]
    K = Zs @ Zs.T
    try:
        lam_s = np.linalg.solve(K, np.ones(len(support)))
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(lam_s)):
        return None
    lam = np.zeros(Z.shape[0])
    lam[list(support)] = lam_s
    return lam, Zs.T @ lam_s


def _enumerate(Z: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    m, d = Z.shape
    best = None
    for k in range(1, d + 1):
        for support in itertools.combinations(range(m), k):
            sol = _solve_support(Z, support)
            if sol is None:
                continue
            lam, w = sol
            if lam.min() < -tol or (Z @ w).min() < 1.0 - 1e-9:
                continue
            if best is None or w @ w < best[1] @ best[1]:
                best = (lam, w)
    if best is None:
        raise NotSeparableError("no separating direction through the origin exists")
    return best[0]


def _projected_gradient(Z: np.ndarray, max_iter: int = 200_000) -> np.ndarray:
    m = Z.shape[0]
    lip = np.linalg.norm(Z, 2) ** 2
    lam = np.zeros(m)
    mom = lam.copy()
    tk = 1.0
    for it in range(max_iter):
        grad = Z @ (Z.T @ mom) - 1.0
        nxt = np.maximum(mom - grad / lip, 0.0)
        tk1 = 0.5 * (1 + np.sqrt(1 + 4 * tk * tk))
        mom = nxt + ((tk - 1) / tk1) * (nxt - lam)
        lam, tk = nxt, tk1
        if lam.sum() > 1e12:
            raise NotSeparableError("dual objective unbounded: data not separable")
        if it % 50 == 0 and lam.any():
            support = np.flatnonzero(lam > 1e-9 * lam.max())
            sol = _solve_support(Z, support)
            if sol is not None and _kkt_residual(Z, sol[0]) < KKT_TOL:
                return sol[0]
            if _kkt_residual(Z, lam) < KKT_TOL:
                return lam
    raise RuntimeError("projected gradient did not reach the KKT tolerance")


def max_margin_oracle(data) -> MarginSolution:
    """Hard-margin separator for a binary, linearly separable ``LabeledSet``.

    Planar data is solved by enumerating every candidate support set and
    keeping the feasible one with nonnegative duals; higher dimensions use
    accelerated projected gradient on the dual with an exact polish on the
    detected support.
    """
    if not data.is_binary:
        raise ValueError("max-margin oracle needs labels in {-1, +1}")
    Z = data.X * data.y[:, None].astype(np.float64)
    if np.any(np.linalg.norm(Z, axis=1) == 0):
        raise NotSeparableError("a data point sits at the origin")
    lam = _enumerate(Z) if Z.shape[1] <= 2 else _projected_gradient(Z)
    lam = np.where(lam < 0, 0.0, lam)
    res = _kkt_residual(Z, lam)
    if res >= KKT_TOL:
        raise RuntimeError(f"max-margin self-check failed: KKT residual {res:.3g}")
    w = Z.T @ lam
    norm = np.linalg.norm(w)
    support = np.flatnonzero(lam > 0)
    return MarginSolution(w / norm, float(1.0 / norm), support, lam[support], res)
