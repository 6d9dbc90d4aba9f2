"""Checks run over trajectory records: direction limits, norm laws, sparsity,
max-margin agreement, loss rates and norm-growth pruning."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from .datasets import LabeledSet
from .dynamics import STEPPERS, ParamState
from .lossland import compute_loss
from .maxmargin import MarginSolution, max_margin_oracle  # noqa: F401  (re-export)
from .netcore import NetworkSpec, forward_batch
from .records import TrajectoryRecord

SURVIVAL_THRESHOLD = 0.1
THEOREM2_LEVELS = (-200.0, -250.0, -300.0)


class InsufficientTailError(ValueError):
    """A rate fit was requested on a record with too few usable tail points."""


def _max_pairwise_angle(D: np.ndarray) -> float:
    if len(D) < 2:
        return 0.0
    gram = np.clip(D @ D.T, -1.0, 1.0)
    return float(np.arccos(gram.min()))


# -- direction limits -----------------------------------------------------------

@dataclass
class WindowChange:
    first_step: np.ndarray
    last_step: np.ndarray
    max_angle: np.ndarray

    @property
    def tail(self) -> float:
        return float(self.max_angle[-1]) if self.max_angle.size else 0.0


def direction_convergence(rec: TrajectoryRecord, ratio: float = 2.0) -> WindowChange:
    """Max angle between stored unit directions inside windows ``[r^j, r^(j+1))``.

    Step 0 joins the first window.
    """
    if ratio <= 1:
        raise ValueError("window ratio must exceed 1")
    D = rec.directions()
    steps = np.maximum(rec.step, 1)
    idx = np.floor(np.log(steps) / np.log(ratio) + 1e-12).astype(np.int64)
    first, last, ang = [], [], []
    for j in np.unique(idx):
        rows = np.flatnonzero(idx == j)
        first.append(rec.step[rows[0]])
        last.append(rec.step[rows[-1]])
        ang.append(_max_pairwise_angle(D[rows]))
    return WindowChange(np.array(first), np.array(last), np.array(ang))


def tail_rows(rec: TrajectoryRecord, frac: float = 0.2) -> np.ndarray:
    """Rows in the final ``frac`` of the run's log-loss decrease."""
    lo, hi = rec.log_total[-1], rec.log_total[0]
    cut = lo + frac * (hi - lo)
    return np.flatnonzero(rec.log_total <= cut)


def window_medians(values: np.ndarray, n_windows: int = 5) -> np.ndarray:
    chunks = np.array_split(np.asarray(values, dtype=np.float64), n_windows)
    if any(c.size == 0 for c in chunks):
        raise ValueError(f"need at least {n_windows} values, got {len(values)}")
    return np.array([np.median(c) for c in chunks])


def trend_is(values: np.ndarray, direction: str, n_windows: int = 5) -> bool:
    """Compare medians of consecutive equal-length windows.

    ``"decreasing"`` needs strictly falling medians; ``"nondecreasing"``
    needs medians that never fall.
    """
    med = window_medians(values, n_windows)
    diff = np.diff(med)
    if direction == "decreasing":
        return bool(np.all(diff < 0))
    if direction == "nondecreasing":
        return bool(np.all(diff >= 0))
    raise ValueError(f"unknown direction {direction!r}")


# -- sparsity and norm laws -----------------------------------------------------

@dataclass
class SparsityProfile:
    surviving: np.ndarray
    counts: dict
    relative_growth: np.ndarray


def _node_layers(rec: TrajectoryRecord, layers=None) -> np.ndarray:
    if layers is not None:
        return np.asarray(layers)
    if "group_layers" in rec.meta:
        return np.asarray(rec.meta["group_layers"])
    return np.zeros(rec.n_nodes, dtype=np.int64)


def sparsity_profile(rec: TrajectoryRecord, growth_threshold: float = SURVIVAL_THRESHOLD,
                     layers=None) -> SparsityProfile:
    """Nodes whose norm growth exceeds ``growth_threshold`` times the largest
    growth among nodes of the same layer."""
    growth = rec.norms[-1] - rec.norms[0]
    lay = _node_layers(rec, layers)
    rel = np.zeros_like(growth)
    surviving = np.zeros(growth.size, dtype=bool)
    counts = {}
    for layer in np.unique(lay):
        sel = lay == layer
        top = growth[sel].max()
        if top > 0:
            rel[sel] = growth[sel] / top
            surviving[sel] = growth[sel] > growth_threshold * top
        counts[int(layer)] = int(surviving[sel].sum())
    return SparsityProfile(np.flatnonzero(surviving), counts, rel)


def theorem2_spread(rec: TrajectoryRecord, mode: str, row: int = -1, nodes=None) -> float:
    """Spread of ``log|w_u| +/- log|grad_u L|`` over surviving nodes at one row.

    EWN uses the sum (product law), SWN the difference (ratio law).
    """
    if nodes is None:
        nodes = sparsity_profile(rec).surviving
    nodes = np.asarray(nodes, dtype=np.intp)
    if nodes.size < 2:
        return 0.0
    ln = np.log(rec.norms[row, nodes])
    lg = rec.log_grad_norms[row, nodes]
    if mode == "ewn":
        q = ln + lg
    elif mode == "swn":
        q = ln - lg
    else:
        raise ValueError(f"mode must be 'ewn' or 'swn', got {mode!r}")
    return float(q.max() - q.min())


def theorem2_checkpoints(rec: TrajectoryRecord, mode: str, levels=THEOREM2_LEVELS,
                         nodes=None) -> list[float]:
    if nodes is None:
        nodes = sparsity_profile(rec).surviving
    return [theorem2_spread(rec, mode, rec.row_at_loss(lv), nodes) for lv in levels]


def prop2_alignment(rec: TrajectoryRecord, final_grad_core: np.ndarray, spec: NetworkSpec,
                    threshold: float = 0.05, nodes=None) -> dict[int, float]:
    """Cosine between each node's final weight and the negated final gradient core.

    Nodes are kept when their share of the unit direction exceeds ``threshold``
    (or are listed explicitly in ``nodes``).
    """
    w = rec.params[-1]
    g = -np.asarray(final_grad_core, dtype=np.float64)
    wt = w / np.linalg.norm(w)
    out = {}
    keep = None if nodes is None else set(int(n) for n in nodes)
    for grp in spec.groups:
        sl = slice(grp.start, grp.stop)
        wn = np.linalg.norm(wt[sl])
        if keep is not None and grp.node_id not in keep:
            continue
        if keep is None and wn <= threshold:
            continue
        gn = np.linalg.norm(g[sl])
        out[grp.node_id] = float(wt[sl] @ g[sl] / (wn * gn)) if gn > 0 and wn > 0 else 0.0
    return out


# -- max-margin agreement for deep linear nets ----------------------------------

@dataclass
class Corollary1Result:
    cosine: float
    angle: float
    kkt_residual: float
    oracle: MarginSolution


def linear_predictor(spec: NetworkSpec, params: np.ndarray) -> np.ndarray:
    """``theta = (W_n ... W_1)^T`` for a linear network with scalar output."""
    if any(a != "linear" for a in spec.activations):
        raise ValueError("end-to-end predictor needs all-linear activations")
    mats = spec.unflatten(params)
    prod = mats[0]
    for W in mats[1:]:
        prod = W @ prod
    if prod.shape[0] != 1:
        raise ValueError("end-to-end predictor needs a scalar output")
    return prod[0].copy()


def kkt_residual(theta: np.ndarray, data: LabeledSet) -> float:
    """How far ``theta`` is from a KKT point of the hard-margin problem.

    ``theta`` is rescaled to unit minimum margin.  Nonnegative multipliers come
    from one NNLS solve that minimizes the squared stationarity error plus the
    squared per-point slackness terms ``lam_i slack_i``, all relative to
    ``|theta|``.  Returns stationarity plus total slackness; 0 at the optimum.
    """
    Z = data.X * data.y[:, None].astype(np.float64)
    s = Z @ theta
    if s.min() <= 0:
        return float("inf")
    th = theta / s.min()
    sq = th @ th
    slack = Z @ th - 1.0
    A = np.vstack([Z.T, np.diag(slack) / np.sqrt(sq)])
    lam, _ = nnls(A, np.concatenate([th, np.zeros(len(slack))]))
    stat = np.linalg.norm(th - Z.T @ lam) / np.sqrt(sq)
    comp = float(lam @ slack) / sq
    return float(stat + comp)


def corollary1_check(params: np.ndarray, spec: NetworkSpec, data: LabeledSet) -> Corollary1Result:
    theta = linear_predictor(spec, params)
    sol = max_margin_oracle(data)
    cos = float(theta @ sol.w_star / np.linalg.norm(theta))
    return Corollary1Result(cos, float(np.arccos(np.clip(cos, -1, 1))),
                            kkt_residual(theta, data), sol)


# -- loss rates -----------------------------------------------------------------

@dataclass
class RateFit:
    """``-log L = a log d + b loglog d + c`` over the tail.

    ``a`` is held at 1 for the headline exponent ``b``; ``a_free``/``b_free``
    come from the unconstrained three-term fit.
    """

    a: float
    b: float
    c: float
    residual: float
    n_points: int
    a_free: float
    b_free: float


def fit_rate(rec: TrajectoryRecord, L: int | None = None, exclude_frac: float = 0.2,
             min_points: int = 50) -> RateFit:
    steps = rec.step
    keep = (steps >= exclude_frac * steps[-1]) & (rec.d > 1.0)
    if keep.sum() < min_points:
        raise InsufficientTailError(
            f"rate fit needs {min_points} tail points with d > 1, found {int(keep.sum())}"
        )
    h = -rec.log_total[keep]
    ld = np.log(rec.d[keep])
    lld = np.log(ld)
    A = np.column_stack([lld, np.ones_like(lld)])
    coef, *_ = np.linalg.lstsq(A, h - ld, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - (h - ld)) ** 2)))
    A3 = np.column_stack([ld, lld, np.ones_like(lld)])
    free, *_ = np.linalg.lstsq(A3, h, rcond=None)
    return RateFit(1.0, float(coef[0]), float(coef[1]), resid, int(keep.sum()),
                   float(free[0]), float(free[1]))


def predicted_exponent(dynamics: str, L: int) -> float:
    return 2.0 if dynamics == "ewn" else 2.0 - 2.0 / L


# -- flow equivalence -------------------------------------------------------------

def theorem1_deviation(spec: NetworkSpec, w0: np.ndarray, data: LabeledSet, eta: float,
                       total_time: float, loss: str = "exp") -> float:
    """Max parameter distance between EWN steps and per-node ``eta |w_u|^2`` steps."""
    n = int(round(total_time / eta))
    ewn = ParamState.from_weights(spec, w0, "ewn")
    ada = ParamState.from_weights(spec, w0, "unnorm")
    worst = 0.0
    for _ in range(n):
        we, wa = ewn.materialize(), ada.materialize()
        ewn = STEPPERS["ewn"](ewn, compute_loss(loss, spec, we, data), eta)
        ada = STEPPERS["adaptive_unnorm"](ada, compute_loss(loss, spec, wa, data), eta)
        worst = max(worst, float(np.linalg.norm(ewn.materialize() - ada.materialize())))
    return worst


# -- pruning --------------------------------------------------------------------

@dataclass
class PruneCurve:
    fractions: np.ndarray
    accuracy: np.ndarray
    order: np.ndarray


def predict(spec: NetworkSpec, params: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Class predictions; ties go to the lowest class index (``+1`` for scalar output)."""
    out = forward_batch(spec, params, X).output
    if out.shape[1] == 1:
        return np.where(out[:, 0] >= 0, 1, -1)
    return np.argmax(out, axis=1)


def prune_eval(spec: NetworkSpec, trained: ParamState, init: ParamState, test: LabeledSet,
               fractions) -> PruneCurve:
    """Zero the incoming weights of the first-layer nodes that grew least."""
    w1, w0 = trained.materialize(), init.materialize()
    first = [g for g in spec.groups if g.layer == 1]
    growth = np.array([np.linalg.norm(w1[g.start:g.stop]) - np.linalg.norm(w0[g.start:g.stop])
                       for g in first])
    order = np.argsort(growth, kind="stable")
    acc = []
    for f in fractions:
        if not 0.0 <= f <= 1.0:
            raise ValueError(f"pruning fraction must lie in [0, 1], got {f}")
        w = w1.copy()
        for i in order[:int(round(f * len(first)))]:
            w[first[i].start:first[i].stop] = 0.0
        acc.append(float(np.mean(predict(spec, w, test.X) == test.y)))
    return PruneCurve(np.asarray(fractions, dtype=np.float64), np.array(acc), order)
