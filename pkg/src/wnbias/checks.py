"""Run-directory checks behind ``wnbias analyze`` and ``wnbias prune``."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import analysis as an
from .config import ExperimentConfig
from .lossland import compute_loss
from .records import TrajectoryRecord
from .runner import load_state, snapshot_name

DIRECTION_TOL = 1e-3
SPREAD_TOL = 0.2
ALIGN_TOL = 0.99
KKT_TOL = 1e-2
EWN_RATE_BAND = (1.5, 2.5)


class CheckError(ValueError):
    """A check could not be evaluated (missing input or unmet precondition)."""


class RunView:
    def __init__(self, run_dir: str | Path):
        self.dir = Path(run_dir)
        if not (self.dir / "trajectory.csv").exists():
            raise CheckError(f"{self.dir} holds no trajectory.csv")
        self.record = TrajectoryRecord.load(self.dir / "trajectory.csv")
        self.config = ExperimentConfig.load(self.dir / "config.yaml")
        self._data = None

    @property
    def dynamics(self) -> str:
        return self.config.dynamics

    def data(self):
        if self._data is None:
            self._data = self.config.build_data()
        return self._data

    def spec(self):
        return self.config.build_spec(self.data()[0])

    def final_params(self) -> np.ndarray:
        if self.record.params is not None:
            return self.record.params[-1]
        return load_state(self.dir / "state_final.bin")[0].materialize()

    def hidden_survivors(self) -> an.SparsityProfile:
        return an.sparsity_profile(self.record)


def _tail(view: RunView) -> np.ndarray:
    rows = an.tail_rows(view.record)
    if rows.size < 5:
        raise CheckError(f"tail has {rows.size} logged rows; need at least 5")
    return rows


def check_direction(view: RunView) -> dict:
    if view.record.params is None:
        raise CheckError("record was written without parameters")
    change = an.direction_convergence(view.record)
    return {"pass": change.tail < DIRECTION_TOL, "tail_window_change": change.tail,
            "window_changes": change.max_angle.tolist()}


def check_margin(view: RunView) -> dict:
    rows = _tail(view)
    m = view.record.margin[rows]
    ok = bool(np.all(m > 0)) and an.trend_is(m, "nondecreasing")
    return {"pass": ok, "final_margin": float(m[-1]),
            "window_medians": an.window_medians(m).tolist()}


def check_a5(view: RunView) -> dict:
    rows = _tail(view)
    nodes = view.hidden_survivors().surviving
    per_node = {}
    ok = True
    for u in nodes:
        dec = an.trend_is(view.record.log_a5[rows, u], "decreasing")
        per_node[int(u)] = dec
        ok = ok and dec
    return {"pass": bool(ok and len(nodes) > 0), "per_node": per_node}


def check_theorem2(view: RunView) -> dict:
    mode = "ewn" if view.dynamics in ("ewn", "adaptive_unnorm") else "swn"
    rec = view.record
    levels = [lv for lv in an.THEOREM2_LEVELS if rec.log_total.min() <= lv]
    nodes = view.hidden_survivors().surviving
    if levels:
        spreads = an.theorem2_checkpoints(rec, mode, levels, nodes)
    else:
        spreads = [an.theorem2_spread(rec, mode, -1, nodes)]
    ok = spreads[-1] < SPREAD_TOL and all(b < a for a, b in zip(spreads, spreads[1:]))
    return {"pass": bool(ok), "mode": mode, "levels": levels, "spreads": spreads}


def check_sparsity(view: RunView, expect: int | None = None) -> dict:
    prof = view.hidden_survivors()
    layers = np.asarray(view.record.meta.get("group_layers", [1] * view.record.n_nodes))
    hidden = int(np.sum(layers == 1))
    count = prof.counts.get(1, 0)
    ok = count == expect if expect is not None else 0 < count < hidden
    return {"pass": bool(ok), "survivors": count, "hidden_nodes": hidden,
            "surviving": prof.surviving.tolist()}


def check_prop2(view: RunView) -> dict:
    data, _ = view.data()
    spec = view.spec()
    rep = compute_loss(view.config.loss, spec, view.final_params(), data)
    nodes = view.hidden_survivors().surviving
    cos = an.prop2_alignment(view.record, rep.grad_core, spec, nodes=nodes)
    return {"pass": bool(cos) and min(cos.values()) >= ALIGN_TOL,
            "cosines": {str(k): v for k, v in cos.items()}}


def check_corollary1(view: RunView) -> dict:
    data, _ = view.data()
    res = an.corollary1_check(view.final_params(), view.spec(), data)
    return {"pass": res.cosine >= ALIGN_TOL and res.kkt_residual < KKT_TOL,
            "cosine": res.cosine, "kkt_residual": res.kkt_residual,
            "oracle_margin": res.oracle.margin}


def check_rate(view: RunView) -> dict:
    try:
        fit = an.fit_rate(view.record)
    except an.InsufficientTailError as exc:
        raise CheckError(str(exc)) from exc
    L = int(view.record.meta.get("homogeneity_order", 1))
    if view.dynamics == "ewn":
        ok = EWN_RATE_BAND[0] <= fit.b <= EWN_RATE_BAND[1]
    else:
        ok = abs(fit.b - an.predicted_exponent(view.dynamics, L)) <= 0.5
    return {"pass": bool(ok), "b": fit.b, "a_free": fit.a_free, "b_free": fit.b_free,
            "residual": fit.residual, "n_points": fit.n_points, "order": L}


CHECKS = {
    "direction": check_direction,
    "margin": check_margin,
    "a5": check_a5,
    "theorem2": check_theorem2,
    "sparsity": check_sparsity,
    "prop2": check_prop2,
    "corollary1": check_corollary1,
    "rate": check_rate,
}


def analyze_run(run_dir: str | Path, checks, expect_survivors: int | None = None) -> dict:
    view = RunView(run_dir)
    report = {}
    for name in checks:
        if name not in CHECKS:
            raise CheckError(f"unknown check {name!r}; choose from {sorted(CHECKS)}")
        if name == "sparsity":
            report[name] = check_sparsity(view, expect_survivors)
        else:
            report[name] = CHECKS[name](view)
    return report


def find_runs(root: str | Path) -> list[Path]:
    root = Path(root)
    if (root / "trajectory.csv").exists():
        return [root]
    runs = sorted(p.parent for p in root.rglob("trajectory.csv"))
    if not runs:
        raise CheckError(f"no runs found under {root}")
    return runs


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(type(obj).__name__)


def write_report(path: Path, report: dict) -> None:
    path.write_text(json.dumps(report, indent=2, sort_keys=True, default=_json_default) + "\n")


def prune_run(run_dir: str | Path, fractions) -> Path:
    """Pruning curve for the final state and every snapshot; writes ``prune.csv``."""
    view = RunView(run_dir)
    _, test = view.data()
    if test is None:
        test = view.data()[0]
    spec = view.spec()
    init, _ = load_state(view.dir / "state_init.bin")
    models = {"final": load_state(view.dir / "state_final.bin")[0]}
    for mark in sorted(view.config.snapshots):
        path = view.dir / snapshot_name(mark)
        if path.exists():
            models[f"loss_{mark:g}"] = load_state(path)[0]
    curves = {k: an.prune_eval(spec, st, init, test, fractions).accuracy for k, st in models.items()}
    out = view.dir / "prune.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fraction", *curves])
        for i, f in enumerate(fractions):
            w.writerow([repr(float(f)), *(repr(float(c[i])) for c in curves.values())])
    return out
