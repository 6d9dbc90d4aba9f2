"""Training loop: loss -> schedule -> step -> log, with step rejection and resume."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .datasets import LabeledSet
from .dynamics import (
    STEPPERS, LRSchedule, NonFiniteStepError, ParamState, node_stats, schedule_next,
)
from .lossland import LogLossReport, compute_loss
from .netcore import homogeneity_order

MAX_REJECTS = 30
# a loss-increase rejection only divides k by 1.1; 1000 in a row shrink it by 1e41
MAX_INCREASES = 1000


class DivergenceError(RuntimeError):
    """Raised after ``MAX_REJECTS`` consecutive non-finite steps (or ``MAX_INCREASES``
    consecutive loss increases); carries the last good state."""

    def __init__(self, message: str, progress: "TrainerState"):
        super().__init__(message)
        self.progress = progress


@dataclass
class StopRule:
    target_log_loss: float | None = None
    max_steps: int | None = None

    def __post_init__(self):
        if self.target_log_loss is None and self.max_steps is None:
            raise ValueError("a stop rule needs a target log-loss or a step budget")
        if self.target_log_loss is not None and self.target_log_loss > 0:
            raise ValueError("target log-loss must be <= 0")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")

    def done(self, step: int, log_total: float) -> bool:
        if self.target_log_loss is not None and log_total <= self.target_log_loss:
            return True
        return self.max_steps is not None and step >= self.max_steps


@dataclass
class LogPolicy:
    """Which iterations to record.

    ``stride`` is ``"geometric"`` (steps ``ceil(ratio**k)``) or a positive int.
    Step 0, the final step and the first step at or below each level in
    ``loss_marks`` are always recorded.
    """

    stride: str | int = "geometric"
    ratio: float = 1.05
    loss_marks: tuple = ()
    store_params: bool = True
    store_softmax: bool = True

    def __post_init__(self):
        if self.stride != "geometric" and (not isinstance(self.stride, int) or self.stride < 1):
            raise ValueError(f"stride must be 'geometric' or a positive int, got {self.stride!r}")
        if self.ratio <= 1.0:
            raise ValueError("geometric ratio must exceed 1")


@dataclass
class TrainerState:
    """Everything needed to continue a run bit-identically."""

    state: ParamState
    schedule: LRSchedule
    step: int = 0
    rows: list = field(default_factory=list)
    geo_k: int = 0
    marks_hit: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    rejects: int = 0
    increases: int = 0
    rng_state: dict | None = None


@dataclass
class TrainResult:
    progress: TrainerState
    report: LogLossReport
    stopped: str

    @property
    def state(self) -> ParamState:
        return self.progress.state


def _geo_step(ratio: float, k: int) -> int:
    return math.ceil(ratio ** k - 1e-9)


def make_row(state: ParamState, report: LogLossReport, schedule: LRSchedule,
             step: int, policy: LogPolicy) -> dict:
    spec = state.spec
    w = state.materialize()
    log_eta = schedule.log_eta(report.log_total)
    stats = node_stats(spec, w, report, log_eta)
    norm = float(np.linalg.norm(w))
    order = homogeneity_order(spec)
    margin = float(np.min(report.margins) / norm ** order) if norm > 0 else float("nan")
    return {
        "step": step,
        "d": state.d,
        "log_total": report.log_total,
        "log_eta": log_eta,
        "k": schedule.k if schedule.kind == "power" else schedule.eta,
        "margin": margin,
        "norms": stats.norms,
        "log_grad_norms": stats.log_grad_norms,
        "cosines": stats.cosines,
        "log_a5": stats.log_a5,
        "params": w if policy.store_params else None,
        "softmax": report.softmax_weights.copy() if policy.store_softmax else None,
    }


class Trainer:
    """Full-batch (or per-epoch SGD) training of one parameterized network."""

    def __init__(self, data: LabeledSet, loss: str, dynamics: str, stop: StopRule,
                 log: LogPolicy | None = None, snapshot_marks=(), reject_increase=None,
                 batch_size: int | None = None, seed: int = 0):
        if dynamics not in STEPPERS:
            raise ValueError(f"unknown dynamics {dynamics!r}")
        self.data = data
        self.loss = loss
        self.dynamics = dynamics
        self.stepper = STEPPERS[dynamics]
        self.stop = stop
        self.log = log or LogPolicy()
        self.snapshot_marks = tuple(sorted(snapshot_marks, reverse=True))
        self.reject_increase = reject_increase
        self.batch_size = batch_size
        self.seed = seed

    def start(self, state: ParamState, schedule: LRSchedule) -> TrainerState:
        rng = np.random.default_rng(self.seed)
        return TrainerState(state.copy(), schedule, rng_state=rng.bit_generator.state)

    def _loss(self, state: ParamState, data: LabeledSet | None = None) -> LogLossReport:
        return compute_loss(self.loss, state.spec, state.materialize(), data or self.data)

    def _rejecting(self, schedule: LRSchedule) -> bool:
        if self.reject_increase is not None:
            return bool(self.reject_increase)
        return schedule.kind == "power"

    def _should_log(self, prog: TrainerState, report: LogLossReport) -> bool:
        hit = False
        for mark in self.log.loss_marks:
            if mark not in prog.marks_hit and report.log_total <= mark:
                prog.marks_hit.append(mark)
                hit = True
        if self.log.stride == "geometric":
            while _geo_step(self.log.ratio, prog.geo_k) < prog.step:
                prog.geo_k += 1
            if _geo_step(self.log.ratio, prog.geo_k) == prog.step:
                hit = True
        elif prog.step % self.log.stride == 0:
            hit = True
        return hit or prog.step == 0

    def _record(self, prog: TrainerState, report: LogLossReport, force: bool = False):
        for mark in self.snapshot_marks:
            if mark not in prog.snapshots and report.log_total <= mark:
                prog.snapshots[mark] = prog.state.copy()
        if self._should_log(prog, report) or force:
            if prog.rows and prog.rows[-1]["step"] == prog.step:
                return
            prog.rows.append(make_row(prog.state, report, prog.schedule, prog.step, self.log))

    def _try_step(self, state: ParamState, report: LogLossReport, schedule: LRSchedule):
        log_eta = schedule.log_eta(report.log_total)
        if log_eta > 700:
            raise NonFiniteStepError(f"learning rate e^{log_eta:.1f} overflows")
        new = self.stepper(state, report, math.exp(log_eta))
        new_rep = self._loss(new)
        if not np.isfinite(new_rep.log_total) or not np.all(np.isfinite(new_rep.grad_core)):
            raise NonFiniteStepError("loss or gradient non-finite after step")
        return new, new_rep

    def _full_batch_iteration(self, prog: TrainerState, report: LogLossReport):
        try:
            new, new_rep = self._try_step(prog.state, report, prog.schedule)
        except NonFiniteStepError as exc:
            return self._reject(prog, report, str(exc), halve=True)
        prog.schedule = schedule_next(prog.schedule, report.log_total, new_rep.log_total)
        if self._rejecting(prog.schedule) and not new_rep.log_total < report.log_total:
            return self._reject(prog, report, "loss did not decrease", halve=False)
        prog.state, prog.rejects, prog.increases = new, 0, 0
        return new_rep

    def _sgd_epoch(self, prog: TrainerState, report: LogLossReport):
        rng = np.random.default_rng()
        rng.bit_generator.state = prog.rng_state
        order = rng.permutation(self.data.m)
        state = prog.state
        try:
            for lo in range(0, self.data.m, self.batch_size):
                batch = self.data.subset(order[lo:lo + self.batch_size])
                brep = self._loss(state, batch)
                log_eta = prog.schedule.log_eta(report.log_total)
                if log_eta > 700:
                    raise NonFiniteStepError(f"learning rate e^{log_eta:.1f} overflows")
                state = self.stepper(state, brep, math.exp(log_eta))
            new_rep = self._loss(state)
            if not np.isfinite(new_rep.log_total):
                raise NonFiniteStepError("loss non-finite after epoch")
        except NonFiniteStepError as exc:
            return self._reject(prog, report, str(exc), halve=True)
        prog.rng_state = rng.bit_generator.state
        prog.schedule = schedule_next(prog.schedule, report.log_total, new_rep.log_total)
        prog.state, prog.rejects = state, 0
        return new_rep

    def _reject(self, prog: TrainerState, report: LogLossReport, why: str, halve: bool):
        if not halve:
            prog.increases += 1
            if prog.increases >= MAX_INCREASES:
                raise DivergenceError(
                    f"step {prog.step}: {MAX_INCREASES} consecutive loss increases", prog
                )
            return report
        prog.rejects += 1
        if prog.schedule.kind != "power":
            raise DivergenceError(f"step {prog.step}: {why} at a constant rate", prog)
        prog.schedule = replace(prog.schedule, k=prog.schedule.k / 2.0)
        if prog.rejects >= MAX_REJECTS:
            raise DivergenceError(
                f"step {prog.step}: {MAX_REJECTS} consecutive non-finite steps ({why})", prog
            )
        return report

    def run(self, prog: TrainerState, checkpoint=None, checkpoint_every: int = 0) -> TrainResult:
        """Advance ``prog`` until the stop rule fires.

        ``checkpoint(prog)`` is called every ``checkpoint_every`` iterations so
        an interrupted run can be continued from the saved progress.
        """
        report = self._loss(prog.state)
        if not np.isfinite(report.log_total):
            raise DivergenceError("initial loss is not finite", prog)
        self._record(prog, report)
        while not self.stop.done(prog.step, report.log_total):
            if self.batch_size:
                report = self._sgd_epoch(prog, report)
            else:
                report = self._full_batch_iteration(prog, report)
            prog.step += 1
            self._record(prog, report)
            if checkpoint and checkpoint_every and prog.step % checkpoint_every == 0:
                checkpoint(prog)
        self._record(prog, report, force=True)
        target = self.stop.target_log_loss
        stopped = "target" if target is not None and report.log_total <= target else "max_steps"
        return TrainResult(prog, report, stopped)
