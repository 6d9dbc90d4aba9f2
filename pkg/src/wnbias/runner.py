"""Executing configs: versioned binary state files, resumable checkpoints and run outputs."""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .dynamics import LRSchedule, ParamState
from .netcore import NetworkSpec, homogeneity_order
from .records import TrajectoryRecord
from .training import DivergenceError, Trainer, TrainerState

STATE_MAGIC = b"WNBSTATE"
STATE_VERSION = 1


class StateFormatError(ValueError):
    pass


# -- binary state files ----------------------------------------------------------

def encode_state(state: ParamState, extra: dict | None = None) -> bytes:
    header = {
        "kind": state.kind,
        "spec": state.spec.to_dict(),
        "step_count": state.step_count,
        "d": state.d,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    np.savez(buf, v=state.v, scale=state.scale, normalized=state.normalized)
    return STATE_MAGIC + struct.pack(">II", STATE_VERSION, len(head)) + head + buf.getvalue()


def decode_state(raw: bytes) -> tuple[ParamState, dict]:
    if raw[:8] != STATE_MAGIC:
        raise StateFormatError("not a state file (bad magic)")
    version, n = struct.unpack(">II", raw[8:16])
    if version != STATE_VERSION:
        raise StateFormatError(f"state format version {version} is not supported")
    header = json.loads(raw[16:16 + n])
    arrays = np.load(io.BytesIO(raw[16 + n:]))
    spec = NetworkSpec.from_dict(header["spec"])
    state = ParamState(spec, header["kind"], arrays["v"], arrays["scale"], arrays["normalized"],
                       header["step_count"], header["d"])
    return state, header["extra"]


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_state(path: str | Path, state: ParamState, extra: dict | None = None) -> None:
    _atomic_write(Path(path), encode_state(state, extra))


def load_state(path: str | Path) -> tuple[ParamState, dict]:
    return decode_state(Path(path).read_bytes())


def snapshot_name(mark: float) -> str:
    return f"snapshot_{mark:g}.bin"


# -- checkpoints -------------------------------------------------------------------

ROW_KEYS = ("step", "d", "log_total", "log_eta", "k", "margin")


def record_rows(rec: TrajectoryRecord) -> list[dict]:
    rows = []
    for r in range(len(rec)):
        row = {key: getattr(rec, key)[r].item() for key in ROW_KEYS}
        row.update(
            norms=rec.norms[r].copy(), log_grad_norms=rec.log_grad_norms[r].copy(),
            cosines=rec.cosines[r].copy(), log_a5=rec.log_a5[r].copy(),
            params=None if rec.params is None else rec.params[r].copy(),
            softmax=None if rec.softmax is None else rec.softmax[r].copy(),
        )
        rows.append(row)
    return rows


def write_checkpoint(run_dir: Path, prog: TrainerState) -> None:
    rec = TrajectoryRecord.from_rows(prog.rows)
    rec.save(run_dir / "checkpoint_rows.csv")
    for mark, snap in prog.snapshots.items():
        path = run_dir / ("checkpoint_" + snapshot_name(mark))
        if not path.exists():
            save_state(path, snap)
    extra = {
        "schedule": prog.schedule.to_dict() | {"k": prog.schedule.k, "eta": prog.schedule.eta},
        "step": prog.step,
        "geo_k": prog.geo_k,
        "marks_hit": prog.marks_hit,
        "snapshot_marks": sorted(prog.snapshots),
        "rejects": prog.rejects,
        "increases": prog.increases,
        "rng_state": prog.rng_state,
        "n_rows": len(prog.rows),
    }
    save_state(run_dir / "checkpoint.bin", prog.state, extra)


def read_checkpoint(run_dir: Path) -> TrainerState | None:
    path = run_dir / "checkpoint.bin"
    if not path.exists():
        return None
    state, extra = load_state(path)
    rec = TrajectoryRecord.load(run_dir / "checkpoint_rows.csv")
    rows = record_rows(rec)[:extra["n_rows"]]
    snaps = {m: load_state(run_dir / ("checkpoint_" + snapshot_name(m)))[0]
             for m in extra["snapshot_marks"]}
    sched = dict(extra["schedule"])
    return TrainerState(state, LRSchedule(**sched), extra["step"], rows, extra["geo_k"],
                        list(extra["marks_hit"]), snaps, extra["rejects"], extra["increases"],
                        extra["rng_state"])


def _clear_checkpoint(run_dir: Path) -> None:
    for p in run_dir.glob("checkpoint*"):
        p.unlink()


# -- running -----------------------------------------------------------------------

@dataclass
class RunOutcome:
    name: str
    run_dir: Path
    status: str
    stopped: str
    steps: int
    final_log_loss: float


def record_meta(cfg: ExperimentConfig, spec: NetworkSpec) -> dict:
    return {
        "name": cfg.name,
        "dynamics": cfg.dynamics,
        "loss": cfg.loss,
        "seed": cfg.seed,
        "homogeneity_order": homogeneity_order(spec),
        "group_layers": spec.group_layers.tolist(),
        "spec": spec.to_dict(),
    }


def make_trainer(cfg: ExperimentConfig, data) -> Trainer:
    return Trainer(data, cfg.loss, cfg.dynamics, cfg.stop_rule(), cfg.log_policy(),
                   snapshot_marks=cfg.snapshots, batch_size=cfg.batch_size, seed=cfg.seed)


def run_experiment(cfg: ExperimentConfig, run_dir: str | Path, resume: bool = True,
                   checkpoint_every: int = 5000) -> RunOutcome:
    """Train one (non-sweep) config, writing everything under ``run_dir``.

    Files: ``config.yaml``, ``trajectory.csv`` + ``trajectory.json``,
    ``state_init.bin``, ``state_final.bin`` and one ``snapshot_<level>.bin``
    per snapshot loss level.  A divergent run writes ``state_last.bin`` and
    ``failure.json`` and raises :class:`DivergenceError`.
    """
    if cfg.sweep:
        raise ValueError("expand sweep configs before running them")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(cfg.to_yaml())
    data, _ = cfg.build_data()
    spec = cfg.build_spec(data)
    init = cfg.initial_state(spec)
    save_state(run_dir / "state_init.bin", init)
    trainer = make_trainer(cfg, data)
    prog = read_checkpoint(run_dir) if resume else None
    if prog is None:
        _clear_checkpoint(run_dir)
        prog = trainer.start(init, cfg.lr_schedule())
    meta = record_meta(cfg, spec)
    try:
        result = trainer.run(prog, lambda p: write_checkpoint(run_dir, p), checkpoint_every)
    except DivergenceError as exc:
        TrajectoryRecord.from_rows(exc.progress.rows, meta).save(run_dir / "trajectory.csv")
        save_state(run_dir / "state_last.bin", exc.progress.state)
        (run_dir / "failure.json").write_text(
            json.dumps({"error": "divergence", "message": str(exc),
                        "step": exc.progress.step}, indent=2) + "\n")
        raise
    meta.update(stopped=result.stopped, steps=result.progress.step)
    TrajectoryRecord.from_rows(result.progress.rows, meta).save(run_dir / "trajectory.csv")
    save_state(run_dir / "state_final.bin", result.state)
    for mark, snap in result.progress.snapshots.items():
        save_state(run_dir / snapshot_name(mark), snap)
    _clear_checkpoint(run_dir)
    return RunOutcome(cfg.name, run_dir, "ok", result.stopped, result.progress.step,
                      result.report.log_total)


def variant_dir(root: Path, base: ExperimentConfig, variant: ExperimentConfig) -> Path:
    if variant.name == base.name:
        return root
    return root / variant.name.split("/", 1)[1]
