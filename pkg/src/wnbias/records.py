"""Trajectory records and their on-disk form (CSV + JSON sidecar)."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RECORD_VERSION = 1
SCALARS = ("step", "d", "log_total", "log_eta", "k", "margin")
PER_NODE = ("norm", "lgrad", "cos", "la5")


@dataclass(eq=False)
class TrajectoryRecord:
    """Logged iterates of one run; row ``r`` describes iteration ``step[r]``.

    Per-node arrays have shape ``(rows, n_groups)``: weight norms, log gradient
    norms, cosine between ``w_u`` and ``-grad_u L`` and the log of the A5
    quantity ``eta |w_u| |grad_u L|``.  ``params`` (materialized weights) and
    ``softmax`` (loss-vector direction) are optional.
    """

    step: np.ndarray
    d: np.ndarray
    log_total: np.ndarray
    log_eta: np.ndarray
    k: np.ndarray
    margin: np.ndarray
    norms: np.ndarray
    log_grad_norms: np.ndarray
    cosines: np.ndarray
    log_a5: np.ndarray
    params: np.ndarray | None = None
    softmax: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.step.size > 1 and np.any(np.diff(self.step) <= 0):
            raise ValueError("record steps must be strictly increasing")

    def __len__(self) -> int:
        return int(self.step.size)

    @property
    def n_nodes(self) -> int:
        return int(self.norms.shape[1])

    def directions(self) -> np.ndarray:
        if self.params is None:
            raise ValueError("record was written without parameters")
        n = np.linalg.norm(self.params, axis=1, keepdims=True)
        return self.params / np.where(n > 0, n, 1.0)

    def row_at_loss(self, log_loss: float) -> int:
        """First row whose log-loss is at or below ``log_loss``."""
        hit = np.flatnonzero(self.log_total <= log_loss)
        if hit.size == 0:
            raise ValueError(f"record never reaches log-loss {log_loss}")
        return int(hit[0])

    def slice(self, rows) -> "TrajectoryRecord":
        pick = lambda a: None if a is None else a[rows]  # noqa: E731
        return TrajectoryRecord(
            self.step[rows], self.d[rows], self.log_total[rows], self.log_eta[rows],
            self.k[rows], self.margin[rows], self.norms[rows], self.log_grad_norms[rows],
            self.cosines[rows], self.log_a5[rows], pick(self.params), pick(self.softmax),
            dict(self.meta),
        )

    # -- construction -------------------------------------------------------

    @classmethod
    def from_rows(cls, rows: list[dict], meta: dict | None = None) -> "TrajectoryRecord":
        def col(name, width=None):
            if not rows:
                return np.zeros((0,) if width is None else (0, width))
            return np.array([r[name] for r in rows], dtype=np.float64)

        has_params = bool(rows) and rows[0].get("params") is not None
        has_soft = bool(rows) and rows[0].get("softmax") is not None
        return cls(
            col("step").astype(np.int64), col("d"), col("log_total"), col("log_eta"),
            col("k"), col("margin"), col("norms"), col("log_grad_norms"), col("cosines"),
            col("log_a5"),
            col("params") if has_params else None,
            col("softmax") if has_soft else None,
            dict(meta or {}),
        )

    # -- io -----------------------------------------------------------------

    def columns(self) -> list[str]:
        U = self.n_nodes
        cols = list(SCALARS)
        for prefix in PER_NODE:
            cols += [f"{prefix}_{u}" for u in range(U)]
        if self.params is not None:
            cols += [f"w_{i}" for i in range(self.params.shape[1])]
        if self.softmax is not None:
            cols += [f"p_{i}" for i in range(self.softmax.shape[1])]
        return cols

    def _matrix(self) -> np.ndarray:
        blocks = [
            self.step[:, None].astype(np.float64), self.d[:, None], self.log_total[:, None],
            self.log_eta[:, None], self.k[:, None], self.margin[:, None],
            self.norms, self.log_grad_norms, self.cosines, self.log_a5,
        ]
        if self.params is not None:
            blocks.append(self.params)
        if self.softmax is not None:
            blocks.append(self.softmax)
        return np.hstack(blocks) if len(self) else np.zeros((0, len(self.columns())))

    def save(self, csv_path: str | Path, meta_path: str | Path | None = None) -> None:
        csv_path = Path(csv_path)
        cols = self.columns()
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r, row in enumerate(self._matrix()):
                out = [str(int(self.step[r]))] + [repr(float(v)) for v in row[1:]]
                w.writerow(out)
        meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(".json")
        meta = dict(self.meta)
        meta.update(
            record_version=RECORD_VERSION,
            n_nodes=self.n_nodes,
            n_params=None if self.params is None else int(self.params.shape[1]),
            n_examples=None if self.softmax is None else int(self.softmax.shape[1]),
            columns=cols,
        )
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, csv_path: str | Path, meta_path: str | Path | None = None) -> "TrajectoryRecord":
        csv_path = Path(csv_path)
        meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(".json")
        meta = json.loads(meta_path.read_text())
        if meta.get("record_version") != RECORD_VERSION:
            raise ValueError(f"unsupported record version {meta.get('record_version')}")
        with open(csv_path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            body = [[float(v) for v in row] for row in reader]
        if header != meta["columns"]:
            raise ValueError(f"{csv_path}: column header does not match sidecar")
        U = meta["n_nodes"]
        arr = np.array(body, dtype=np.float64).reshape(len(body), len(header))
        c = len(SCALARS)
        blocks = [arr[:, c + i * U:c + (i + 1) * U] for i in range(len(PER_NODE))]
        pos = c + len(PER_NODE) * U
        params = softmax = None
        if meta.get("n_params"):
            params = arr[:, pos:pos + meta["n_params"]]
            pos += meta["n_params"]
        if meta.get("n_examples"):
            softmax = arr[:, pos:pos + meta["n_examples"]]
        for key in ("record_version", "n_nodes", "n_params", "n_examples", "columns"):
            meta.pop(key, None)
        return cls(
            arr[:, 0].astype(np.int64), arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4], arr[:, 5],
            *blocks, params, softmax, meta,
        )
