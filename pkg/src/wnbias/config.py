"""Declarative experiment configs (YAML) and the builders that turn them into
datasets, networks, initial states and trainers."""
from __future__ import annotations

import copy
import itertools
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .datasets import LabeledSet, gen_linsep, gen_simple_traj, gen_xor, load_csv, load_mnist_idx, stratified_split
from .dynamics import STEPPERS, LRSchedule, ParamState, state_kind
from .netcore import NetworkSpec, init_uniform_fan_in
from .training import LogPolicy, StopRule

MNIST_ENV = "WNBIAS_MNIST_DIR"
TEMPLATES = ("mlp", "simple_traj", "xor_frozen_sign")
DATASETS = ("simple_traj", "xor", "linsep", "csv", "mnist")
LOSSES = ("exp", "xent")


class ConfigError(ValueError):
    pass


def _dump(data: dict) -> str:
    return yaml.safe_dump(data, sort_keys=False, default_flow_style=None, width=100)


@dataclass
class ExperimentConfig:
    name: str
    dataset: dict
    network: dict
    dynamics: str
    loss: str
    schedule: dict
    stop: dict
    seed: int = 0
    logging: dict = field(default_factory=dict)
    snapshots: list = field(default_factory=list)
    batch_size: int | None = None
    normalized_layers: list | None = None
    output: str | None = None
    sweep: dict | None = None
    description: str = ""

    FIELDS = ("name", "description", "dataset", "network", "dynamics", "loss", "normalized_layers",
              "schedule", "stop", "seed", "batch_size", "logging", "snapshots", "output", "sweep")

    def __post_init__(self):
        self.validate()

    # -- validation -------------------------------------------------------------

    def validate(self) -> None:
        if not self.name:
            raise ConfigError("config needs a name")
        kind = self.dataset.get("kind")
        if kind not in DATASETS:
            raise ConfigError(f"dataset.kind must be one of {DATASETS}, got {kind!r}")
        if self.network.get("bias"):
            raise ConfigError("bias parameters break homogeneity and are not supported")
        if self.network.get("template", "mlp") not in TEMPLATES:
            raise ConfigError(f"network.template must be one of {TEMPLATES}")
        if self.dynamics not in STEPPERS:
            raise ConfigError(f"dynamics must be one of {tuple(STEPPERS)}, got {self.dynamics!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if not self.stop or ("target_log_loss" not in self.stop and "max_steps" not in self.stop):
            raise ConfigError("stop needs target_log_loss and/or max_steps")
        try:
            self.stop_rule()
            self.lr_schedule()
            self.log_policy()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.sweep is not None:
            for key, values in self.sweep.items():
                if not isinstance(values, list) or not values:
                    raise ConfigError(f"sweep.{key} must be a non-empty list")

    # -- (de)serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        out = {}
        for key in self.FIELDS:
            value = getattr(self, key)
            if value is None or (key in ("logging", "snapshots", "description") and not value):
                continue
            out[key] = copy.deepcopy(value)
        return out

    def to_yaml(self) -> str:
        return _dump(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        unknown = set(data) - set(cls.FIELDS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = {"name", "dataset", "network", "dynamics", "loss", "schedule", "stop"} - set(data)
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        return cls(**copy.deepcopy(data))

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_yaml(Path(path).read_text())

    def with_overrides(self, **changes) -> "ExperimentConfig":
        data = self.to_dict()
        for dotted, value in changes.items():
            _set_path(data, dotted, value)
        return ExperimentConfig.from_dict(data)

    # -- sweeps -------------------------------------------------------------------

    def expand(self) -> list["ExperimentConfig"]:
        """Cartesian product of ``sweep`` entries; each variant gets its own name."""
        if not self.sweep:
            return [self]
        keys = list(self.sweep)
        variants = []
        for combo in itertools.product(*(self.sweep[k] for k in keys)):
            data = self.to_dict()
            data.pop("sweep")
            tags = []
            for key, value in zip(keys, combo):
                _set_path(data, key, value)
                tags.append(f"{key.split('.')[-1]}={_tag(value)}")
            data["name"] = f"{self.name}/" + ",".join(tags)
            variants.append(ExperimentConfig.from_dict(data))
        return variants

    # -- builders -----------------------------------------------------------------

    def stop_rule(self) -> StopRule:
        return StopRule(self.stop.get("target_log_loss"), self.stop.get("max_steps"))

    def lr_schedule(self) -> LRSchedule:
        s = dict(self.schedule)
        if "cap" in s and s["cap"] is None:
            s["cap"] = math.inf
        return LRSchedule(**s)

    def log_policy(self) -> LogPolicy:
        lg = dict(self.logging)
        if "loss_marks" in lg:
            lg["loss_marks"] = tuple(lg["loss_marks"])
        return LogPolicy(**lg)

    def build_data(self) -> tuple[LabeledSet, LabeledSet | None]:
        """Training set and, for MNIST, the disjoint test split."""
        p = dict(self.dataset)
        kind = p.pop("kind")
        if kind == "simple_traj":
            return gen_simple_traj(), None
        if kind == "xor":
            return gen_xor(), None
        if kind == "linsep":
            return gen_linsep(p.get("m", 20), p.get("d", 2), p.get("margin", 0.1),
                              p.get("seed", 0)), None
        if kind == "csv":
            return load_csv(p["path"]), None
        root = Path(os.environ.get(MNIST_ENV, p.get("root", ".")))
        images, labels = root / p["images"], root / p["labels"]
        if not images.exists() or not labels.exists():
            raise ConfigError(f"MNIST files not found under {root}; set {MNIST_ENV}")
        full = load_mnist_idx(images, labels, classes=p.get("classes"))
        return stratified_split(full, p.get("n_train", 2000), p.get("n_test", 1000),
                                p.get("split_seed", 0))

    def build_spec(self, data: LabeledSet) -> NetworkSpec:
        net = self.network
        template = net.get("template", "mlp")
        if template == "simple_traj":
            frozen = np.zeros(6, dtype=bool)
            frozen[[1, 2, 4, 5]] = True
            return NetworkSpec((2, 2, 1), ("linear",), frozen)
        hidden = list(net.get("hidden", []))
        out_dim = net.get("output_dim")
        if out_dim is None:
            out_dim = 1 if data.is_binary else int(np.max(data.y)) + 1
        dims = (data.dim, *hidden, out_dim)
        acts = (net.get("activation", "relu"),) * len(hidden)
        if template == "xor_frozen_sign":
            if len(hidden) != 1 or out_dim != 1:
                raise ConfigError("xor_frozen_sign needs one hidden layer and a scalar output")
            spec = NetworkSpec(dims, acts)
            frozen = np.zeros(spec.n_params, dtype=bool)
            frozen[spec.offsets[1]:] = True
            return NetworkSpec(dims, acts, frozen)
        return NetworkSpec(dims, acts)

    def initial_weights(self, spec: NetworkSpec) -> np.ndarray:
        """Same seed gives the same weights for every dynamics (shared function-space start)."""
        rng = np.random.default_rng(self.seed)
        w = init_uniform_fan_in(spec, rng)
        template = self.network.get("template", "mlp")
        if template == "simple_traj":
            # W1 diagonal (positive: EWN cannot change a scalar weight's sign), W2 = (1, 1)
            out = np.zeros(spec.n_params)
            out[[0, 3]] = np.abs(w[[0, 3]])
            out[4:6] = 1.0
            return out
        if template == "xor_frozen_sign":
            start = spec.offsets[1]
            w[start:] = rng.choice([-1.0, 1.0], size=spec.n_params - start)
        return w

    def initial_state(self, spec: NetworkSpec) -> ParamState:
        return ParamState.from_weights(spec, self.initial_weights(spec), state_kind(self.dynamics),
                                       self.normalized_layers)


def _tag(value) -> str:
    if isinstance(value, list):
        return "x".join(str(v) for v in value) or "none"
    return str(value)


def _set_path(data: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    node[keys[-1]] = copy.deepcopy(value)
