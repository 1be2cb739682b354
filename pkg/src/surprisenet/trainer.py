"""Per-task lifecycle: train, prune, retrain, freeze; repeated over a scenario."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Partition, Scenario
from .errors import ConfigError, DivergenceError, NonFiniteError, TaskStateError
from .masked import eqprune_lambda, freeze_current
from .model import HybridModel
from .rng import STREAM_BATCHES, STREAM_INIT, STREAM_NOISE, make_rng
from .tensor import AdamState, GradientTape, Tensor, adam_step, backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PruneSchedule:
    kind: str = "eqprune"
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("fixed", "eqprune"):
            raise ConfigError(f"unknown prune schedule {self.kind!r}")
        if self.kind == "fixed" and not 0.0 <= self.value < 1.0:
            raise ConfigError(f"fixed prune proportion must be in [0, 1), got {self.value}")

    @classmethod
    def parse(cls, text: str) -> "PruneSchedule":
        """``eqprune`` or ``fixed:<lambda>``."""
        text = text.strip().lower()
        if text == "eqprune":
            return cls("eqprune")
        if text.startswith("fixed:"):
            try:
                return cls("fixed", float(text.split(":", 1)[1]))
            except ValueError:
                raise ConfigError(f"bad fixed prune proportion in {text!r}") from None
        raise ConfigError(f"prune schedule must be 'eqprune' or 'fixed:<lambda>', got {text!r}")

    def proportion(self, task_index: int, n_tasks: int) -> float:
        if self.kind == "fixed":
            return self.value
        return eqprune_lambda(task_index + 1, n_tasks)

    def __str__(self) -> str:
        return "eqprune" if self.kind == "eqprune" else f"fixed:{self.value:g}"


@dataclass(frozen=True)
class TrainPlan:
    epochs_per_task: int = 20
    retrain_epochs: int | None = None
    prune: PruneSchedule = PruneSchedule()
    learning_rate: float = 1e-4
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.retrain_epochs is None:
            object.__setattr__(self, "retrain_epochs", math.ceil(self.epochs_per_task / 2))
        if isinstance(self.prune, str):
            object.__setattr__(self, "prune", PruneSchedule.parse(self.prune))
        if self.epochs_per_task < 1:
            raise ConfigError("epochs_per_task must be >= 1")
        if self.retrain_epochs < 0:
            raise ConfigError("retrain_epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")

    @property
    def total_epochs(self) -> int:
        return self.epochs_per_task + self.retrain_epochs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prune"] = str(self.prune)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        return cls(**{**d, "prune": PruneSchedule.parse(d.get("prune", "eqprune"))})


@dataclass
class TaskLog:
    task: int
    classes: list[int]
    epochs: list[dict] = field(default_factory=list)
    prune_lambda: float | None = None
    prune_counts: dict = field(default_factory=dict)
    assignment_counts: dict = field(default_factory=dict)
    capacity_remaining: float = 1.0
    wall_clock: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


class Trainer:
    """Owns the random streams and optimizer state for one model."""

    def __init__(self, model: HybridModel, plan: TrainPlan):
        self.model = model
        self.plan = plan
        self.init_rng = make_rng(plan.seed, STREAM_INIT)
        self.batch_rng = make_rng(plan.seed, STREAM_BATCHES)
        self.noise_rng = make_rng(plan.seed, STREAM_NOISE)
        self.adam = AdamState(lr=plan.learning_rate)

    def _noise(self, n: int):
        if self.model.config.variant != "vae":
            return None
        return self.noise_rng.standard_normal((n, self.model.config.latent_dim)).astype(self.model.dtype)

    def step(self, xb: np.ndarray, yb: np.ndarray, k: int | None) -> dict:
        model = self.model
        with GradientTape() as tape:
            try:
                res = model.forward(Tensor(xb, dtype=model.dtype), k, training=True, noise=self._noise(len(yb)))
                losses = model.training_loss(res, yb)
            except NonFiniteError as e:
                raise DivergenceError(f"non-finite value during training: {e}") from e
        grads = backward(losses.total, tape)
        if k is not None:
            model.registry.gate_gradients(grads)
        try:
            adam_step(model.parameters(), grads, self.adam)
        except NonFiniteError as e:
            raise DivergenceError(f"non-finite parameter after update: {e}") from e
        return losses.as_dict()

    def run_epochs(self, data: Partition, epochs: int, k: int | None, phase: str, task_log: TaskLog | None) -> None:
        n = len(data)
        if n == 0:
            raise ConfigError("no training data for this task")
        bs = self.plan.batch_size
        for epoch in range(epochs):
            perm = self.batch_rng.permutation(n)
            totals = {"loss": 0.0, "rec": 0.0, "cls": 0.0, "kl": 0.0}
            for start in range(0, n, bs):
                idx = perm[start : start + bs]
                stats = self.step(data.x[idx], data.y[idx], k)
                for key, v in stats.items():
                    totals[key] += v * len(idx)
            row = {"phase": phase, "epoch": epoch, **{key: v / n for key, v in totals.items()}}
            if not math.isfinite(row["loss"]):
                raise DivergenceError(f"non-finite loss in {phase} epoch {epoch}")
            if task_log is not None:
                task_log.epochs.append(row)
            log.debug("%s epoch %d loss %.5f", phase, epoch, row["loss"])

    def train_task(self, data: Partition, task_index: int, n_tasks: int, classes=()) -> TaskLog:
        """Train / prune / retrain / freeze for the registry's current task."""
        registry = self.model.registry
        if registry.current_task != task_index:
            raise TaskStateError(f"registry is at task {registry.current_task}, asked to train task {task_index}")
        task_log = TaskLog(task=task_index, classes=[int(c) for c in classes])
        t0 = time.perf_counter()
        registry.begin_task(self.init_rng)
        self.adam.reset()
        self.run_epochs(data, self.plan.epochs_per_task, task_index, "train", task_log)
        t1 = time.perf_counter()
        lam = self.plan.prune.proportion(task_index, n_tasks)
        task_log.prune_lambda = lam
        task_log.prune_counts = registry.prune(lam)
        t2 = time.perf_counter()
        self.adam.reset()
        self.run_epochs(data, self.plan.retrain_epochs, task_index, "retrain", task_log)
        t3 = time.perf_counter()
        freeze_current(registry)
        self.adam.reset()
        task_log.assignment_counts = {name: {str(k): v for k, v in c.items()} for name, c in registry.counts().items()}
        task_log.capacity_remaining = registry.capacity_remaining()
        task_log.wall_clock = {"train": t1 - t0, "prune": t2 - t1, "retrain": t3 - t2, "freeze": time.perf_counter() - t3}
        return task_log


def train_task(model: HybridModel, data: Partition, plan: TrainPlan, task_index: int = 0, n_tasks: int = 1) -> TaskLog:
    return Trainer(model, plan).train_task(data, task_index, n_tasks)


def run_scenario(model: HybridModel, scenario: Scenario, plan: TrainPlan, run_dir=None):
    """Train every task in order, evaluating all seen tasks after each freeze.

    Returns ``(model, task_logs, accuracy_matrix)``. With ``run_dir`` the
    task logs are appended to ``tasklog.jsonl`` and a checkpoint is written
    after each freeze.
    """
    from .metrics import AccuracyMatrix, evaluate_step

    if scenario.n_tasks < 1:
        raise ConfigError("scenario has no tasks")
    if max(scenario.classes) >= model.config.class_count:
        raise ConfigError("model head is smaller than the scenario's class ids")
    if model.registry.current_task != 0:
        raise TaskStateError("run_scenario expects a fresh model")
    model.registry.total_tasks_planned = scenario.n_tasks
    trainer = Trainer(model, plan)
    matrix = AccuracyMatrix(scenario.n_tasks)
    logs = []
    out = Path(run_dir) if run_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "tasklog.jsonl").write_text("")
    for t in range(scenario.n_tasks):
        task_log = trainer.train_task(scenario.task_data(t, "train"), t, scenario.n_tasks, scenario.task_classes[t])
        logs.append(task_log)
        evaluate_step(model, scenario, t, matrix)
        log.info(
            "task %d/%d done: seen-task accuracy %.4f, task-id accuracy %.4f",
            t + 1, scenario.n_tasks, matrix.overall[t], matrix.overall_task_id[t],
        )
        if out is not None:
            with open(out / "tasklog.jsonl", "a", encoding="utf-8") as f:
                f.write(json.dumps(task_log.to_dict(), sort_keys=True) + "\n")
            model.save(out / f"checkpoint_task{t}.bin", {"scenario": scenario.describe(), "plan": plan.to_dict()})
    return model, logs, matrix
