"""Accuracy bookkeeping and run reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Scenario
from .errors import SurpriseNetError, TaskStateError
from .inference import infer_batch
from .model import HybridModel
from .rng import manifest

REPORT_SCHEMA_VERSION = 1
SUMMARY_FIELDS = ["dataset", "kind", "variant", "schedule", "seed", "final_accuracy", "task_id_accuracy"]


class InvariantViolation(SurpriseNetError, AssertionError):
    pass


@dataclass
class AccuracyMatrix:
    """``acc[t][u]``: class-IL accuracy on task ``u`` after training through task ``t``.

    Entries with ``u > t`` are ``None``. ``task_id`` mirrors ``acc`` for
    task-identification accuracy (``None`` throughout for baselines that
    have no task inference).
    """

    n_tasks: int
    acc: list[list[float | None]] = field(default_factory=list)
    task_id: list[list[float | None]] = field(default_factory=list)
    overall: list[float] = field(default_factory=list)
    overall_task_id: list[float | None] = field(default_factory=list)
    test_counts: list[int] = field(default_factory=list)

    def record(self, t: int, per_task: list[float], per_task_id: list[float | None], overall: float, overall_id, counts):
        if t != len(self.acc):
            raise ValueError(f"expected step {len(self.acc)}, got {t}")
        pad = [None] * (self.n_tasks - len(per_task))
        self.acc.append(list(per_task) + pad)
        self.task_id.append(list(per_task_id) + pad)
        self.overall.append(overall)
        self.overall_task_id.append(overall_id)
        if not self.test_counts:
            self.test_counts = [0] * self.n_tasks
        for u, c in enumerate(counts):
            self.test_counts[u] = int(c)

    @property
    def final_accuracy(self) -> float:
        return self.overall[-1]

    @property
    def final_task_id_accuracy(self) -> float | None:
        return self.overall_task_id[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AccuracyMatrix":
        return cls(**d)


def _chain_check(pred_task, pred_class, true_task, true_class, scenario: Scenario) -> None:
    for t, c in zip(pred_task.tolist(), pred_class.tolist()):
        if c not in scenario.task_classes[t]:
            raise InvariantViolation(f"predicted class {c} outside predicted task {t}")
    correct = pred_class == true_class
    if np.any(correct & (pred_task != true_task)):
        raise InvariantViolation("instance classified correctly with the wrong task")


def evaluate_step(model: HybridModel, scenario: Scenario, t: int, matrix: AccuracyMatrix) -> None:
    """Evaluate tasks ``0..t`` with task inference and append row ``t``."""
    test = scenario.seen_test(t)
    res = infer_batch(model, test.x, scenario, n_tasks=t + 1)
    true_task = scenario.tasks_of(test.y)
    _chain_check(res.predicted_task, res.predicted_class, true_task, test.y, scenario)
    correct = res.predicted_class == test.y
    task_ok = res.predicted_task == true_task
    per, per_id, counts = [], [], []
    for u in range(t + 1):
        sel = true_task == u
        counts.append(int(sel.sum()))
        per.append(float(correct[sel].mean()) if sel.any() else 0.0)
        per_id.append(float(task_ok[sel].mean()) if sel.any() else 0.0)
    overall = float(correct.mean())
    overall_id = float(task_ok.mean())
    if overall > overall_id + 1e-12:
        raise InvariantViolation(f"class-IL accuracy {overall} exceeds task-id accuracy {overall_id}")
    matrix.record(t, per, per_id, overall, overall_id, counts)


def evaluate_global(model: HybridModel, scenario: Scenario, t: int, matrix: AccuracyMatrix, k=None) -> None:
    """Baseline evaluation: unrestricted argmax over every class in the head."""
    from .tensor import Tensor

    test = scenario.seen_test(t)
    res = model.forward(Tensor(test.x, dtype=model.dtype), k, training=False)
    pred = np.argmax(res.logits.data, axis=1)
    true_task = scenario.tasks_of(test.y)
    correct = pred == test.y
    per, counts = [], []
    for u in range(t + 1):
        sel = true_task == u
        counts.append(int(sel.sum()))
        per.append(float(correct[sel].mean()) if sel.any() else 0.0)
    matrix.record(t, per, [None] * (t + 1), float(correct.mean()), None, counts)


def final_accuracy(model: HybridModel, scenario: Scenario) -> float:
    """Micro-averaged class-IL accuracy over every task's test set, no task labels."""
    if model.registry.current_task < scenario.n_tasks or model.registry.active:
        raise TaskStateError("final_accuracy needs every scenario task trained and frozen")
    test = scenario.seen_test(scenario.n_tasks - 1)
    res = infer_batch(model, test.x, scenario, n_tasks=scenario.n_tasks)
    return float(np.mean(res.predicted_class == test.y))


@dataclass
class RunReport:
    kind: str
    config: dict
    matrix: AccuracyMatrix
    capacity: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION
    prng: dict = field(default_factory=manifest)
    averaging: str = "micro"

    @property
    def final_accuracy(self) -> float:
        return self.matrix.final_accuracy

    @property
    def task_id_accuracy(self) -> float | None:
        return self.matrix.final_task_id_accuracy

    def to_dict(self) -> dict:
        d = asdict(self)
        d["final_accuracy"] = self.final_accuracy
        d["task_id_accuracy"] = self.task_id_accuracy
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        d = dict(d)
        d.pop("final_accuracy", None)
        d.pop("task_id_accuracy", None)
        d["matrix"] = AccuracyMatrix.from_dict(d["matrix"])
        return cls(**d)

    def summary_row(self) -> dict:
        cfg = self.config
        return {
            "dataset": cfg.get("dataset", {}).get("name", ""),
            "kind": self.kind,
            "variant": cfg.get("model", {}).get("variant", ""),
            "schedule": cfg.get("plan", {}).get("prune", ""),
            "seed": cfg.get("seed", cfg.get("plan", {}).get("seed", "")),
            "final_accuracy": repr(self.final_accuracy),
            "task_id_accuracy": "" if self.task_id_accuracy is None else repr(self.task_id_accuracy),
        }


def append_summary(path, report: RunReport) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=SUMMARY_FIELDS)
        if new:
            w.writeheader()
        w.writerow(report.summary_row())


def write_report(report: RunReport, run_dir) -> None:
    """Write ``report.json``, ``accuracy_matrix.csv`` and ``summary.csv``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    m = report.matrix
    with open(run_dir / "accuracy_matrix.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["step"] + [f"task{u}" for u in range(m.n_tasks)] + ["overall", "task_id"])
        for t, row in enumerate(m.acc):
            tid = m.overall_task_id[t]
            w.writerow([t] + ["" if v is None else repr(v) for v in row] + [repr(m.overall[t]), "" if tid is None else repr(tid)])
    summary = run_dir / "summary.csv"
    if summary.exists():
        summary.unlink()
    append_summary(summary, report)


def read_report(run_dir) -> RunReport:
    return RunReport.from_dict(json.loads((Path(run_dir) / "report.json").read_text(encoding="utf-8")))


def read_summary(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def aggregate(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("nothing to aggregate")
    mean = math.fsum(vals) / len(vals)
    if len(vals) == 1:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1)
    return mean, math.sqrt(var)
