"""Task-label-free prediction: pick the subset that reconstructs best, classify within it."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import Scenario
from .errors import ShapeError, TaskStateError
from .model import HybridModel
from .tensor import Tensor

THREADS_ENV = "SURPRISENET_THREADS"


@dataclass
class InferenceResult:
    predicted_task: int
    predicted_class: int
    per_task_rec_loss: np.ndarray
    logits_of_chosen: np.ndarray


@dataclass
class BatchInference:
    """Column-oriented form of a list of :class:`InferenceResult`."""

    predicted_task: np.ndarray
    predicted_class: np.ndarray
    rec_loss: np.ndarray  # [n, T]
    logits: np.ndarray  # [n, C] logits of the chosen subset

    def __len__(self) -> int:
        return self.predicted_task.shape[0]

    def results(self) -> list[InferenceResult]:
        return [
            InferenceResult(int(t), int(c), self.rec_loss[i], self.logits[i])
            for i, (t, c) in enumerate(zip(self.predicted_task, self.predicted_class))
        ]


def eval_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def select_task(rec_loss: np.ndarray) -> np.ndarray:
    """Row-wise argmin; ties resolve to the lowest task index."""
    return np.argmin(np.asarray(rec_loss), axis=-1)


def restricted_argmax(logits: np.ndarray, allowed) -> int:
    allowed = np.asarray(list(allowed), dtype=np.int64)
    return int(allowed[np.argmax(logits[allowed])])


def infer_batch(model: HybridModel, x: np.ndarray, scenario: Scenario, n_tasks: int | None = None) -> BatchInference:
    if model.registry.active:
        raise TaskStateError("model has a task in progress; freeze it before inference")
    frozen = model.registry.current_task
    n_tasks = frozen if n_tasks is None else n_tasks
    if n_tasks < 1 or n_tasks > frozen:
        raise TaskStateError(f"inference over {n_tasks} tasks but only {frozen} are frozen")
    if n_tasks > scenario.n_tasks:
        raise ShapeError(f"model has {n_tasks} tasks, scenario only {scenario.n_tasks}")
    xt = Tensor(np.asarray(x), dtype=model.dtype)

    def run(k):
        res = model.forward(xt, k, training=False)
        return res.per_instance_rec_loss, res.logits.data

    with ThreadPoolExecutor(max_workers=min(eval_threads(), n_tasks)) as pool:
        outs = list(pool.map(run, range(n_tasks)))
    rec = np.stack([o[0] for o in outs], axis=1)
    all_logits = np.stack([o[1] for o in outs], axis=0)  # [T, n, C]
    task = select_task(rec)
    rows = np.arange(rec.shape[0])
    chosen = all_logits[task, rows]
    # restrict the shared head to the chosen task's classes
    allowed = np.full((n_tasks, model.config.class_count), -np.inf)
    for k in range(n_tasks):
        allowed[k, list(scenario.task_classes[k])] = 0.0
    cls = np.argmax(chosen + allowed[task], axis=1)
    return BatchInference(task, cls, rec, chosen)


def infer(model: HybridModel, x: np.ndarray, scenario: Scenario, n_tasks: int | None = None) -> list[InferenceResult]:
    return infer_batch(model, x, scenario, n_tasks).results()


def task_id_accuracy(results, ground_truth_tasks) -> float:
    if isinstance(results, BatchInference):
        pred = results.predicted_task
    else:
        pred = np.array([r.predicted_task for r in results])
    truth = np.asarray(ground_truth_tasks)
    if pred.shape[0] != truth.shape[0]:
        raise ShapeError(f"{pred.shape[0]} predictions but {truth.shape[0]} ground-truth tasks")
    if pred.shape[0] == 0:
        return 0.0
    return float(np.mean(pred == truth))
