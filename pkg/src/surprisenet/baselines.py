"""Naive sequential training and joint training, the two reference rows."""

from __future__ import annotations

import time

from .data import Dataset, Scenario
from .metrics import AccuracyMatrix, RunReport, evaluate_global
from .model import HybridModel, ModelConfig
from .trainer import TrainPlan, Trainer


def _dense_model(config: ModelConfig, trainer_plan: TrainPlan) -> tuple[HybridModel, Trainer]:
    model = HybridModel(config)
    trainer = Trainer(model, trainer_plan)
    # dense training starts from the same initialisation scheme as a fresh task
    for layer in model.layers:
        layer.reinit_free(trainer.init_rng)
    return model, trainer


def naive_baseline(scenario: Scenario, plan: TrainPlan, config: ModelConfig, echo: dict | None = None) -> RunReport:
    """One unmasked network trained on each task in turn with no protection.

    Each task gets the full SurpriseNet budget (train + retrain epochs).
    Prediction is a plain argmax over every class in the head.
    """
    t0 = time.perf_counter()
    model, trainer = _dense_model(config, plan)
    matrix = AccuracyMatrix(scenario.n_tasks)
    for t in range(scenario.n_tasks):
        trainer.adam.reset()
        trainer.run_epochs(scenario.task_data(t, "train"), plan.total_epochs, None, f"task{t}", None)
        evaluate_global(model, scenario, t, matrix)
    return RunReport("naive", echo or {}, matrix, timing={"total": time.perf_counter() - t0})


def joint_baseline(dataset: Dataset, plan: TrainPlan, config: ModelConfig, classes=None, echo: dict | None = None) -> RunReport:
    """All classes at once (optionally restricted to ``classes``) as one task."""
    t0 = time.perf_counter()
    classes = tuple(range(dataset.class_count)) if classes is None else tuple(classes)
    scen = Scenario(dataset, [classes], seed=plan.seed)
    model, trainer = _dense_model(config, plan)
    trainer.run_epochs(scen.task_data(0, "train"), plan.total_epochs, None, "joint", None)
    matrix = AccuracyMatrix(1)
    evaluate_global(model, scen, 0, matrix)
    return RunReport("joint", echo or {}, matrix, timing={"total": time.perf_counter() - t0})
