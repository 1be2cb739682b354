"""Replay-free class-incremental learning with parameter isolation and
reconstruction-based task inference."""

from .data import Dataset, Partition, Scenario, load_csv, load_idx, make_scenario, synth_clusters
from .inference import infer, task_id_accuracy
from .masked import FREE, MaskedLinear, TaskRegistry, eqprune_lambda, freeze_current
from .metrics import AccuracyMatrix, RunReport, final_accuracy, write_report
from .model import HybridModel, ModelConfig
from .trainer import PruneSchedule, TrainPlan, run_scenario, train_task

__version__ = "0.1.0"
