"""Command-line entry point.

    surprisenet run --dataset synth --n-tasks 2 --classes-per-task 2 --out runs/demo
    surprisenet baseline naive --dataset synth --n-tasks 5 --classes-per-task 2 --out runs/naive
    surprisenet sweep --seeds 1,2,3,4,5 --dataset idx --idx-dir data/fmnist --out runs/fmnist
    surprisenet inspect runs/demo/checkpoint_final.bin

Exit codes: 0 ok, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .baselines import joint_baseline, naive_baseline
from .data import Dataset, load_csv_dataset, load_idx_dataset, make_scenario, synth_clusters
from .errors import ConfigError, DataFormatError, SurpriseNetError
from .masked import read_checkpoint
from .metrics import RunReport, aggregate, append_summary, write_report
from .model import HybridModel, ModelConfig
from .trainer import PruneSchedule, TrainPlan, run_scenario

log = logging.getLogger("surprisenet")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

IMAGE_LR = 1e-4
STRUCTURED_LR = 8e-4
IMAGE_EPOCHS = (20, 10)
STRUCTURED_EPOCHS = (134, 66)


@dataclass
class RunConfig:
    dataset: str = "synth"
    idx_dir: str | None = None
    train_csv: str | None = None
    test_csv: str | None = None
    label_col: str = "label"
    synth_dim: int = 16
    synth_per_class: int = 200
    synth_separation: float = 8.0
    synth_seed: int = 0
    n_tasks: int = 5
    classes_per_task: int = 2
    variant: str = "ae"
    kl_weight: float = 0.001
    hidden_dims: list[int] | None = None
    latent_dim: int | None = None
    prune: str = "eqprune"
    epochs: int | None = None
    retrain_epochs: int | None = None
    lr: float | None = None
    batch_size: int = 64
    seed: int = 0
    out: str = "runs/run"

    def validate(self) -> None:
        if self.dataset not in ("synth", "idx", "csv"):
            raise ConfigError(f"--dataset must be synth, idx or csv, got {self.dataset!r}")
        if self.dataset == "idx" and not self.idx_dir:
            raise ConfigError("--dataset idx requires --idx-dir")
        if self.dataset == "csv" and not (self.train_csv and self.test_csv):
            raise ConfigError("--dataset csv requires --train-csv and --test-csv")
        if self.n_tasks < 1 or self.classes_per_task < 1:
            raise ConfigError("--n-tasks and --classes-per-task must be >= 1")
        if self.seed < 0 or self.synth_seed < 0:
            raise ConfigError("seeds must be non-negative")
        PruneSchedule.parse(self.prune)
        self.plan()

    @property
    def is_image(self) -> bool:
        return self.dataset == "idx"

    def plan(self) -> TrainPlan:
        default_epochs, default_retrain = IMAGE_EPOCHS if self.is_image else STRUCTURED_EPOCHS
        epochs = self.epochs if self.epochs is not None else default_epochs
        if self.retrain_epochs is not None:
            retrain = self.retrain_epochs
        elif self.epochs is None:
            retrain = default_retrain
        else:
            retrain = None  # half-budget rule
        lr = self.lr if self.lr is not None else (IMAGE_LR if self.is_image else STRUCTURED_LR)
        return TrainPlan(epochs, retrain, PruneSchedule.parse(self.prune), lr, self.batch_size, self.seed)

    def model_config(self, dataset: Dataset) -> ModelConfig:
        if self.is_image and dataset.feature_dim == 784:
            hidden, latent = (256, 128), 64
        else:
            hidden, latent = (128, 64), 32
        hidden = tuple(self.hidden_dims) if self.hidden_dims else hidden
        latent = self.latent_dim or latent
        return ModelConfig(dataset.feature_dim, dataset.class_count, hidden, latent, self.variant, self.kl_weight)

    def load_dataset(self) -> Dataset:
        if self.dataset == "idx":
            return load_idx_dataset(self.idx_dir)
        if self.dataset == "csv":
            return load_csv_dataset(self.train_csv, self.test_csv, self.label_col)
        n_classes = self.n_tasks * self.classes_per_task
        return synth_clusters(n_classes, self.synth_dim, self.synth_per_class, self.synth_separation, self.synth_seed)

    def echo(self) -> dict:
        d = asdict(self)
        d.pop("out")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if "config" in d and isinstance(d["config"], dict) and "run" in d["config"]:
            d = d["config"]["run"]
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def execute(cfg: RunConfig, kind: str = "surprisenet") -> RunReport:
    """Load data, train, evaluate and write the report into ``cfg.out``."""
    t0 = time.perf_counter()
    dataset = cfg.load_dataset()
    scenario = make_scenario(dataset, cfg.n_tasks, cfg.classes_per_task, cfg.seed)
    model_cfg = cfg.model_config(dataset)
    plan = cfg.plan()
    echo = {
        "run": cfg.echo(),
        "dataset": {"name": dataset.name, "classes": dataset.class_count, "features": dataset.feature_dim},
        "scenario": scenario.describe(),
        "model": model_cfg.to_dict(),
        "plan": plan.to_dict(),
        "seed": cfg.seed,
    }
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if kind == "surprisenet":
        model = HybridModel(model_cfg)
        model, logs, matrix = run_scenario(model, scenario, plan, run_dir=out)
        model.save(out / "checkpoint_final.bin", {"scenario": scenario.describe(), "plan": plan.to_dict()})
        report = RunReport(
            "surprisenet",
            echo,
            matrix,
            capacity=logs[-1].assignment_counts,
            timing={"total": time.perf_counter() - t0, "tasks": [l.wall_clock for l in logs]},
        )
    elif kind == "naive":
        report = naive_baseline(scenario, plan, model_cfg, echo)
    elif kind == "joint":
        report = joint_baseline(scenario.dataset, plan, model_cfg, scenario.classes, echo)
    else:
        raise ConfigError(f"unknown run kind {kind!r}")
    write_report(report, out)
    return report


# ---------------------------------------------------------------------------
# argument parsing


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON RunConfig (or a report.json to replay); flags override it")
    p.add_argument("--dataset", choices=["synth", "idx", "csv"])
    p.add_argument("--idx-dir")
    p.add_argument("--train-csv")
    p.add_argument("--test-csv")
    p.add_argument("--label-col")
    p.add_argument("--synth-dim", type=int)
    p.add_argument("--synth-per-class", type=int)
    p.add_argument("--synth-separation", type=float)
    p.add_argument("--synth-seed", type=int)
    p.add_argument("--n-tasks", type=int)
    p.add_argument("--classes-per-task", type=int)
    p.add_argument("--variant", choices=["ae", "vae"])
    p.add_argument("--kl-weight", type=float)
    p.add_argument("--hidden-dims", type=_int_list)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--prune", help="eqprune or fixed:<lambda>")
    p.add_argument("--epochs", type=int)
    p.add_argument("--retrain-epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    base: dict = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from None
    cfg = RunConfig.from_dict(base)
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name, None) is not None}
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="surprisenet", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="train SurpriseNet over a class-incremental scenario")
    _add_run_flags(p)

    p = sub.add_parser("baseline", help="run the naive or joint reference")
    p.add_argument("kind", help="naive | joint")
    _add_run_flags(p)

    p = sub.add_parser("sweep", help="repeat 'run' over several seeds")
    p.add_argument("--seeds", type=_int_list, required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--kind", default="surprisenet", choices=["surprisenet", "naive", "joint"])
    _add_run_flags(p)

    p = sub.add_parser("inspect", help="print a checkpoint's header and capacity usage")
    p.add_argument("checkpoint")
    return parser


def cmd_run(cfg: RunConfig) -> int:
    return _guarded(lambda: _print_report(execute(cfg, "surprisenet")))


def cmd_baseline(cfg: RunConfig, kind: str) -> int:
    if kind not in ("naive", "joint"):
        print(f"error: unknown baseline kind {kind!r} (expected naive or joint)", file=sys.stderr)
        return EXIT_CONFIG
    return _guarded(lambda: _print_report(execute(cfg, kind)))


def _sweep_child(cfg: RunConfig, kind: str) -> tuple[int, RunReport | None, str]:
    try:
        return EXIT_OK, execute(cfg, kind), ""
    except (ConfigError, DataFormatError, FileNotFoundError) as e:
        return EXIT_CONFIG, None, str(e)
    except SurpriseNetError as e:
        return EXIT_RUNTIME, None, str(e)


def cmd_sweep(cfg: RunConfig, seeds: list[int], jobs: int = 1, kind: str = "surprisenet") -> int:
    if not seeds:
        print("error: --seeds needs at least one seed", file=sys.stderr)
        return EXIT_CONFIG
    root = Path(cfg.out)
    root.mkdir(parents=True, exist_ok=True)
    children = [replace(cfg, seed=s, out=str(root / f"seed{s}")) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_sweep_child, children, [kind] * len(children)))
    else:
        outcomes = [_sweep_child(c, kind) for c in children]
    status = EXIT_OK
    finals = []
    for seed, (code, report, err) in zip(seeds, outcomes):
        if report is None:
            print(f"seed {seed}: failed: {err}", file=sys.stderr)
            status = max(status, code)
            continue
        append_summary(root / "summary.csv", report)
        finals.append(report.final_accuracy)
        print(f"seed {seed}: final accuracy {report.final_accuracy:.4f}")
    if finals:
        mean, std = aggregate(finals)
        print(f"aggregate over {len(finals)} seeds: final accuracy {mean * 100:.2f} +- {std * 100:.2f}")
    return status


def cmd_inspect(path: str) -> int:
    try:
        with open(path, "rb") as fp:
            meta, reg, layers = read_checkpoint(fp)
    except (OSError, DataFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps({"metadata": meta, "registry": reg}, indent=2, sort_keys=True))
    for st in layers:
        a = st["assignment"]
        counts = {("free" if int(k) == 255 else int(k)): int((a == k).sum()) for k in sorted(set(a.reshape(-1).tolist()))}
        print(f"{st['name']:12s} {tuple(st['weight'].shape)!s:12s} snapshots={len(st['bias_snapshots'])} {counts}")
    return EXIT_OK


def _print_report(report: RunReport) -> None:
    tid = report.task_id_accuracy
    extra = "" if tid is None else f", task-id accuracy {tid:.4f}"
    print(f"{report.kind}: final accuracy {report.final_accuracy:.4f}{extra}")


def _guarded(fn) -> int:
    try:
        fn()
    except (ConfigError, DataFormatError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SurpriseNetError as e:
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "inspect":
        return cmd_inspect(args.checkpoint)
    try:
        cfg = _config_from_args(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TypeError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "run":
        return cmd_run(cfg)
    if args.command == "baseline":
        return cmd_baseline(cfg, args.kind)
    return cmd_sweep(cfg, args.seeds, args.jobs, args.kind)


if __name__ == "__main__":
    sys.exit(main())
