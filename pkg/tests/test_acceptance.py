"""End-to-end acceptance checks, one test per criterion.

Each test appends a PASS / FAIL / SKIP line that the terminal summary
prints under "acceptance criteria".
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from surprisenet.cli import RunConfig, cmd_run, execute
from surprisenet.data import make_scenario, synth_clusters
from surprisenet.masked import FREE, MaskedLinear, TaskRegistry, eqprune_lambda, freeze_current
from surprisenet.metrics import aggregate, read_report
from surprisenet.model import HybridModel, ModelConfig
from surprisenet.rng import make_rng
from surprisenet.tensor import GradientTape, Tensor, backward
from surprisenet.trainer import TrainPlan, Trainer

FMNIST_ENV = "SURPRISENET_FMNIST_DIR"


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number} {title}: {detail}")
    assert ok, detail


# -- 1: freeze invariance ------------------------------------------------------


def test_criterion_1_freeze_invariance():
    t0 = time.perf_counter()
    ds = synth_clusters(6, 16, 200, 8.0, seed=11)
    scen = make_scenario(ds, 3, 2, seed=11)
    model = HybridModel(ModelConfig(16, 6, (64, 32), 16))
    trainer = Trainer(model, TrainPlan(epochs_per_task=30, learning_rate=8e-4, seed=11))
    probe = make_rng(11, 7).choice(ds.test.x, size=100, replace=False)

    def snapshot(k):
        res = model.forward(probe, k, training=False)
        return res.reconstruction.data.tobytes() + res.logits.data.tobytes() + res.latent.data.tobytes()

    seen = {}
    mismatches = 0
    for t in range(3):
        trainer.train_task(scen.task_data(t, "train"), t, 3, scen.task_classes[t])
        for k, ref in seen.items():
            mismatches += snapshot(k) != ref
        seen[t] = snapshot(t)
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 120
    verdict(1, "freeze invariance", ok, f"{mismatches} of 3 frozen-subset comparisons differ, {elapsed:.1f}s")


# -- 2: gradient check ---------------------------------------------------------


def _total_loss(model, x, y, noise):
    return model.training_loss(model.forward(x, 1, training=True, noise=noise), y).total


@pytest.mark.parametrize("variant", ["ae", "vae"])
def test_criterion_2_gradient_check(variant):
    t0 = time.perf_counter()
    cfg = ModelConfig(6, 3, (8,), 3, variant, kl_weight=0.5)
    model = HybridModel(cfg)
    rng = make_rng(21, 0)
    # freeze one task so the check runs through masked layers and bias snapshots
    model.registry.begin_task(rng)
    model.registry.prune(0.5)
    freeze_current(model.registry)
    model.registry.begin_task(rng)
    for layer in model.layers:
        layer.bias.data = rng.uniform(-0.3, 0.3, layer.bias.shape).astype(np.float32)
    assert model.parameter_count() <= 500

    x = rng.normal(size=(5, 6)).astype(np.float32)
    y = np.array([0, 1, 2, 1, 0])
    noise = rng.normal(size=(5, 3)).astype(np.float32) if variant == "vae" else None
    with GradientTape() as tape:
        loss = _total_loss(model, x, y, noise)
    grads = model.registry.gate_gradients(backward(loss, tape))

    # coordinates that task 1 is allowed to change
    params = model.parameters()
    coords = []
    for pi, p in enumerate(params):
        owner = next(l for l in model.layers if p is l.weight or p is l.bias)
        if p is owner.weight:
            allowed = np.argwhere(owner.assignment == FREE)
        else:
            allowed = np.argwhere(np.ones(p.shape, bool))
        coords += [(pi, tuple(c)) for c in allowed]
    picks = [coords[i] for i in rng.choice(len(coords), size=100, replace=False)]

    wide = model.astype(np.float64)
    wparams = wide.parameters()
    x64, n64 = x.astype(np.float64), None if noise is None else noise.astype(np.float64)
    h = 1e-3
    errs = []
    for pi, idx in picks:
        p = wparams[pi]
        orig = p.data[idx]
        p.data[idx] = orig + h
        up = _total_loss(wide, x64, y, n64).item()
        p.data[idx] = orig - h
        down = _total_loss(wide, x64, y, n64).item()
        p.data[idx] = orig
        numeric = (up - down) / (2 * h)
        analytic = float(grads[params[pi]][idx]) if params[pi] in grads else 0.0
        scale = max(abs(numeric), abs(analytic))
        errs.append(0.0 if scale < 1e-7 else abs(numeric - analytic) / scale)
    good = float(np.mean(np.array(errs) <= 1e-3))
    elapsed = time.perf_counter() - t0
    ok = good >= 0.95 and elapsed < 60
    verdict(2, f"gradient check ({variant})", ok, f"{good:.0%} of 100 coordinates within 1e-3 relative error, worst {max(errs):.2e}")


# -- 3: prune accounting -------------------------------------------------------


def test_criterion_3_prune_accounting():
    t0 = time.perf_counter()
    failures = []
    for n in (10, 100, 1000):
        for T in range(2, 11):
            layer = MaskedLinear(n, 1, "l")
            reg = TaskRegistry([layer], T)
            rng = make_rng(n, T)
            for t in range(T):
                reg.begin_task(rng)
                reg.prune(eqprune_lambda(t + 1, T))
                freeze_current(reg)
            counts = [int((layer.assignment == t).sum()) for t in range(T)]
            if sum(counts) != n or max(abs(c - n / T) for c in counts) > T:
                failures.append(f"eqprune n={n} T={T} counts={counts}")
            # fixed proportion with ties: exact floor count, stable order
            for lam in (0.0, 0.25, 0.5, 0.6, 0.999):
                layer = MaskedLinear(n, 1, "f")
                reg = TaskRegistry([layer])
                reg.begin_task(rng)
                w = np.round(rng.uniform(-1, 1, n), 1).astype(np.float32)  # many ties
                layer.weight.data = w.reshape(1, n)
                removed = reg.prune(lam)["f"]
                expect = math.floor(lam * n + 1e-9)
                oracle = sorted(range(n), key=lambda i: (abs(float(w[i])), i))[:expect]
                got = sorted(np.flatnonzero(layer.assignment.reshape(-1) == FREE).tolist())
                if removed != expect or got != sorted(oracle):
                    failures.append(f"fixed n={n} lam={lam}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 10
    verdict(3, "prune accounting", ok, f"{len(failures)} failures over 27 EqPrune and 135 fixed cases, {elapsed:.1f}s" + (f" ({failures[:3]})" if failures else ""))


# -- 4, 6, 8: synthetic forgetting contrast ------------------------------------

CONTRAST = dict(dataset="synth", n_tasks=5, classes_per_task=2, synth_dim=16, synth_per_class=200, synth_separation=8.0)


@pytest.fixture(scope="module")
def contrast_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("contrast")
    runs = {}
    t0 = time.perf_counter()
    runs["naive"] = execute(RunConfig(**CONTRAST, out=str(root / "naive")), "naive")
    runs["ae"] = execute(RunConfig(**CONTRAST, variant="ae", out=str(root / "ae")))
    runs["vae"] = execute(RunConfig(**CONTRAST, variant="vae", out=str(root / "vae")))
    runs["elapsed"] = time.perf_counter() - t0
    return runs


def test_criterion_4_forgetting_contrast(contrast_runs):
    naive, ae = contrast_runs["naive"], contrast_runs["ae"]
    assert naive.config["plan"] == ae.config["plan"]  # identical budgets
    ok = naive.final_accuracy <= 0.30 and ae.final_accuracy >= 0.85 and ae.task_id_accuracy >= 0.90
    verdict(
        4,
        "forgetting contrast",
        ok,
        f"naive {naive.final_accuracy:.3f} (<=0.30), SurpriseNet AE {ae.final_accuracy:.3f} (>=0.85), "
        f"task-id {ae.task_id_accuracy:.3f} (>=0.90)",
    )


def test_criterion_8_vae_parity(contrast_runs):
    ae, vae = contrast_runs["ae"].final_accuracy, contrast_runs["vae"].final_accuracy
    gap = abs(ae - vae) * 100
    verdict(8, "VAE parity", gap <= 10.0, f"AE {ae:.3f}, VAE {vae:.3f}, gap {gap:.1f} points (<=10)")


def test_criterion_6_chain_inequality(contrast_runs, tmp_path):
    # evaluate_step raises on any violation; re-check the recorded matrices too
    extra = execute(RunConfig(dataset="synth", n_tasks=3, synth_per_class=60, epochs=20, variant="vae", seed=6, out=str(tmp_path)))
    checked = 0
    for rep in (contrast_runs["ae"], contrast_runs["vae"], extra):
        m = rep.matrix
        for t in range(m.n_tasks):
            assert m.overall[t] <= m.overall_task_id[t]
            for u in range(t + 1):
                assert m.acc[t][u] <= m.task_id[t][u]
                checked += 1
    verdict(6, "chain inequality", True, f"{checked} per-task cells over 3 runs satisfy class-IL <= task-id")


# -- 7: determinism ------------------------------------------------------------


def _report_without_timing(run_dir: Path) -> dict:
    d = json.loads((run_dir / "report.json").read_text())
    d.pop("timing")
    return d


def test_criterion_7_determinism(tmp_path, capsys):
    t0 = time.perf_counter()
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        assert cmd_run(RunConfig(dataset="synth", n_tasks=3, variant="vae", seed=13, out=str(d))) == 0
    capsys.readouterr()
    ckpts = sorted(p.name for p in dirs[0].glob("checkpoint*.bin"))
    same_ckpt = all((dirs[0] / n).read_bytes() == (dirs[1] / n).read_bytes() for n in ckpts)
    same_report = _report_without_timing(dirs[0]) == _report_without_timing(dirs[1])
    same_log = (dirs[0] / "tasklog.jsonl").read_text().count("\n") == 3
    elapsed = time.perf_counter() - t0
    ok = same_ckpt and same_report and same_log and elapsed < 180
    verdict(7, "determinism", ok, f"{len(ckpts)} checkpoints identical={same_ckpt}, report identical={same_report}, {elapsed:.1f}s")


# -- 5: Fashion-MNIST anchor ---------------------------------------------------


def _fmnist_dir():
    d = os.environ.get(FMNIST_ENV)
    if not d or not any(Path(d).glob("train-images-idx3-ubyte*")):
        return None
    return d


def test_criterion_5_fmnist_anchor(tmp_path):
    data_dir = _fmnist_dir()
    if data_dir is None:
        ACCEPTANCE_LINES.append(f"[SKIP] criterion 5 Fashion-MNIST anchor: IDX files not present (set {FMNIST_ENV})")
        pytest.skip("Fashion-MNIST IDX files not available")
    base = dict(dataset="idx", idx_dir=data_dir, n_tasks=5, classes_per_task=2)
    naive = [execute(RunConfig(**base, seed=s, out=str(tmp_path / f"naive{s}")), "naive").final_accuracy for s in range(3)]
    best = None
    for lam in (0.4, 0.5, 0.6):
        accs = [execute(RunConfig(**base, prune=f"fixed:{lam}", seed=s, out=str(tmp_path / f"sn{lam}_{s}"))).final_accuracy for s in range(3)]
        mean, std = aggregate(accs)
        if best is None or mean > best[1]:
            best = (lam, mean, std)
    n_mean, n_std = aggregate(naive)
    ok = abs(n_mean - 0.20) <= 0.04 and best[1] >= 0.65
    verdict(
        5,
        "Fashion-MNIST anchor",
        ok,
        f"naive {n_mean * 100:.2f} +- {n_std * 100:.2f} (target 20 +- 4), SurpriseNet AE best lambda {best[0]} "
        f"{best[1] * 100:.2f} +- {best[2] * 100:.2f} (>=65; the reference convolutional model reports 82.16)",
    )
