import numpy as np
import pytest

from surprisenet import HybridModel, ModelConfig, make_scenario, synth_clusters
from surprisenet.rng import make_rng

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def separable_2task():
    ds = synth_clusters(4, 16, 200, 8.0, seed=3)
    return make_scenario(ds, 2, 2, seed=3)


def small_model(variant="ae", input_dim=4, classes=3, hidden=(6,), latent=3, kl_weight=0.5, dtype=np.float32):
    return HybridModel(ModelConfig(input_dim, classes, hidden, latent, variant, kl_weight), dtype=dtype)


def started_model(variant="ae", seed=0, **kw):
    """A small model with task 0 begun (FREE weights initialised)."""
    m = small_model(variant, **kw)
    m.registry.begin_task(make_rng(seed, 99))
    for layer in m.layers:
        layer.bias.data = make_rng(seed, 98).uniform(-0.5, 0.5, layer.bias.shape).astype(layer.bias.dtype)
    return m
