import numpy as np
import pytest

from faithlab import autograd as ag
from faithlab.microlm import ModelConfig, init_model
from faithlab.training import train_memorization
from faithlab.worldgen import generate_dataset

SMALL_WORLD = dict(n_famous=40, n_background=100, n_relations=8)


@pytest.fixture(scope="session")
def small_world():
    return generate_dataset(seed=3, **SMALL_WORLD)


@pytest.fixture(scope="session")
def small_memorized(small_world):
    model, summary = train_memorization(small_world, seed=3, max_epochs=120)
    assert summary.reached_target
    return model


@pytest.fixture
def tiny64(small_world):
    cfg = ModelConfig(vocab_size=len(small_world.vocab), d_model=8, n_layers=2, n_heads=2, d_ffn=12,
                      max_seq_len=8, seed=1, dtype="float64")
    return init_model(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with ag.precision("float64"):
        yield


ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def record_criterion(request):
    """Store one PASS/FAIL line per acceptance criterion for the terminal summary."""
    results = request.config.stash[ACCEPTANCE]

    def record(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}"
        results[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if results:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
