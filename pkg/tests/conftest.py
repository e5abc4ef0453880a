"""Shared desk-scale fixtures: a 158-subject training corpus, a disjoint
60 x 10 benchmark (seed 7) and three trained models (seeds 1-3)."""

import pytest

from mtadv.dataset import generate_dataset
from mtadv.embedder import DEFAULT_ARCH, DefenseTransform, TrainConfig, calibrate_system, init_model, train_model

BENCH_SEED = 7
MODEL_SEEDS = (1, 2, 3)


@pytest.fixture(scope="session")
def train_data():
    return generate_dataset(158, 10, seed=0)


@pytest.fixture(scope="session")
def bench():
    return generate_dataset(60, 10, seed=BENCH_SEED)


@pytest.fixture(scope="session")
def models(train_data):
    return {s: train_model(init_model(DEFAULT_ARCH, seed=s), train_data, TrainConfig(seed=s)) for s in MODEL_SEEDS}


@pytest.fixture(scope="session")
def systems(models, bench):
    return {s: calibrate_system(m, bench) for s, m in models.items()}


@pytest.fixture(scope="session")
def blur_system(models, bench):
    return calibrate_system(models[1], bench, DefenseTransform("gaussian_blur", 1.0))


# --- acceptance summary -------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def record(number: int, title: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE[number] = (bool(passed), title, detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {n:2d}. {title}: {detail}")
