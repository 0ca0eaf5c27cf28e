"""Shared expensive fixtures and the acceptance summary printed at the end of a run."""

import dataclasses
import time

import pytest

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {title}  {detail}")


SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def default_runs():
    """Full pipeline on the default dataset for every seed: {seed: (result, dataset, seconds)}."""
    from rdslide.config import RunConfig
    from rdslide.pipeline import prepare_teacher, run_experiment
    from rdslide.slides import build_dataset

    runs = {}
    for seed in SEEDS:
        t0 = time.perf_counter()
        cfg = RunConfig().with_seed(seed)
        dataset = build_dataset(cfg.dataset)
        result = run_experiment(cfg, dataset, prepare_teacher(cfg))
        runs[seed] = (result, dataset, time.perf_counter() - t0)
    return runs


@pytest.fixture(scope="session")
def ablation_results():
    """Tumor-count and weighting cells on the default config over three seeds."""
    from rdslide.config import RunConfig
    from rdslide.pipeline import run_ablation

    return run_ablation(RunConfig(), seeds=SEEDS, counts=(0, 50), balanced=False)


@pytest.fixture(scope="session")
def baseline_run():
    """Standalone normal-only run at seed 0 (its own dataset and teacher)."""
    from rdslide.config import RunConfig
    from rdslide.pipeline import run_experiment

    cfg = RunConfig().with_seed(0)
    cfg = dataclasses.replace(cfg, dataset=dataclasses.replace(cfg.dataset, n_tumor_train=0))
    return run_experiment(cfg, evaluate_slides=False)
