"""Shared fixtures for the behavioral acceptance criteria.

The toy-training grids here are expensive (minutes each), so they are
session-scoped and shared between the acceptance tests and the handful of
unit tests that need a genuinely trained model. Collection is reordered so
the cheap unit suites run before anything that triggers these fixtures.
"""

import time

import numpy as np
import pytest

from mimdit.flow import SamplerConfig
from mimdit.routing import MiMConfig
from mimdit.training import (
    DataConfig,
    ExperimentConfig,
    OptimizerConfig,
    aggregate_traces,
    collect_routing_traces,
    derived_seed,
    evaluate_model,
    evaluation_data,
    run_ablation,
    train_model,
)

PINNED_SEEDS = (0, 1, 2)
SINGLE_STRUCTURE_VARIANTS = ("spatial_only", "channel_only", "swin_only", "se_only")


def ablation_protocol(seed):
    """Pinned toy task: 16x16 grayscale, three degradation kinds, 2000 steps.

    Two sub-experts with top-1 selection keep the per-variant parameter gap
    meaningful while the whole grid stays inside the runtime budget.
    """
    return ExperimentConfig(
        model=MiMConfig(sub_expert_count=2, top_k=1),
        sampler=SamplerConfig(steps=40),
        optimizer=OptimizerConfig(learning_rate=2e-3),
        data=DataConfig(
            count=48,
            eval_count=16,
            kinds=("blur", "noise", "lowlight"),
            severity_lo=0.5,
            severity_hi=1.0,
        ),
        train_steps=2000,
        batch_size=8,
        seed=seed,
    ).validate()


def routing_protocol(seed):
    """Toy task for routing specialization: two maximally distinct kinds."""
    return ExperimentConfig(
        model=MiMConfig(sub_expert_count=2, top_k=1),
        sampler=SamplerConfig(steps=40),
        optimizer=OptimizerConfig(learning_rate=2e-3),
        data=DataConfig(
            count=48,
            eval_count=16,
            kinds=("blur", "haze"),
            severity_lo=0.5,
            severity_hi=1.0,
        ),
        train_steps=2000,
        batch_size=8,
        seed=seed,
    ).validate()


def restore_protocol(seed):
    """Single heavy degradation, so restoration can beat the raw input."""
    return ExperimentConfig(
        model=MiMConfig(sub_expert_count=2, top_k=1),
        sampler=SamplerConfig(steps=40),
        optimizer=OptimizerConfig(learning_rate=2e-3),
        data=DataConfig(
            count=48,
            eval_count=16,
            kinds=("lowlight",),
            severity_lo=1.0,
            severity_hi=1.0,
        ),
        train_steps=2000,
        batch_size=8,
        seed=seed,
    ).validate()


@pytest.fixture(scope="session")
def ablation_grid():
    """All six variants trained on the pinned protocol for each pinned seed.

    Returns per-(variant, seed) ablation rows plus the wall-clock seconds the
    full-vs-no_intra portion took, which one criterion bounds explicitly.
    """
    rows = {}
    core_seconds = 0.0
    for seed in PINNED_SEEDS:
        config = ablation_protocol(seed)
        start = time.monotonic()
        for row in run_ablation(config, ("full", "no_intra")):
            rows[(row.variant, seed)] = row
        core_seconds += time.monotonic() - start
        for row in run_ablation(config, SINGLE_STRUCTURE_VARIANTS):
            rows[(row.variant, seed)] = row
    return {"rows": rows, "core_seconds": core_seconds}


@pytest.fixture(scope="session")
def routing_reports():
    """Routing report per pinned seed after toy training on two kinds."""
    reports = {}
    for seed in PINNED_SEEDS:
        config = routing_protocol(seed)
        model, _ = train_model(config)
        traces = collect_routing_traces(
            model, evaluation_data(config), derived_seed(config.seed, 5)
        )
        reports[seed] = aggregate_traces(traces)
    return reports


@pytest.fixture(scope="session")
def restore_probe():
    """Held-out restored MSE next to the degraded input's own MSE."""
    config = restore_protocol(seed=0)
    model, _ = train_model(config)
    samples = evaluation_data(config)
    mse, _ = evaluate_model(model, samples, config.sampler, derived_seed(config.seed, 5))
    baseline = float(np.mean([(s.degraded - s.clean) ** 2 for s in samples]))
    return {"restored_mse": mse, "degraded_mse": baseline}


_verdicts = []


@pytest.fixture
def verdict():
    """Records one pass/fail line per acceptance criterion and asserts it."""

    def record(number, label, ok, detail):
        line = f"criterion {number:2d} [{label}]: {'PASS' if ok else 'FAIL'} ({detail})"
        _verdicts.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for line in _verdicts:
            terminalreporter.write_line(line)


def pytest_collection_modifyitems(items):
    # Stable sort: unit suites keep their order, acceptance runs last.
    items.sort(key=lambda item: item.fspath.basename == "test_acceptance.py")
