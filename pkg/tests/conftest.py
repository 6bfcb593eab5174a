"""Shared fixtures: one trained spiral denoiser per test session.

The denoiser is trained once (default config: T=200, 2e4 steps) and its
checkpoint is reused by every test and acceptance criterion that needs a
trained model. The wall-clock cost of training is recorded so the
feasible-region criterion can report its runtime including training.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from ldulab import experiments as ex
from ldulab.checkpoint import save_checkpoint
from ldulab.config import ExperimentConfig, from_dict
from ldulab.diffusion import Denoiser, TrainTrace, train_dm
from ldulab.nets import init_denoiser

# PASS/FAIL lines collected by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


@dataclass
class TrainedSpiral:
    checkpoint: Path
    train_seconds: float
    lab: ex.Lab
    trace: TrainTrace

    def config(self, **sections) -> ExperimentConfig:
        """Default config pointing at the shared checkpoint, with ``sections`` merged in."""
        data = {"model": {"checkpoint": str(self.checkpoint)}}
        for key, value in sections.items():
            if isinstance(value, dict):
                data.setdefault(key, {}).update(value)
            else:
                data[key] = value
        return from_dict(data)


@pytest.fixture(scope="session")
def trained_spiral(tmp_path_factory) -> TrainedSpiral:
    root = tmp_path_factory.mktemp("dm")
    cfg = ExperimentConfig(output_dir=str(root))
    t0 = time.perf_counter()
    schedule = ex.build_schedule(cfg)
    dataset = ex.build_dataset(cfg)
    spec = ex.denoiser_spec(cfg)
    model = Denoiser(init_denoiser(spec, cfg.model.seed), spec, schedule=schedule)
    m = cfg.model
    trace = train_dm(model, dataset.pool, dataset.pool_labels, schedule, m.train_steps, lr=m.lr, seed=m.seed,
                     batch=m.batch, cond_drop=m.cond_drop, lr_final=m.lr_final)
    path = root / "checkpoints" / "dm.ldul"
    save_checkpoint(path, model.params, schedule)
    seconds = time.perf_counter() - t0
    lab = ex.setup(cfg, root)
    return TrainedSpiral(path, seconds, lab, trace)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
