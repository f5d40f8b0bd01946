from __future__ import annotations

from pathlib import Path
from typing import Iterator

import pytest
import torch

from app.config import Dims, TrainConfig
from app.logs import configure_logging
from app.synthtask import TaskSpec, generate_dataset

# Tiny model and task sizes so unit tests stay in the sub-second range.
TINY_DIMS = Dims(M=4, d=8, n_heads=2, d_ff=12, L_q=1, T=4, D=2, expert_hidden=10, n_freqs=3)
TINY_SPEC = TaskSpec(n_tasks=3, n_nuisances=4, T=4, D=2, M=4, d=8, train_fraction=0.5, seed=3)


@pytest.fixture(autouse=True)
def _quiet_logging() -> None:
    configure_logging(log_dir=None, quiet=True)


@pytest.fixture(autouse=True, scope="session")
def _float64_default() -> Iterator[None]:
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def tiny_config() -> TrainConfig:
    return TrainConfig(
        dims=TINY_DIMS,
        total_steps=6,
        warmup_steps=2,
        batch_size=4,
        log_every=2,
    )


@pytest.fixture
def tiny_dataset():
    return generate_dataset(TINY_SPEC)


@pytest.fixture
def tmp_artifact(tmp_path: Path) -> Path:
    return tmp_path / "artifact.db"
