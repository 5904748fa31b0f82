import pytest

from flowadapt.adapters import EncoderConfig
from flowadapt.config import CorpusConfig, RunConfig, TrainingConfig
from flowadapt.duration import DurationConfig
from flowadapt.sampler import SolverConfig
from flowadapt.transformer import BackboneConfig


def tiny_config(out_dir, **changes) -> RunConfig:
    """A run small enough to pretrain, fine-tune and evaluate in well under a second."""
    config = RunConfig(
        backbone=BackboneConfig(n_layers=1, model_dim=16, ff_dim=32, n_heads=2, time_dim=8,
                                symbol_dim=8, max_seq_len=64),
        duration=DurationConfig(n_layers=1, model_dim=16, ff_dim=16, n_heads=2),
        corpus=CorpusConfig(n_pretrain=40, n_finetune=40),
        encoder=EncoderConfig(dim=16, ff_dim=16, n_layers=1, fit_steps=5),
        training=TrainingConfig(pretrain_steps=6, finetune_steps=5, batch_size=4,
                                checkpoint_every=4, log_every=2),
        solver=SolverConfig("euler", 4),
        out_dir=str(out_dir),
    )
    return config.replace(**changes) if changes else config


@pytest.fixture
def tiny():
    return tiny_config


# -- acceptance reporting ---------------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
