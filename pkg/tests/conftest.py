import dataclasses

import pytest

from crossres.config import RunConfig


def tiny_config(seed=0, mode="full", **train) -> RunConfig:
    """Smallest config that exercises every code path in seconds."""
    cfg = RunConfig(seed=seed)
    cfg.data = dataclasses.replace(cfg.data, train_scenes=4, val_scenes=2, test_scenes=2, height=32, width=32)
    cfg.diffusion = dataclasses.replace(cfg.diffusion, base_channels=8, dec_channels=(8, 8, 8, 8, 8),
                                        pretrain_steps=5, pretrain_batch_size=2, extraction_step=50)
    cfg.transformer = dataclasses.replace(cfg.transformer, depth=1, heads=2, d=16, stage_channels=(8,) * 5)
    cfg.train = dataclasses.replace(cfg.train, mode=mode, crop_size=32, batch_size=2, crops_per_image=2,
                                    learning_rate=1e-3, fused_channels=8, max_steps=5, **train)
    return cfg.validate()


@pytest.fixture
def tiny():
    return tiny_config


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
