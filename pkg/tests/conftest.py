import dataclasses

import pytest

from tmtreid.pipeline import benchmark_config


def tiny_config(seed: int = 3, **train):
    """Benchmark layout shrunk to a few seconds of training."""
    cfg = benchmark_config(seed)
    cfg.model = dataclasses.replace(cfg.model, channels=8, stem_channels=(4, 8))
    cfg.synth = dataclasses.replace(cfg.synth, num_identities=4, frames_per_tracklet=8)
    cfg.train = dataclasses.replace(cfg.train, **{"epochs": 2, "batch_size": 8, **train})
    return cfg.check()


@pytest.fixture
def tiny():
    return tiny_config()
