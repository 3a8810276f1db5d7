import numpy as np
import pytest

from unient import bench, nn


@pytest.fixture(scope="session")
def default_cfg():
    return bench.BenchmarkConfig(seed=42)


@pytest.fixture(scope="session")
def source_model_42(default_cfg):
    """Seed-42 pretrained model on the default benchmark (shared, do not mutate)."""
    pc = nn.PretrainConfig()
    data = bench.make_source(default_cfg, pc.n_train_per_class, "train")
    return nn.pretrain(data, pc, seed=42)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
