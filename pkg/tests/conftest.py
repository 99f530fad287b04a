import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _seeded():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture()
def toy_record():
    from voxelgrounder.phantoms import generate_phantom, sample_phantom_spec

    return generate_phantom(sample_phantom_spec(seed=100, difficulty="large_organ"))


@pytest.fixture(scope="session")
def small_corpus():
    from voxelgrounder.phantoms import make_corpus

    return make_corpus(3, "mixed", seed=100)


@pytest.fixture(scope="session")
def tiny_model(small_corpus):
    """A small untrained model shared by structural tests."""
    from voxelgrounder.config import Config
    from voxelgrounder.training import build_model, build_vocabulary

    cfg = Config()
    vocab = build_vocabulary(small_corpus)
    return build_model(cfg, vocab), cfg
