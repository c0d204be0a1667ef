import numpy as np
import pytest

from srlground.corpus import make_splits
from srlground.featurestore import FeatureStore
from srlground.synthworld import WorldConfig, generate, write_world


@pytest.fixture(scope="session")
def small_world(tmp_path_factory):
    """A 24-video synthetic world written to disk, shared across tests."""
    root = tmp_path_factory.mktemp("world")
    cfg = WorldConfig(n_videos=24, noise_sigma=0.1)
    world = generate(cfg, seed=7)
    world.corpus = make_splits(world.corpus, seed=7)
    write_world(world, str(root))
    return world, str(root)


@pytest.fixture(scope="session")
def small_store(small_world):
    world, root = small_world
    return FeatureStore(f"{root}/features", world.corpus.videos)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
