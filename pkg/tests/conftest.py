import os
import sys

# make the drselect package importable without installing it
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import pytest  # noqa: E402

from drselect.core.data_model import BackendSpec, DrPool  # noqa: E402
from drselect.core.retrieval import LexicalIndex, build_backend  # noqa: E402
from helpers import (NOISE_LEVELS, make_corpus, synthetic_corpus,  # noqa: E402
                     write_world)


@pytest.fixture(scope="session")
def world_corpus():
    return synthetic_corpus()


@pytest.fixture(scope="session")
def world_index(world_corpus):
    return LexicalIndex(world_corpus)


@pytest.fixture
def world_pool():
    return DrPool(tuple(
        (dr_id, BackendSpec("lexical", options={"noise": noise,
                                                "noise_seed": i}))
        for i, (dr_id, noise) in enumerate(NOISE_LEVELS.items())))


@pytest.fixture
def world_backends(world_pool, world_index):
    return {dr_id: build_backend(dr_id, spec, index=world_index)
            for dr_id, spec in world_pool.retrievers}


@pytest.fixture
def world_files(tmp_path, world_corpus):
    return write_world(tmp_path, world_corpus)


@pytest.fixture
def tiny_corpus():
    return make_corpus("zymurgy zymurgy beer brewing yeast hops malt",
                       "beer tasting notes and hops",
                       "cats sleep most of the day",
                       "dogs chase cats in the park",
                       titles=["Zymurgy", "", "Cats", ""])
