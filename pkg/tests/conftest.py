import numpy as np
import pytest

from targetdial.corpus import AtomSet, CorpusMeta, Dialogue, Turn, UserProfile
from targetdial.model import ModelConfig, ModelParams


TINY = dict(
    n_atoms=3,
    intent_vocab=4,
    sparse_vocab_sizes=(2, 3),
    n_numeric=1,
    embed_dim=4,
    hidden_dim=4,
    n_buckets=3,
)


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY)


@pytest.fixture
def tiny_params(tiny_config):
    params = ModelParams.init(tiny_config, seed=0)
    rng = np.random.default_rng(99)
    # randomize biases as well so oracles exercise every term
    for name, arr in params.arrays.items():
        params.arrays[name] = rng.normal(scale=0.3, size=arr.shape)
    return params


def make_profile(rng=None):
    rng = rng or np.random.default_rng(0)
    return UserProfile(
        sparse=((0, int(rng.integers(0, 2))), (1, int(rng.integers(0, 3)))),
        numeric=((0, float(rng.normal()),),),
    )


def make_tiny_dialogue(rng=None, n_turns=3, label=1, did="d0"):
    rng = rng or np.random.default_rng(1)
    turns = tuple(
        Turn(
            int(rng.integers(0, TINY["intent_vocab"])),
            AtomSet(tuple(rng.choice(TINY["n_atoms"], size=int(rng.integers(1, TINY["n_atoms"] + 1)), replace=False))),
        )
        for _ in range(n_turns)
    )
    return Dialogue(id=did, user=make_profile(rng), turns=turns, label=label, bin_key=0.0)


@pytest.fixture
def tiny_dialogue():
    return make_tiny_dialogue()
