import numpy as np
import pytest

from ppunlearn import (ForgetSpec, ModelLayout, TrainConfig, gen_blobs,
                       init_model, make_forget_split, train_ce)


@pytest.fixture(scope="session")
def small_blobs():
    """5-class, 8-d, well-separated blobs shared by the cheaper tests."""
    return gen_blobs(n_classes=5, dim=8, n_per_class=125, spread=0.6, seed=3)


@pytest.fixture(scope="session")
def small_split(small_blobs):
    spec = ForgetSpec(mode="selective", target_class=0, count=25, seed=103)
    return make_forget_split(small_blobs, spec)


@pytest.fixture(scope="session")
def small_model(small_blobs):
    layout = ModelLayout(small_blobs.dim, 32, small_blobs.n_classes)
    cfg = TrainConfig(lr=0.05, epochs=40, batch_size=32, seed=2)
    return train_ce(init_model(layout, seed=1),
                    *small_blobs.split_arrays("train"), cfg)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
