import numpy as np
import pytest

from sparsevox.config import RunConfig
from sparsevox.scenegen import SceneSpec, gen_scene


def tiny_spec(seed=0, **kw):
    """A very small scene for fast unit tests."""
    base = dict(seed=seed, num_boxes=(2, 3), sweeps=2,
                ground_points_per_sweep=300, box_points_base=80,
                center_dist=(8.0, 40.0))
    base.update(kw)
    return SceneSpec(**base)


def tiny_config(**kw):
    """A very small model for fast unit tests."""
    base = dict(d_model=48, decoder_layers=2, num_queries=24, dfm_blocks=1,
                dfm_window=(4, 4, 4), dfm_set_size=8, dfm_shift=(2, 2, 0),
                elim_k=64.0, steps=30, lr=3e-3, seed=0)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def tiny_scene():
    return gen_scene(tiny_spec(seed=7))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
