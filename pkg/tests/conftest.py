import numpy as np
import pytest

from evtc import data as D
from evtc import models as M
from evtc import train as TR

TINY_RES = (16, 16)
SMALL_RES = (32, 32)


def tiny_config(**overrides):
    """Smallest legal student: 16x16 input, 1 block, narrow widths."""
    defaults = dict(input_resolution=TINY_RES, num_classes=5, stem_channels=(4, 8),
                    embed_dim=8, num_heads=2, num_blocks=1, mlp_ratio=2,
                    decoder_channels=8, patch_size=2)
    defaults.update(overrides)
    return M.student_config(**defaults)


def small_config(**overrides):
    defaults = dict(input_resolution=SMALL_RES)
    defaults.update(overrides)
    return M.student_config(**defaults)


def small_scene(**overrides):
    defaults = dict(resolution=SMALL_RES, num_classes=14, seed=0)
    defaults.update(overrides)
    return D.SceneSpec(**defaults)


@pytest.fixture(scope="session")
def small_data():
    spec = small_scene()
    return D.generate_split(spec, 64, "train"), D.generate_split(spec, 24, "eval")


_trained_cache = {}


def trained_student(seed: int, iterations: int = 400, data=None):
    """Session-cached trained 32x32 students shared across expensive tests."""
    key = (seed, iterations)
    if key not in _trained_cache:
        if data is None:
            spec = small_scene()
            data = D.generate_split(spec, 64, "train")
        model = M.build_model(small_config(), seed=seed)
        TR.train(model, data, TR.TrainConfig(iterations=iterations, batch_size=8, seed=seed))
        _trained_cache[key] = model
    return _trained_cache[key].copy()


@pytest.fixture(scope="session")
def trained_student_s0(small_data):
    return trained_student(0, data=small_data[0])
