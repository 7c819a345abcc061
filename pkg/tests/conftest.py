import functools

import pytest
from hypothesis import HealthCheck, settings

from jointvo.simulator import SceneConfig, generate_scene, render_pair

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@functools.lru_cache(maxsize=None)
def scene(seed, dynamic=0.0, frames=2):
    cfg = SceneConfig(n_bodies=3 if dynamic else 0, dynamic_fraction_target=dynamic, frames=frames)
    return generate_scene(seed, cfg)


@functools.lru_cache(maxsize=None)
def truth(seed, dynamic=0.0):
    return render_pair(scene(seed, dynamic), 0)


@pytest.fixture
def static_scene():
    return scene(0)


@pytest.fixture
def dynamic_scene():
    return scene(0, 0.3)
