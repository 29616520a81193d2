import numpy as np
import pytest
import torch

from restorender.dataset import ToySceneConfig, generate_toy_scene


@pytest.fixture(scope="session")
def small_scene():
    return generate_toy_scene(ToySceneConfig(seed=7, num_views=12, resolution=(32, 32), layout="sphere-field"))


@pytest.fixture(scope="session")
def plane_scene():
    return generate_toy_scene(ToySceneConfig(seed=7, num_views=12, resolution=(64, 64), layout="textured-plane"))


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


def rng(seed=0):
    return np.random.default_rng(seed)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            lines += [v for k, v in getattr(rep, "user_properties", []) if k == "criterion"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.line(line)
