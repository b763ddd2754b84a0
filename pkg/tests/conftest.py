import functools
import sys

import numpy as np
import pytest

from poseqa.synth import fixture, model_table_for, render_depth, standard_fixtures
from poseqa.world_frame import WorldTransform


def random_rotation(seed):
    q = np.random.default_rng(seed).normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


@functools.lru_cache(maxsize=None)
def rendered(name: str, sigma: float = 0.0, seed: int | None = None):
    spec = fixture(name)
    if sigma:
        spec = spec.with_noise(sigma, seed)
    frame, gt = render_depth(spec)
    return spec, frame, gt, model_table_for([spec])


def true_world(spec) -> WorldTransform:
    return WorldTransform.from_world_to_cam(spec.world_to_cam)


@pytest.fixture(params=sorted(standard_fixtures()))
def fixture_name(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance.RESULTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
