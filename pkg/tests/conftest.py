import numpy as np
import pytest
from hypothesis import settings

from neuralmedia.camera import Camera
from neuralmedia.lights import LightCondition
from neuralmedia.media import HomogeneousField, single_field_scene

settings.register_profile("repo", deadline=None, max_examples=60)
settings.load_profile("repo")

UNIT_BOX = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


def sphere_scene(sigma=2.0, albedo=0.8, g=0.0):
    return single_field_scene(HomogeneousField(sigma, (albedo,) * 3, g, UNIT_BOX, "sphere"))


@pytest.fixture
def sphere():
    return sphere_scene()


@pytest.fixture
def small_camera():
    return Camera.look_at((0.0, -4.0, 1.0), (0.0, 0.0, 0.0), width=16, height=16)


@pytest.fixture
def point_light():
    return LightCondition((3.0, -2.0, 2.0), 400.0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Twelve-pixel-square sphere views rendered at low spp."""
    from neuralmedia.evalkit import ViewConfig, generate_dataset
    from neuralmedia.oracle import PathTracerConfig

    root = tmp_path_factory.mktemp("tiny")
    generate_dataset(sphere_scene(), root, "point", (4, 1, 2), 0, PathTracerConfig(spp=16),
                     ViewConfig(width=12, height=12))
    return root


_verdicts = []


@pytest.fixture
def criterion():
    """Record one acceptance verdict, print it, then assert it."""
    def check(name, value, bound, ok):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {value} (target {bound})"
        _verdicts.append(line)
        print(line)
        assert ok, line
    return check


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for line in _verdicts:
            terminalreporter.write_line(line)
