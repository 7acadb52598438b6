import socket
from importlib import resources

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scenemotion.body import default_skeleton
from scenemotion.scene import load_scene

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def no_network(monkeypatch):
    """Every test runs offline: opening an internet socket is an error."""

    def guard(*args, **kwargs):
        raise RuntimeError("network access attempted during tests")

    monkeypatch.setattr(socket.socket, "connect", guard)
    monkeypatch.setattr(socket, "create_connection", guard)


@pytest.fixture(scope="session")
def skel():
    return default_skeleton()


@pytest.fixture(scope="session")
def couch_room_path():
    return str(resources.files("scenemotion").joinpath("data/scenes/couch_room.json"))


@pytest.fixture(scope="session")
def couch_room(couch_room_path):
    return load_scene(couch_room_path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def record(request):
    """Log one acceptance line; printed again in the terminal summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def log(criterion, ok, detail):
        line = f"[acceptance {criterion:>2}] {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("]")[0].split()[-1])):
            terminalreporter.write_line(line)
