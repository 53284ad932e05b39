import numpy as np
import pytest

from hoannot.geometry import CameraModel, RigidTransform
from hoannot.hand_model import synthetic_model
from hoannot.synth import camera_ring


def look_at(center, target=(0.0, 0.0, 0.0), fx=1000.0, name="", up=(0.0, 0.0, 1.0)):
    """Camera at `center` looking at `target`, principal point (640, 512)."""
    c = np.asarray(center, dtype=float)
    z = np.asarray(target, dtype=float) - c
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-6:
        x = np.cross(z, (1.0, 0.0, 0.0))
    x /= np.linalg.norm(x)
    R = np.stack([x, np.cross(z, x), z])
    return CameraModel(fx, fx, 640.0, 512.0, RigidTransform(R, -R @ c), width=1280, height=1024, name=name)


@pytest.fixture(scope="session")
def ring():
    return camera_ring()


@pytest.fixture(scope="session")
def hand():
    return synthetic_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_fd(f, x, h=1e-6):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(np.asarray(a) - b) / max(np.linalg.norm(b), 1e-300)


# one line per acceptance criterion, printed after the test run
ACCEPTANCE = []


def record(number, name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number} ({name}): {detail}"
    ACCEPTANCE.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
