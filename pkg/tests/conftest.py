import numpy as np
import pytest

from pdsnap.mesh import Mesh, box_tet_mesh, lumped_mass_matrix
from pdsnap.snapshots import SnapshotSet, center, mass_weight
from pdsnap.solver import load_config, simulate

ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    """Remember one acceptance line; printed again in the terminal summary."""
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)


def two_tets():
    """Two positively oriented tets sharing the face (1, 2, 3)."""
    v = np.array([
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 1.0],
    ])
    return Mesh(v, tets=[[0, 1, 2, 3], [4, 1, 3, 2]])


@pytest.fixture
def two_tet_mesh():
    return two_tets()


@pytest.fixture
def unit_tet():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    return Mesh(v, tets=[[0, 1, 2, 3]])


@pytest.fixture(scope="session")
def small_beam():
    """A coarse anchored beam and its weighted snapshots (fast, for unit tests)."""
    mesh = box_tet_mesh(8, 3, 3, size=(1.6, 0.6, 0.6))
    anchors = [int(i) for i in np.flatnonzero(mesh.vertices[:, 0] == 0)]
    cfg = load_config({
        "dt": 0.01, "iterations": 10, "density": 1000.0, "frames": 60, "stride": 1,
        "constraints": {"tet_strain": 2e4, "anchors": anchors},
    })
    mass = lumped_mass_matrix(mesh, cfg.density)
    frames = simulate(mesh, cfg)
    raw = center(SnapshotSet.from_frames(frames, np.arange(len(frames)) * cfg.dt))
    return {
        "mesh": mesh, "config": cfg, "mass": mass, "frames": frames,
        "centered": raw, "weighted": mass_weight(raw, mass),
    }
