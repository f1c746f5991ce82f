import numpy as np
import pytest

from shapefilter import fixtures
from shapefilter.mesh import SurfaceMesh, VolumeMesh


@pytest.fixture(scope="session")
def plate40():
    return fixtures.plate(40)


@pytest.fixture(scope="session")
def perforated():
    return fixtures.perforated_plate()


@pytest.fixture(scope="session")
def block4():
    return fixtures.notched_block(4)


@pytest.fixture(scope="session")
def ball3():
    return fixtures.ball(3)


@pytest.fixture(scope="session")
def sphere3():
    return fixtures.sphere(3)


@pytest.fixture
def unit_tet():
    nodes = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    return VolumeMesh(nodes, np.array([[0, 1, 2, 3]]))


@pytest.fixture
def unit_square():
    nodes = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
    return SurfaceMesh(nodes, np.array([[0, 1, 2], [0, 2, 3]]))


def unit_cube_tets():
    """Unit cube split into 6 Kuhn tets."""
    nodes = np.array([[(b >> 0) & 1, (b >> 1) & 1, (b >> 2) & 1] for b in range(8)], float)
    return VolumeMesh(nodes, fixtures._orient(nodes, fixtures._KUHN.copy()))


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Call with ``(label, ok, detail)``; the line is printed immediately and
    again in the terminal summary.
    """

    def record(label: str, ok: bool, detail: str = "") -> bool:
        line = f"{label}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        print(line)
        _ACCEPTANCE_LINES.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
