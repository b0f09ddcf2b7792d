import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mhdstab.mesh import Mesh, build_structured_tet_mesh

settings.register_profile(
    "default", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

CRITERIA = {}


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"[criterion {number:2d}] {'PASS' if passed else 'FAIL'}  {detail}"
    CRITERIA[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])


@pytest.fixture(scope="session")
def mesh1():
    return build_structured_tet_mesh(1)


@pytest.fixture(scope="session")
def mesh2():
    return build_structured_tet_mesh(2)


@pytest.fixture(scope="session")
def two_tet_mesh():
    verts = np.array(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.9, 0.8, 0.7]]
    )
    return Mesh(verts, np.array([[0, 1, 2, 3], [1, 2, 3, 4]]))
