import numpy as np
import pytest

import qpat.forward as forward
from qpat.forward import Illumination
from qpat.mesh import generate_box_mesh

ENERGY_TOL = 1e-9
ENERGY_LOG = {"solves": 0, "worst": 0.0}
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
TABLES: list[str] = []


@pytest.fixture(autouse=True)
def energy_balance_guard(monkeypatch):
    """Check ``1'K phi = 1'f`` on every forward solve made by any test."""
    original = forward.solve_fluence

    def checked(factor, loads):
        phi = original(factor, loads)
        lhs = np.asarray(factor.matrix.sum(axis=0)).ravel() @ phi
        rhs = np.asarray(loads).sum(axis=0)
        for a, b in zip(np.atleast_1d(lhs), np.atleast_1d(rhs)):
            if b == 0:
                continue
            err = abs(a - b) / abs(b)
            ENERGY_LOG["solves"] += 1
            ENERGY_LOG["worst"] = max(ENERGY_LOG["worst"], err)
            assert err <= ENERGY_TOL, f"energy balance violated: relative error {err:.3e}"
        return phi

    monkeypatch.setattr(forward, "solve_fluence", checked)
    yield


@pytest.fixture
def record_criterion():
    def record(number: int, passed: bool, detail: str):
        ACCEPTANCE[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")

    return record


@pytest.fixture
def record_table():
    return TABLES.append


def pytest_terminal_summary(terminalreporter):
    if not (ACCEPTANCE or TABLES):
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        tr.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
    tr.write_line(f"energy balance checked on {ENERGY_LOG['solves']} solves, worst {ENERGY_LOG['worst']:.2e}")
    for table in TABLES:
        tr.write_line("")
        for line in table.splitlines():
            tr.write_line(line)


@pytest.fixture(scope="session")
def box3():
    return generate_box_mesh(3, 3, 3, extent=(3.0, 3.0, 3.0))


@pytest.fixture(scope="session")
def unit_cube():
    return generate_box_mesh(1, 1, 1)


@pytest.fixture
def two_faces():
    return [Illumination("face_characteristic", face="-z"), Illumination("face_characteristic", face="+x")]
