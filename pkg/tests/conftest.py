from __future__ import annotations

import pytest

from layerhom.cell_flow import assemble_effective_tensors, solve_all_cell_problems
from layerhom.geometry import Box, Cylinder, MicrostructureSpec, build_cell


@pytest.fixture(scope="session")
def empty_cell():
    return build_cell(MicrostructureSpec(8))


@pytest.fixture(scope="session")
def cylinder_cell():
    return build_cell(MicrostructureSpec(16, (Cylinder((0.5, 0.5, 0.0), 0.3, 1.2),)))


@pytest.fixture(scope="session")
def slab_cell():
    return build_cell(MicrostructureSpec(8, (Box((0.0, 0.0, -0.25), (1.0, 1.0, 0.25)),), clearance_check=False))


@pytest.fixture(scope="session")
def empty_solutions(empty_cell):
    return solve_all_cell_problems(empty_cell)


@pytest.fixture(scope="session")
def cylinder_solutions(cylinder_cell):
    return solve_all_cell_problems(cylinder_cell)


@pytest.fixture(scope="session")
def cylinder_tensors(cylinder_cell, cylinder_solutions):
    return assemble_effective_tensors(cylinder_solutions, cylinder_cell)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
