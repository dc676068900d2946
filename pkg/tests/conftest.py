import numpy as np
import pytest

from goursat.forward import solve_state
from goursat.geometry import build_domain, quarter_disk_arcs, rectangle_arcs, staircase_arcs
from goursat.problem import builtin_problem


@pytest.fixture
def rectangle():
    return build_domain(rectangle_arcs(), (), 0.25)


@pytest.fixture
def quarter_disk():
    return build_domain(quarter_disk_arcs(), (), 1 / 16)


@pytest.fixture
def staircase():
    return build_domain(staircase_arcs(), (), 0.25)


def setup_builtin(name, h):
    """Domain, problem, default control and state for a built-in problem."""
    bp = builtin_problem(name)
    dom = build_domain(bp.arcs, bp.extra_vertices, h)
    S, T = dom.grid.mesh()
    u = bp.u0(S, T)
    return dom, bp, u, solve_state(dom, bp.problem, u=u)


def error_ratio(errors):
    errors = np.asarray(errors, float)
    return errors[:-1] / errors[1:]


ACCEPTANCE_LINES = []


def record_criterion(label, passed, detail):
    """Store one acceptance line; the full list is printed in the terminal summary."""
    line = f"{label}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
