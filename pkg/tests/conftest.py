import numpy as np
import pytest

from rbdsde.noise import enumerate_tree, make_grid
from rbdsde.solver import definition_invariants, register_field_hook, unregister_field_hook


def pytest_configure(config):
    config.addinivalue_line("markers", "invalid_field: test builds SolutionFields that break the invariants on purpose")


class InvariantBreach(AssertionError):
    pass


def _enforce(field):
    bad = {k: v for k, (ok, v) in definition_invariants(field).items() if not ok}
    if bad:
        raise InvariantBreach(f"solution field violates {bad}")


@pytest.fixture(autouse=True)
def solution_invariants(request):
    """Every SolutionField built during a test must satisfy the discrete solution definition."""
    if request.node.get_closest_marker("invalid_field"):
        yield
        return
    register_field_hook(_enforce)
    try:
        yield
    finally:
        unregister_field_hook(_enforce)


@pytest.fixture(scope="session")
def tree4():
    return enumerate_tree(make_grid(1.0, 4))


@pytest.fixture(scope="session")
def tree2():
    return enumerate_tree(make_grid(1.0, 2))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_LINES: list = []


@pytest.fixture
def acceptance():
    """``acceptance(k, ok, detail)`` records and prints one PASS/FAIL line, then asserts ``ok``."""
    def report(k, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {k}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
