import functools

import pytest

from tollmdp import mdp, solver

_acceptance = []


@functools.lru_cache(maxsize=None)
def _original():
    cfg = mdp.original_problem()
    model = mdp.build_truncated_model(cfg)
    return cfg, model, solver.policy_iteration(model)


@pytest.fixture(scope="session")
def original():
    """(ProblemConfig, truncated model, solve result) for the two-route base instance."""
    return _original()


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and report.when == "call":
        _acceptance.append(report)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for rep in _acceptance:
        name = rep.nodeid.split("::")[-1]
        status = "PASS" if rep.passed else "FAIL"
        terminalreporter.write_line(f"{status}  {name}")
