import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gridlift.engine import make_rng
from gridlift.sgt import h36m_skeleton

settings.register_profile("gridlift", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("gridlift")


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture(scope="session")
def topology():
    return h36m_skeleton()


def fd_check(loss_fn, array, analytic, h=1e-5):
    """Relative error of ``analytic`` against a full central-difference gradient."""
    from gridlift.oracles import numeric_gradient
    from gridlift.verify import relative_error_floor

    return relative_error_floor(analytic, numeric_gradient(loss_fn, array, h))


@pytest.fixture
def fd():
    return fd_check


def random_grid(rng, *shape):
    return np.asarray(rng.normal(size=shape))


_ACCEPTANCE: dict[int, list] = {}


@pytest.fixture(scope="session")
def acceptance():
    """Record one verdict per acceptance criterion; a criterion passes only if all its parts pass."""

    def record(criterion: int, passed: bool, detail: str):
        _ACCEPTANCE.setdefault(criterion, []).append((bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_ACCEPTANCE):
        parts = _ACCEPTANCE[criterion]
        status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        terminalreporter.write_line(f"criterion {criterion:>2}: {status}  " + "; ".join(d for _, d in parts))
