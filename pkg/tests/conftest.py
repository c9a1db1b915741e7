import numpy as np
import pytest

from insulopt import flow

# every flow run finished during the session, with its invariant check outcome
AUDIT = []


def _audit(result):
    try:
        flow.assert_invariants(result)
        AUDIT.append((result.energy_defect, result.norm_defect, None))
    except AssertionError as exc:
        AUDIT.append((result.energy_defect, result.norm_defect, str(exc)))
        raise


@pytest.fixture(autouse=True, scope="session")
def invariant_audit():
    flow.RUN_HOOKS.append(_audit)
    yield AUDIT
    flow.RUN_HOOKS.remove(_audit)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_collection_modifyitems(config, items):
    # the invariant audit inspects every flow run of the session, so it goes last
    last = [it for it in items if it.get_closest_marker("session_last")]
    items[:] = [it for it in items if it not in last] + last


@pytest.fixture
def report(capsys):
    """Print one PASS/FAIL line (bypassing capture) and return the verdict."""

    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
        return ok

    return emit
