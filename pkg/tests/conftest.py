from dataclasses import dataclass

import pytest

import mspduals.dual as dual_mod
from mspduals.model import MslpInstance, StageRealization
from mspduals.instances import InventoryConfig, make_inventory_instance, make_random_instance


def two_stage(b2=(1.0, 3.0), p=(0.5, 0.5), c2=None):
    """Stock bought now at cost 1; later a shortfall is bought at 3 and
    leftover stock costs 0.5. Optimal value 3.5 with the defaults."""
    # stage 0: buy - stock = 0
    st0 = (StageRealization([[1.0, -1.0]], None, [1.0, 0.0], [0.0], 1.0),)
    # stage 1: stock + buy - surplus = demand
    A1, B1 = [[1.0, -1.0]], [[0.0, 1.0]]
    reals = [StageRealization(A1, B1, [3.0, 0.5] if c2 is None else c2[j], [d], pj)
             for j, (d, pj) in enumerate(zip(b2, p))]
    return MslpInstance((st0, tuple(reals)))


def inventory(T=3, N=2, seed=0):
    return make_inventory_instance(InventoryConfig(T=T, N=N, seed=seed))


@pytest.fixture
def small_inventory():
    return inventory(3, 2, 0)


@pytest.fixture
def random_instances():
    return [make_random_instance(3, 3, s) for s in range(3)]


def check_dual_trace(trace, oracle=None):
    """Upper bounds never increase and never fall below the optimum."""
    ub = trace.ub
    assert all(b <= a + 1e-9 for a, b in zip(ub, ub[1:])), "dual upper bound increased"
    if oracle is not None:
        assert min(ub) >= oracle - 1e-7, "dual upper bound fell below the optimum"


# ---------------------------------------------------------------- acceptance reporting

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []

# every dual bound trace created during the session
DUAL_TRACES = []


@dataclass
class _RecordedTrace(dual_mod.DualTrace):
    def __post_init__(self):
        DUAL_TRACES.append(self)


@pytest.fixture(autouse=True, scope="session")
def _record_dual_traces():
    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(dual_mod, "DualTrace", _RecordedTrace)
        yield


def _increasing_traces():
    return [tr for tr in DUAL_TRACES if any(b > a + 1e-9 for a, b in zip(tr.ub, tr.ub[1:]))]


def pytest_sessionfinish(session, exitstatus):
    if DUAL_TRACES and _increasing_traces() and exitstatus == 0:
        session.exitstatus = pytest.ExitCode.TESTS_FAILED


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES and not DUAL_TRACES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
    if DUAL_TRACES:
        bad = _increasing_traces()
        verdict = "PASS" if not bad else "FAIL"
        terminalreporter.write_line(f"criterion 2 (suite-wide): {verdict} {len(DUAL_TRACES) - len(bad)}/"
                                    f"{len(DUAL_TRACES)} dual runs with nonincreasing upper bounds")
