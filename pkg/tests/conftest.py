"""Shared fixtures.

Every plan returned by ``fsearch`` anywhere in the session is recorded
together with the problem it solves, so the plan-soundness acceptance test
can re-check all of them once the rest of the suite has run.
"""

from __future__ import annotations

from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

import beliefprtl.fsearch as _fs
import beliefprtl.synth as _synth
from beliefprtl.scenario import load_scenario

DATA = Path(__file__).parent / "data"

PLAN_RECORD: list = []
ACCEPTANCE: dict[int, tuple[bool, str]] = {}

_original_fsearch = _fs.fsearch


def _recording_fsearch(sys, kripke, lasso, b0, box, cov_max, params, rng):
    out = _original_fsearch(sys, kripke, lasso, b0, box, cov_max, params, rng)
    if out.plan is not None:
        problem = SimpleNamespace(system=sys, b0=b0, params=params, kripke=lambda: kripke)
        PLAN_RECORD.append((out.plan, lasso, problem, kripke))
    return out


_fs.fsearch = _recording_fsearch
_synth.fsearch = _recording_fsearch


def pytest_collection_modifyitems(config, items):
    # tests marked "last" run after everything else
    last = [i for i in items if i.get_closest_marker("last")]
    rest = [i for i in items if not i.get_closest_marker("last")]
    items[:] = rest + last


def pytest_configure(config):
    config.addinivalue_line("markers", "last: run after every other test")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        tr.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def quad():
    return load_scenario("quadrotor_inspection")


@pytest.fixture(scope="session")
def quad_kripke(quad):
    return quad.kripke()


@pytest.fixture(scope="session")
def sensing():
    return load_scenario("sensing_1d")


@pytest.fixture(scope="session")
def sensing_kripke(sensing):
    return sensing.kripke()


@pytest.fixture(scope="session")
def one_way():
    return load_scenario(DATA / "one_way.json")


@pytest.fixture(scope="session")
def quad_result(quad, quad_kripke):
    return _synth.id_prtl(quad, kripke=quad_kripke)


@pytest.fixture(scope="session")
def sensing_result(sensing, sensing_kripke):
    return _synth.id_prtl(sensing, kripke=sensing_kripke)


@pytest.fixture(scope="session")
def one_way_result(one_way):
    return _synth.id_prtl(one_way)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
