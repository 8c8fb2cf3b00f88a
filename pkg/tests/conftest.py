import json
from importlib import resources

import numpy as np
import pytest

from topocem.action_space import build_action_catalog
from topocem.grid_topology import Element, Substation, grid_from_dict, load_grid
from topocem.power_flow import InjectionSet
from topocem.scenario import Scenario


def grid_doc():
    return json.loads(resources.files("topocem").joinpath("data/ieee14.json").read_text())


def grid_variant(charging=True, limits=None, setpoints=None):
    doc = grid_doc()
    for ln in doc["lines"]:
        if not charging:
            ln["b_pu"] = 0.0
        if limits is not None:
            ln["limit_a"] = float(limits[ln["id"]])
    if setpoints is not None:
        for g in doc["generators"]:
            g["v_pu"] = setpoints
    return grid_from_dict(doc)


def toy_substation(kinds):
    return Substation(0, "toy", "transmission",
                      tuple(Element(k, i, i) for i, k in enumerate(kinds)))


def constant_scenario(grid, steps, inj=None, sid="const"):
    inj = inj or InjectionSet.nominal(grid)
    rep = lambda v: np.tile(np.asarray(v, dtype=float), (steps, 1))
    return Scenario(sid, rep(inj.load_p), rep(inj.load_q), rep(inj.gen_p), rep(inj.gen_v))


@pytest.fixture(scope="session")
def grid():
    return load_grid()


@pytest.fixture(scope="session")
def catalog(grid):
    return build_action_catalog(grid)


_CRITERIA: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    _CRITERIA[marker[0]] = (status, marker[1])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = (mark.args[0], mark.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: (int(k.rstrip("abc")), k)):
        status, title = _CRITERIA[key]
        terminalreporter.write_line(f"criterion {key:<3} {status}  {title}")
