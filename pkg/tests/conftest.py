import numpy as np
import pytest
from hypothesis import settings

from moespnet.data import SceneSpec, generate_dataset, load_split

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    generate_dataset(root, SceneSpec(seed=3), n_train=16, n_val=4)
    return root


@pytest.fixture(scope="session")
def tiny_splits(tiny_dataset):
    return load_split(tiny_dataset, "train"), load_split(tiny_dataset, "val")


# -- acceptance report -------------------------------------------------------
# Tests marked ``@pytest.mark.criterion(n, "title")`` roll up into one PASS/FAIL
# line per criterion at the end of the run.  A criterion passes only if every
# test carrying its number passed; an expected failure counts as FAIL.

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        n, title = mark.args
        entry = _criteria.setdefault(n, {"title": title, "ok": True, "notes": []})
        passed = rep.outcome == "passed" and not hasattr(rep, "wasxfail")
        entry["ok"] &= passed
        notes = [str(v) for k, v in item.user_properties if k == "detail"]
        if not passed:
            notes.append(f"{item.name} {'xfail' if hasattr(rep, 'wasxfail') else rep.outcome}")
        entry["notes"] += notes


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        line = f"criterion {n:2d} {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
        if e["notes"]:
            line += "  [" + "; ".join(e["notes"]) + "]"
        terminalreporter.write_line(line)
