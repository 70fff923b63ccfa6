import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="run the long training experiments (hours on one core)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow") or os.environ.get("NOISYOR_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="long experiment; pass --run-slow to enable")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = mark.args[0]
    detail = dict(item.user_properties).get("detail", "")
    if rep.when == "setup" and rep.skipped:
        _criteria[n] = ("SKIP", str(rep.longrepr[-1]) if isinstance(rep.longrepr, tuple) else "")
    elif rep.when == "call":
        _criteria[n] = ("PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, detail = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}".rstrip())
