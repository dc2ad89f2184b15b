import json
from pathlib import Path

import pytest

from sinkfuzz.benchmarks import get_case
from sinkfuzz.minij import parse_program

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures():
    return FIXTURES


@pytest.fixture
def jenkins():
    return get_case("jenkins_backdoor")


@pytest.fixture
def mj():
    """Parse inline MiniJ source."""
    def parse(source, harness="harness"):
        return parse_program(source, harness=harness)
    return parse


def load_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def case_config(case, **overrides):
    from sinkfuzz.campaign import CampaignConfig
    from sinkfuzz.minij.catalog import SUPPORTED_CWES
    raw = dict(target=str(case.program_path), harness=case.harness, cwes=sorted(SUPPORTED_CWES),
               sink_threshold=case.sink_threshold)
    raw.update(overrides)
    return CampaignConfig(**raw)


# -- acceptance summary: one PASS/FAIL line per criterion ------------------------

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    number, title = marker.args
    _, ok = _criteria.get(number, (title, True))
    _criteria[number] = (title, ok and rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
