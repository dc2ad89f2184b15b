import pytest

from conftest import FIXTURES
from sinkfuzz.detection import FilterConfig, argument_class, detect, extract_sinks
from sinkfuzz.minij import SUPPORTED_CWES, load_program
from sinkfuzz.oracle import make_oracle
from sinkfuzz.oracle.replay import ReplayOracle
from sinkfuzz.sinks import UnknownCWE, check_cwes

ALL = sorted(SUPPORTED_CWES)


@pytest.fixture
def filter_program():
    return load_program(FIXTURES / "filter" / "program.mj")


def by_function(program, sites):
    return {program.source_map[s.id][0]: s for s in sites}


def test_extract_respects_cwe_selection(filter_program):
    exec_only = extract_sinks(filter_program, ["CWE-078"])
    assert {s.builtin for s in exec_only} == {"sys.exec"}
    assert len(extract_sinks(filter_program, ALL)) == 13
    assert [s.id for s in extract_sinks(filter_program, ALL)] == sorted(s.id for s in extract_sinks(filter_program, ALL))


def test_unknown_cwe_rejected():
    with pytest.raises(UnknownCWE):
        check_cwes(["CWE-999"])
    assert check_cwes(["CWE-089", "CWE-078", "CWE-078"]) == ["CWE-078", "CWE-089"]


@pytest.mark.parametrize("body,expected", [
    ('let c = "ls"; let o = sys.exec(c);', "constant"),
    ('let c = "ls" + " -la"; let o = sys.exec(trim(c));', "constant"),
    ('let c = "ls"; if (x) { c = consume_string(x, 4); } let o = sys.exec(c);', "variable"),
    ('let o = sys.exec(x);', "variable"),
    ('let o = sys.exec("ls " + g);', "variable"),
])
def test_argument_class(mj, body, expected):
    prog = mj("global g = \"\";\nfn harness(x) { " + body + " }")
    site, = extract_sinks(prog, ["CWE-078"])
    assert argument_class(prog, site) == expected == site.arg_class


def test_test_code_dropped(mj):
    prog = mj("fn harness(x) { runTest(x); run(x); }\n"
              "fn runTest(x) { let o = sys.exec(x); }\n"
              "fn run(x) { let o = sys.exec(x); }")
    rep = detect(prog, ALL)
    trails = {prog.source_map[s.id][0]: s.verdicts for s in rep.sites}
    assert trails["runTest"][0] == ("invalid", "drop", "test-code")
    assert [prog.source_map[s.id][0] for s in rep.final] == ["run"]


def test_threshold_skips_later_stages(filter_program):
    oracle = ReplayOracle([])
    rep = detect(filter_program, ALL, oracle, FilterConfig(threshold=20))
    assert rep.stages_run == ["invalid"]
    assert oracle.usage.calls == 0
    assert rep.counts["final"] == 12  # only the constant decoy goes


def test_oracle_failure_keeps_sinks(filter_program):
    oracle = ReplayOracle([])
    rep = detect(filter_program, ALL, oracle)
    assert rep.stages_run == list(("invalid", "unreachable", "unexploitable"))
    assert rep.counts["final"] == 11
    kept = by_function(filter_program, rep.final)
    assert kept["runTool"].verdicts[-2] == ("unexploitable", "keep", "oracle-error-keep")


def test_heuristic_oracle_drops_only_with_evidence(filter_program):
    rep = detect(filter_program, ALL, make_oracle("heuristic"))
    sites = by_function(filter_program, rep.sites)
    stage, decision, reason = sites["runTool"].verdicts[-2]
    assert (stage, decision) == ("unexploitable", "drop")
    assert reason.startswith("evidence: ") and "uptime" in reason
    assert rep.counts["final"] == 10


def test_drop_without_evidence_is_invalid():
    with pytest.raises(ValueError, match="evidence"):
        ReplayOracle([{"mode": "filter_exploitability", "response": {"decision": "drop"}}])


def test_report_serializes(filter_program):
    rep = detect(filter_program, ALL)
    doc = rep.to_dict()
    assert doc["counts"]["extracted"] == 13
    assert doc["final"] == [s.id for s in rep.final]
    assert rep.to_json().endswith("\n")
    assert all(t[-1][0] == "final" for t in rep.trails().values())


def test_threshold_must_be_positive():
    with pytest.raises(ValueError):
        FilterConfig(threshold=0)
