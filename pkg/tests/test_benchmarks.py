import json

import pytest

from sinkfuzz.benchmarks import TAGS, BenchmarkCase, get_case, suite_manifest, verify_ground_truth
from sinkfuzz.detection import FilterConfig, detect
from sinkfuzz.minij import SUPPORTED_CWES

CASES = suite_manifest()


def test_suite_shape():
    ids = [c.id for c in CASES]
    assert len(ids) == len(set(ids)) >= 12
    assert {c.cwe for c in CASES if not c.decoy} >= SUPPORTED_CWES
    assert sum(1 for c in CASES if c.decoy) == 3
    assert all(set(c.tags) <= TAGS for c in CASES)


@pytest.mark.parametrize("case", CASES, ids=lambda c: c.id)
def test_ground_truth_replays(case):
    result = verify_ground_truth(case)
    assert result, result.failures


@pytest.mark.parametrize("case", [c for c in CASES if c.decoy], ids=lambda c: c.id)
def test_decoy_dropped_at_documented_stage(case):
    from sinkfuzz.oracle import HeuristicOracle
    rep = detect(case.program, sorted(SUPPORTED_CWES), HeuristicOracle(),
                 FilterConfig(threshold=case.sink_threshold))
    decoy = next(s for s in rep.sites if s.id == case.decoy_site)
    dropped_at = next(stage for stage, decision, _ in decoy.verdicts if decision == "drop")
    assert dropped_at == case.decoy["stage"]
    assert case.sink_site in {s.id for s in rep.final}


def test_corrupted_exploit_fails_with_trace(jenkins):
    bad = jenkins.exploiting_input.replace(b"breakin", b"breakout")
    result = verify_ground_truth(jenkins, exploiting=bad)
    assert not result
    msg, = result.failures
    assert "does not trigger CWE-078" in msg
    assert "entered harness > doExecCommandUtils" in msg and "verdict ok" in msg


def test_reaching_input_must_not_violate(jenkins):
    result = verify_ground_truth(jenkins, reaching=jenkins.exploiting_input)
    assert "already violates" in result.failures[0]


def test_missing_reach_reported(jenkins):
    result = verify_ground_truth(jenkins, reaching=b"\n")
    assert "misses sink" in result.failures[0]


def test_unknown_case():
    with pytest.raises(KeyError):
        get_case("nope")


def test_case_loader_rejects_unknown_tags(tmp_path):
    src = get_case("sqli_login").directory
    raw = json.loads((src / "case.json").read_text())
    raw["tags"] = ["mystery"]
    (tmp_path / "case.json").write_text(json.dumps(raw))
    with pytest.raises(ValueError, match="unknown tags"):
        BenchmarkCase.load(tmp_path)
