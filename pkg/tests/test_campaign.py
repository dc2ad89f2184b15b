import json

import pytest

from conftest import case_config
from sinkfuzz.benchmarks import get_case
from sinkfuzz.campaign import (
    MODES, CampaignConfig, ConfigError, ablation_modes, canonical_mode, run_campaign,
)
from sinkfuzz.oracle import HeuristicOracle
from sinkfuzz.oracle.types import EXPLORE


def test_aliases_and_toggles():
    assert canonical_mode("af") == "agents_only"
    assert canonical_mode("nope") is None
    cfg = ablation_modes(CampaignConfig("t.mj", ("CWE-078",), mode="ro"))
    assert (cfg.mode, cfg.fuzzer, cfg.exploration, cfg.exploitation) == ("reachability_only", True, True, False)
    assert set(MODES) == {"full", "reachability_only", "exploitation_only", "agents_only", "fuzzer_only"}


@pytest.mark.parametrize("raw,match", [
    ({"target": "t", "cwes": ["CWE-078"], "budget": 5}, "unknown config key"),
    ({"target": "t", "cwes": ["CWE-078"], "mode": "turbo"}, "unknown mode"),
    ({"target": "t", "cwes": ["CWE-078"], "workers": 0}, "positive"),
    ({"target": "t", "cwes": ["CWE-078"], "exploit_attempts": 31}, "at most 30"),
    ({"target": "t", "cwes": ["CWE-078"], "wall_clock": -1}, "positive"),
])
def test_config_rejects(raw, match):
    with pytest.raises(ConfigError, match=match):
        CampaignConfig.from_dict(raw)


def test_config_from_dict_and_public():
    cfg = CampaignConfig.from_dict({"target": "t", "cwes": "CWE-078,CWE-089", "output_dir": "/tmp/x"})
    assert cfg.cwes == ("CWE-078", "CWE-089")
    assert "output_dir" not in cfg.public()


def test_missing_target_is_config_error():
    with pytest.raises(ConfigError, match="cannot load"):
        run_campaign(CampaignConfig("/nonexistent.mj", ("CWE-078",)))


def test_fuzzer_only_never_asks_the_oracle(jenkins):
    oracle = HeuristicOracle()
    rep = run_campaign(case_config(jenkins, mode="fuzzer_only", budget_execs=3000), oracle=oracle)
    assert oracle.usage.calls == 0
    assert rep.stop_reason == "budget" and rep.fuzz_executions == 3000


def test_agents_only_stops_when_idle(jenkins):
    rep = run_campaign(case_config(jenkins, mode="agents_only"))
    assert rep.fuzz_executions == 0
    assert rep.exploited() == {jenkins.sink_site}
    assert rep.stop_reason == "all-exploited"
    assert rep.records[jenkins.sink_site].exploited["by"] == "agent"
    xxe = get_case("xxe_last_mile")
    stuck = run_campaign(case_config(xxe, mode="agents_only"))
    assert stuck.stop_reason == "agents-idle" and stuck.nocov_executions == 0


def test_report_partition_and_lifecycle():
    case = get_case("constant_decoy")
    rep = run_campaign(case_config(case, mode="full", budget_execs=20_000))
    doc = rep.to_dict()
    retained = [s for s in doc["sinks"] if s["retained"]]
    assert sum(doc["aggregates"].values()) == len(retained)
    assert {s["status"] for s in doc["sinks"] if not s["retained"]} == {"filtered"}
    for s in retained:
        if s["exploited"]:
            assert s["reached"] and s["reached"]["tick"] <= s["exploited"]["tick"]
    assert doc["version"] == 1


def test_artifacts_written(tmp_path, jenkins):
    run_campaign(case_config(jenkins, mode="full", output_dir=str(tmp_path)))
    for name in ("report.json", "detection.json", "trails.json", "corpus_manifest.json",
                 "violations_index.json", "beeps.jsonl", "drained_beeps.jsonl",
                 "exploration.jsonl", "exploitation.jsonl"):
        assert (tmp_path / name).exists(), name
    report = json.loads((tmp_path / "report.json").read_text())
    assert str(tmp_path) not in json.dumps(report)
    assert any((tmp_path / "violations").iterdir())
    first = json.loads((tmp_path / "exploration.jsonl").read_text().splitlines()[0])
    assert {"sink_id", "attempt", "dsl_source", "bytes_b64", "reached", "deepest_index"} <= set(first)


def test_no_sinks(mj):
    prog = mj("fn harness(d) { let s = consume_string(d, 4); }")
    rep = run_campaign(CampaignConfig("<memory>", ("CWE-078",)), program=prog)
    assert rep.stop_reason == "no-sinks" and rep.aggregates() == {"not_reached": 0, "reached_only": 0,
                                                                    "exploited": 0}


class _Interrupting:
    def __init__(self):
        self.usage = HeuristicOracle().usage
        self.inner = HeuristicOracle()

    def ask(self, request):
        if request.mode == EXPLORE and request.attempt == 1:
            raise KeyboardInterrupt
        return self.inner.ask(request)


def test_interrupt_yields_partial_report(tmp_path):
    case = get_case("synergy_checksum")
    rep = run_campaign(case_config(case, mode="full", budget_execs=50_000, output_dir=str(tmp_path)),
                       oracle=_Interrupting())
    assert rep.partial and rep.stop_reason == "interrupted"
    assert json.loads((tmp_path / "report.json").read_text())["partial"] is True


class _Broken:
    def __init__(self):
        self.usage = HeuristicOracle().usage

    def ask(self, request):
        raise TypeError("backend bug")


def test_component_crash_becomes_failure_record(jenkins):
    rep = run_campaign(case_config(jenkins, mode="agents_only"), oracle=_Broken())
    assert rep.failures and rep.failures[0]["component"] == "exploration"
    assert "backend bug" in rep.failures[0]["error"]
    assert rep.stop_reason == "agents-idle"


def test_wall_clock_overlay(jenkins):
    rep = run_campaign(case_config(jenkins, mode="fuzzer_only", budget_execs=10**9, wall_clock=0.2))
    assert rep.stop_reason == "wall-clock"


def test_workers_share_budget(jenkins):
    rep = run_campaign(case_config(jenkins, mode="fuzzer_only", budget_execs=4500, workers=3,
                                   reload_interval=1000))
    assert rep.fuzz_executions == 4500
