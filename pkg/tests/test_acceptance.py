"""Acceptance criteria, scaled to the shipped MiniJ suite.

Each test carries a ``criterion`` marker; conftest prints one PASS/FAIL
line per criterion at the end of the run. Expected values come from the
case ground truth, golden files, or brute-force models written here.
"""

import itertools
import json
import os
import random
import subprocess
import sys
import time
from types import SimpleNamespace

import pytest

from conftest import FIXTURES, case_config, load_json
from sinkfuzz.analysis import StaticAnalysis
from sinkfuzz.benchmarks import get_case, suite_manifest
from sinkfuzz.campaign import run_campaign
from sinkfuzz.detection import FilterConfig, detect
from sinkfuzz.exploitation import BeepStore, schedule_beep_seed, update_beep_seeds
from sinkfuzz.exploration import MAX_ITERATIONS, analyze_progress, explore_sink
from sinkfuzz.fuzzer import BeepSeed, Channel, Fuzzer, no_cov_fuzz
from sinkfuzz.minij import execute, load_program
from sinkfuzz.minij.catalog import SUPPORTED_CWES
from sinkfuzz.oracle import make_oracle
from sinkfuzz.oracle.replay import ReplayOracle
from sinkfuzz.oracle.types import EXPLORE, OracleResponse, UsageCounters

import test_properties as props

criterion = pytest.mark.criterion


# -- 1 -----------------------------------------------------------------------------

@criterion(1, "Jenkins backdoor: full exploits within 200k execs / 30 calls; fuzzer_only does not within 1M")
@pytest.mark.slow
def test_jenkins_end_to_end(jenkins):
    t0 = time.monotonic()
    full = run_campaign(case_config(jenkins, mode="full", budget_execs=200_000))
    elapsed = time.monotonic() - t0
    assert full.exploited() == {jenkins.sink_site}
    assert full.fuzz_executions <= 200_000
    assert full.oracle_usage["calls"] <= 30
    assert elapsed < 60

    baseline = run_campaign(case_config(jenkins, mode="fuzzer_only", budget_execs=1_000_000))
    assert baseline.exploited() == set()
    assert baseline.fuzz_executions >= 1_000_000
    assert baseline.stop_reason == "budget"


# -- 2 -----------------------------------------------------------------------------

@criterion(2, "last mile: fuzzer_only reached-only, full exploited (reached by fuzzer)")
@pytest.mark.slow
def test_last_mile():
    case = get_case("xxe_last_mile")
    site = case.sink_site
    fuzz = run_campaign(case_config(case, mode="fuzzer_only"))
    assert fuzz.records[site].status == "reached_only"

    full = run_campaign(case_config(case, mode="full"))
    rec = full.records[site]
    assert rec.status == "exploited"
    assert rec.reached["by"] == "fuzzer"
    assert rec.exploited["by"] in ("agent", "nocov")


# -- 3 -----------------------------------------------------------------------------

SENTINEL_LINE = b"jazze"


def _near_miss(rng, k):
    tail = bytearray(SENTINEL_LINE)
    for i in range(len(tail) - k, len(tail)):
        tail[i] = rng.choice([c for c in b"abcdefghijklmnopqrstuvwxyz" if c != tail[i]])
    return bytes(tail)


@criterion(3, "no-cov convergence: >=95% of 100 trials per k<=3 within 50k execs")
@pytest.mark.parametrize("k", [1, 2, 3])
def test_nocov_convergence(jenkins, k):
    program = jenkins.program
    site = jenkins.sink_site
    prefix = b"x-evil-backdoor\nbreakin the law\n"
    probe = Fuzzer(program, [site])
    probe.run_input(prefix + b"ls\n")
    beep, = probe.beeps
    assert beep.sink_id == site

    rng = random.Random(k)
    found = 0
    for trial in range(100):
        candidate = prefix + _near_miss(rng, k) + b"\n"
        assert not execute(program, candidate).violated
        result = no_cov_fuzz(program, beep, [candidate], 50_000, seed=trial)
        assert result.executions <= 50_000
        if result.found is not None:
            replay = execute(program, result.found)
            assert replay.violated and replay.verdict.site == site and replay.verdict.cwe == "CWE-078"
            found += 1
    assert found >= 95


# -- 4 -----------------------------------------------------------------------------

def _named_trails(program, report):
    return {program.source_map[s.id][0]: [list(v) for v in s.verdicts] for s in report.sites}


@criterion(4, "filter pipeline: golden verdict trails, decoys dropped at their stage, recall 100%")
def test_filter_golden_trails():
    program = load_program(FIXTURES / "filter" / "program.mj")
    golden = load_json(FIXTURES / "filter" / "golden_trails.json")
    oracle = ReplayOracle.load(FIXTURES / "filter" / "transcript.json")
    report = detect(program, sorted(SUPPORTED_CWES), oracle, FilterConfig(threshold=10))

    assert oracle.remaining == 0
    assert report.stages_run == golden["stages_run"]
    assert report.counts == golden["counts"]
    trails = _named_trails(program, report)
    assert trails == golden["trails"]
    assert trails["ping"][0][:2] == ["invalid", "drop"]
    assert trails["legacyExec"][-2][:2] == ["unreachable", "drop"]
    assert trails["runTool"][-2][:2] == ["unexploitable", "drop"]

    true_sinks = set(trails) - {"ping", "legacyExec", "runTool"}
    kept = {program.source_map[s.id][0] for s in report.final}
    assert kept == true_sinks and len(true_sinks) == 10


@criterion(4, "filter pipeline: golden verdict trails, decoys dropped at their stage, recall 100%")
def test_filter_fallback_golden():
    program = load_program(FIXTURES / "fallback" / "program.mj")
    golden = load_json(FIXTURES / "fallback" / "golden_trails.json")
    report = detect(program, sorted(SUPPORTED_CWES), None, FilterConfig(threshold=10))
    assert report.stages_run == golden["stages_run"]
    assert report.counts == golden["counts"]
    assert _named_trails(program, report) == golden["trails"]
    assert len(report.final) == 11


@criterion(4, "filter pipeline: golden verdict trails, decoys dropped at their stage, recall 100%")
@pytest.mark.parametrize("case_id", ["constant_decoy", "deadcode_decoy", "guarded_constant_decoy",
                                     "jenkins_backdoor", "sqli_login"])
def test_oracle_stage_skipped_below_threshold(case_id):
    case = get_case(case_id)
    oracle = ReplayOracle([])  # any call would raise
    report = detect(case.program, sorted(SUPPORTED_CWES), oracle, FilterConfig(threshold=10))
    assert len(report.final) <= 10
    assert "unexploitable" not in report.stages_run
    assert oracle.usage.calls == 0
    assert case.sink_site in {s.id for s in report.final}


# -- 5 -----------------------------------------------------------------------------

def _brute_deepest(path, entered):
    """Largest k with path[:k+1] a subsequence of entered, by enumerating index sets."""
    best = 0
    for k in range(1, len(path) + 1):
        if any([entered[i] for i in idx] == list(path[:k])
               for idx in itertools.combinations(range(len(entered)), k)):
            best = k - 1
    return best


@criterion(5, "exploration: analyze_progress vs brute force, seeds == attempts <= 30")
def test_analyze_progress_matches_brute_force():
    rng = random.Random(1)
    names = [f"f{i}" for i in range(7)]
    for _ in range(1000):
        path = tuple(rng.sample(names, rng.randint(1, 5)))
        entered = [rng.choice(names) for _ in range(rng.randint(0, 9))]
        if rng.random() < 0.5:  # plant a path prefix among the noise
            for name in path[:rng.randint(0, len(path))]:
                entered.insert(rng.randint(0, len(entered)), name)
            entered = entered[:10]
        sites = list(range(100, 100 + len(path)))
        trace = SimpleNamespace(entered_functions=[(n, rng.randint(0, 50)) for n in entered])
        report = analyze_progress(trace, path, sites)
        expected = _brute_deepest(path, entered)
        assert report.deepest_index == expected, (path, entered)
        assert report.diverged_at == sites[expected]


class _LoopingOracle:
    """Always answers with the same generator."""

    name = "looping"

    def __init__(self, dsl):
        self.dsl = dsl
        self.usage = UsageCounters()

    def ask(self, request):
        self.usage.count(request.mode)
        return OracleResponse(EXPLORE, dsl=self.dsl)


def _explore(case, oracle):
    program = case.program
    rep = detect(program, sorted(SUPPORTED_CWES), None, FilterConfig(threshold=case.sink_threshold))
    sink = next(s for s in rep.final if s.id == case.sink_site)
    channel = Channel("corpus")
    state = explore_sink(program, sink, StaticAnalysis.run(program, rep.final), oracle, channel)
    return state, channel


@criterion(5, "exploration: analyze_progress vs brute force, seeds == attempts <= 30")
@pytest.mark.parametrize("case_id", [c.id for c in suite_manifest()])
def test_explore_sink_pushes_every_attempt(case_id):
    case = get_case(case_id)
    state, channel = _explore(case, make_oracle("heuristic"))
    assert 1 <= state.attempts <= MAX_ITERATIONS
    assert channel.sent == len(state.generated) == len(channel.drain())


@criterion(5, "exploration: analyze_progress vs brute force, seeds == attempts <= 30")
def test_explore_sink_stops_at_thirty(jenkins):
    oracle = _LoopingOracle('emit "nope\\n"\n')
    state, channel = _explore(jenkins, oracle)
    assert state.status == "exhausted" and state.reason == "iterations"
    assert state.attempts == MAX_ITERATIONS == oracle.usage.calls
    assert channel.sent == MAX_ITERATIONS
    assert [d for d, _ in channel.drain()] == [b"nope\n"] * MAX_ITERATIONS


# -- 6 -----------------------------------------------------------------------------

def _beep(sink, stack, data):
    return BeepSeed(data, tuple(stack), sink, "CWE-078")


@criterion(6, "exploitation scheduling: fairness over 10k rounds, limit 1, dedup key")
def test_schedule_fairness_10k_rounds():
    rng = random.Random(6)
    store = BeepStore(max_schedule=10**9)
    beeps = [_beep(9, [("f", g)], bytes([g, m])) for g in range(37) for m in range(rng.randint(1, 4))]
    update_beep_seeds(store, beeps)
    assert len(store.groups) == 37
    for _ in range(10_000):
        group, beep = schedule_beep_seed(store, rng)
        assert beep in group.members
        counts = [g.schedule_count for g in store.groups.values() if not g.saturated]
        assert max(counts) - min(counts) <= 1


@criterion(6, "exploitation scheduling: fairness over 10k rounds, limit 1, dedup key")
def test_schedule_saturates_at_one():
    store = update_beep_seeds(BeepStore(), [_beep(9, [("f", g)], b"x%d" % g) for g in range(5)])
    assert store.max_schedule == 1
    picked = [schedule_beep_seed(store, random.Random(0))[0].key for _ in range(5)]
    assert sorted(picked) == picked and len(set(picked)) == 5
    assert schedule_beep_seed(store, random.Random(0)) is None
    assert all(g.schedule_count == 1 for g in store.groups.values())


@criterion(6, "exploitation scheduling: fairness over 10k rounds, limit 1, dedup key")
def test_beep_dedup_under_duplicate_delivery():
    rng = random.Random(3)
    unique = [_beep(s, [("f", t)], bytes([b])) for s in (4, 9) for t in (1, 2) for b in range(3)]
    # same bytes, same sink, different stack: distinct keys, distinct groups
    stream = unique + [rng.choice(unique) for _ in range(200)]
    rng.shuffle(stream)
    store = update_beep_seeds(BeepStore(), stream)
    assert len(store) == len(unique) == len({b.key() for b in unique})
    assert len(store.groups) == 4
    for g in store.groups.values():
        assert len(g.members) == 3
        assert {m.stack_hash for m in g.members} == {g.key}


# -- 7 -----------------------------------------------------------------------------

DETERMINISM = [("jenkins_backdoor", "full"), ("synergy_checksum", "full"),
               ("path_traversal_zip", "fuzzer_only")]


def _transcript(case_id):
    path = FIXTURES / "determinism" / f"{case_id}.json"
    return path if path.exists() else None


@criterion(7, "determinism: byte-identical report.json across runs")
@pytest.mark.parametrize("case_id,mode", DETERMINISM)
def test_report_bytes_identical(tmp_path, case_id, mode):
    case = get_case(case_id)
    outputs = []
    for run in ("a", "b"):
        transcript = _transcript(case_id)
        oracle = ReplayOracle.load(transcript) if transcript else ReplayOracle([])
        cfg = case_config(case, mode=mode, seed=7, budget_execs=20_000, output_dir=str(tmp_path / run))
        report = run_campaign(cfg, oracle=oracle)
        outputs.append((tmp_path / run / "report.json").read_bytes())
        assert report.stop_reason in ("all-exploited", "budget")
    assert outputs[0] == outputs[1]
    doc = json.loads(outputs[0])
    assert "output_dir" not in json.dumps(doc["config"])
    assert not any("time" in key for key in doc)


@criterion(7, "determinism: byte-identical report.json across runs")
@pytest.mark.slow
def test_report_bytes_identical_across_processes(tmp_path):
    transcript = _transcript("synergy_checksum")
    outputs = []
    for hashseed in ("1", "4242"):
        out = tmp_path / hashseed
        env = dict(os.environ, PYTHONHASHSEED=hashseed)
        subprocess.run([sys.executable, "-m", "sinkfuzz.cli", "campaign", "run", "--case", "synergy_checksum",
                        "--oracle", f"replay:{transcript}", "--seed", "7", "--budget-execs", "20000",
                        "--out", str(out)], check=True, env=env, capture_output=True)
        outputs.append((out / "report.json").read_bytes())
    assert outputs[0] == outputs[1]


# -- 8 -----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def suite_results():
    results = {}
    for case in suite_manifest():
        for mode in ("full", "agents_only", "fuzzer_only"):
            results[case.id, mode] = run_campaign(case_config(case, mode=mode)).exploited()
    return results


@criterion(8, "synergy containment: full covers agents_only and fuzzer_only; synergy case full-only")
@pytest.mark.slow
def test_containment(suite_results):
    for case in suite_manifest():
        full = suite_results[case.id, "full"]
        others = suite_results[case.id, "agents_only"] | suite_results[case.id, "fuzzer_only"]
        assert full >= others, case.id


@criterion(8, "synergy containment: full covers agents_only and fuzzer_only; synergy case full-only")
@pytest.mark.slow
def test_synergy_only_in_full(suite_results):
    case = get_case("synergy_checksum")
    assert suite_results[case.id, "full"] == {case.sink_site}
    assert suite_results[case.id, "agents_only"] == set()
    assert suite_results[case.id, "fuzzer_only"] == set()
    partial = run_campaign(case_config(case, mode="reachability_only"))
    assert case.sink_site not in partial.exploited()


# -- 9 -----------------------------------------------------------------------------

@criterion(9, "runtime invariants: five property suites, 1000 examples each")
@pytest.mark.parametrize("suite", [
    props.test_sanitizer_precedence,
    props.test_beep_seed_reproducibility,
    props.test_corpus_dedup_and_size_clamp,
    props.test_generator_dsl_bounds,
    props.test_value_profile_monotonicity,
], ids=lambda f: f.__name__.removeprefix("test_"))
def test_property_suite(suite):
    assert props.N >= 1000
    suite()
