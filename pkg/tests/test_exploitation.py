import random

import pytest

from sinkfuzz.exploitation import (
    BeepStore, ExploitationAgent, beep_context, exploit_loop, generate_exploit, schedule_beep_seed,
    update_beep_seeds,
)
from sinkfuzz.fuzzer import BeepSeed, Channel, Fuzzer
from sinkfuzz.minij import execute
from sinkfuzz.oracle import HeuristicOracle, ReplayOracle
from sinkfuzz.oracle.types import EXPLOIT

PREFIX = b"x-evil-backdoor\nbreakin the law\n"


@pytest.fixture
def jenkins_beep(jenkins):
    fz = Fuzzer(jenkins.program, [jenkins.sink_site])
    fz.run_input(PREFIX + b"ls\n")
    return fz.beeps[0]


def scripted(*dsl):
    return ReplayOracle([{"mode": EXPLOIT, "response": d} for d in dsl])


def fake(sink, stack_site, data):
    return BeepSeed(data, (("harness", -1), ("f", stack_site)), sink, "CWE-078")


def test_groups_follow_stack_hash():
    a, b = fake(9, 1, b"a"), fake(9, 1, b"b")
    other = fake(9, 2, b"a")
    store = update_beep_seeds(BeepStore(), [a, b, a, other])
    assert len(store.groups) == 2
    assert [len(g.members) for g in store.groups.values()] == [2, 1]


def test_non_reproducing_beeps_quarantined(jenkins, jenkins_beep):
    stale = BeepSeed(b"nothing\n", jenkins_beep.stack_trace, jenkins_beep.sink_id, "CWE-078")
    store = update_beep_seeds(BeepStore(), [jenkins_beep, stale], jenkins.program)
    assert len(store) == 1
    assert store.quarantine == [(stale, "non-reproducing")]


def test_schedule_prefers_fewer_attempts():
    store = update_beep_seeds(BeepStore(max_schedule=2), [fake(9, 1, b"a"), fake(9, 2, b"b")])
    g1, g2 = sorted(store.groups.values(), key=lambda g: g.key)
    g1.schedule_count = 1
    group, _ = schedule_beep_seed(store, random.Random(0))
    assert group is g2


def test_member_choice_is_seeded():
    beeps = [fake(9, 1, bytes([i])) for i in range(3)]
    picks = []
    for _ in range(2):
        store = update_beep_seeds(BeepStore(), beeps)
        picks.append(schedule_beep_seed(store, random.Random(42))[1])
    assert picks[0] == picks[1]


def test_skip_sinks_hides_groups():
    store = update_beep_seeds(BeepStore(), [fake(9, 1, b"a")])
    assert schedule_beep_seed(store, random.Random(0), skip_sinks={9}) is None
    assert not store.pending(skip_sinks={9}) and store.pending()


def test_context_bundles_frames(jenkins, jenkins_beep):
    ctx = beep_context(jenkins.program, jenkins_beep)
    assert ctx["sink"]["builtin"] == "sys.exec" and ctx["sink"]["args"] == ["ls"]
    assert ctx["cwe"] == "CWE-078" and "jazze" in ctx["condition"]
    assert [f["function"] for f in ctx["frames"]] == ["harness", "doExecCommandUtils", "createUtils"]
    assert all(f["source"].startswith("fn ") for f in ctx["frames"])


def test_heuristic_rewrites_command(jenkins, jenkins_beep):
    res = generate_exploit(jenkins.program, jenkins_beep, HeuristicOracle())
    assert res.outcome == "exploited" and res.exploited_by == "agent"
    assert res.attempts == 1
    assert execute(jenkins.program, res.exploit_input).verdict.cwe == "CWE-078"
    assert res.candidates[-1].verdict["kind"] == "sanitizer_violation"


def test_scripted_refinements_third_attempt(jenkins, jenkins_beep):
    oracle = scripted('emit "x-evil-backdoor\\nbreakin the law\\nls -la\\n"',
                      'emit "x-evil-backdoor\\nbreakin the law\\njazz\\n"',
                      'emit "x-evil-backdoor\\nbreakin the law\\njazze\\n"')
    log = []
    res = generate_exploit(jenkins.program, jenkins_beep, oracle, log_records=log)
    assert res.outcome == "exploited" and res.attempts == 3
    assert [c.attempt for c in res.candidates] == [0, 1, 2]
    assert [r["verdict"]["kind"] for r in log] == ["ok", "ok", "sanitizer_violation"]
    assert set(log[0]) == {"group_key", "beep_hash", "attempt", "dsl_source", "verdict", "nocov_result"}


def test_input_independent_sink_fails_after_cap(mj):
    prog = mj('fn harness(d) { let s = consume_string(d, 8); if (s == "go") { run(); } }\n'
              'fn run() { let c = "ls"; let o = sys.exec(c + " -l"); }')
    site = next(s for s, c in prog.calls.items() if c.callee == "sys.exec")
    fz = Fuzzer(prog, [site])
    fz.run_input(b"go\n")
    oracle = HeuristicOracle()
    res = generate_exploit(prog, fz.beeps[0], oracle)
    assert res.outcome == "failed" and res.attempts == 30
    assert oracle.usage.calls == 30


def test_oracle_errors_consume_attempts(jenkins, jenkins_beep):
    oracle = scripted('emit_bytes "nothex"')
    res = generate_exploit(jenkins.program, jenkins_beep, oracle, max_attempts=3)
    assert res.attempts == 3 and res.candidates == [] and res.outcome == "failed"
    with pytest.raises(ValueError):
        generate_exploit(jenkins.program, jenkins_beep, oracle, max_attempts=31)


def test_near_miss_polished_by_nocov(jenkins, jenkins_beep):
    synced = []
    agent = ExploitationAgent(jenkins.program, scripted('emit "x-evil-backdoor\\nbreakin the law\\njazzq\\n"'),
                              max_attempts=1, sync=synced.extend)
    agent.receive([jenkins_beep])
    res = agent.step()
    assert res.outcome == "exploited" and res.exploited_by == "nocov"
    assert res.exploit_input.split(b"\n")[2].startswith(b"jazze")
    provenances = {p for _, p in synced}
    assert provenances == {"nocov", "exploitation_agent"}
    assert (res.exploit_input, "nocov") in synced


def test_nocov_runs_after_first_try_success(jenkins, jenkins_beep):
    agent = ExploitationAgent(jenkins.program, HeuristicOracle(), sync=lambda items: None)
    agent.receive([jenkins_beep])
    res = agent.step()
    assert res.exploited_by == "agent"
    assert agent.nocov_runs == 1 and res.nocov_executions >= 1
    assert agent.log[0]["nocov_result"]["found"] is True


def test_exploit_loop_drains_and_saturates(jenkins, jenkins_beep):
    agent = ExploitationAgent(jenkins.program, HeuristicOracle(), nocov_budget=None)
    assert list(exploit_loop(agent, Channel("beeps"))) == []
    inbound = Channel("beeps")
    inbound.send_all([jenkins_beep, jenkins_beep])
    outcomes = list(exploit_loop(agent, inbound))
    assert len(outcomes) == 1 and outcomes[0].outcome == "exploited"
    assert agent.nocov_runs == 0
