import pytest

from sinkfuzz.analysis import StaticAnalysis
from sinkfuzz.detection import extract_sinks
from sinkfuzz.exploration import ExplorationTask, ExploreConfig, explore_sink
from sinkfuzz.fuzzer import Channel
from sinkfuzz.oracle import HeuristicOracle, ReplayOracle
from sinkfuzz.oracle.types import EXPLORE


def setup(program, function):
    sinks = extract_sinks(program, ["CWE-078"])
    sink = next(s for s in sinks if s.enclosing_function == function)
    return sink, StaticAnalysis.run(program, sinks)


def scripted(*dsl):
    return ReplayOracle([{"mode": EXPLORE, "response": d} for d in dsl])


def test_sink_in_entry_reached_first_attempt(mj):
    prog = mj("fn harness(d) { let o = sys.exec(consume_string(d, 8)); }")
    sink, analysis = setup(prog, "harness")
    channel = Channel("in")
    state = explore_sink(prog, sink, analysis, HeuristicOracle(), channel)
    assert state.status == "reached" and state.attempts == 1
    assert channel.drain() == [(state.reached_input, "exploration_agent")]


def test_jenkins_reached_with_header_and_preimage(jenkins):
    sink, analysis = setup(jenkins.program, jenkins.sink["function"])
    state = explore_sink(jenkins.program, sink, analysis, HeuristicOracle())
    assert state.status == "reached"
    data = state.reached_input
    assert data.startswith(b"x-evil-backdoor\nbreakin the law\n")
    assert data.split(b"\n")[2]  # non-empty command


def test_dead_branch_exhausts_and_syncs_everything(mj):
    prog = mj('fn harness(d) { let s = consume_string(d, 8); if (1 == 2) { run(s); } }\n'
              'fn run(s) { let o = sys.exec(s); }')
    sink, analysis = setup(prog, "run")
    channel = Channel("in")
    state = explore_sink(prog, sink, analysis, HeuristicOracle(), channel)
    assert state.status == "exhausted" and state.reason == "iterations"
    assert state.attempts == 30
    assert channel.sent == len(state.generated) == 30


def test_unreachable_sink_has_no_path(mj):
    prog = mj("fn harness(d) { }\nfn lost(s) { let o = sys.exec(s); }")
    sink, analysis = setup(prog, "lost")
    oracle = HeuristicOracle()
    state = explore_sink(prog, sink, analysis, oracle)
    assert (state.status, state.reason) == ("exhausted", "no-path")
    assert oracle.usage.calls == 0


def test_errors_consume_attempts_with_feedback(jenkins):
    sink, analysis = setup(jenkins.program, jenkins.sink["function"])
    oracle = scripted('emit_bytes "zz"', {"no_progress": True},
                      'emit "x-evil-backdoor\\nbreakin the law\\nls\\n"')
    channel = Channel("in")
    log = []
    task = ExplorationTask(jenkins.program, sink, analysis, oracle, channel, log_records=log)
    task.step()
    assert "error" in task.state.feedback and channel.sent == 0
    task.step()
    assert "no progress" in task.state.feedback["error"]
    state = task.run()
    assert state.status == "reached" and state.attempts == 3
    assert channel.sent == 1
    assert [r["attempt"] for r in log] == [0, 1, 2]
    assert log[-1]["reached"] is True and log[-1]["bytes_b64"]


def test_feedback_reports_progress_along_path(jenkins):
    sink, analysis = setup(jenkins.program, jenkins.sink["function"])
    oracle = scripted('emit "x-evil-backdoor\\nwrong\\nls\\n"', 'emit "nothing\\n"')
    task = ExplorationTask(jenkins.program, sink, analysis, oracle, config=ExploreConfig(max_iterations=2))
    task.step()
    fb = task.state.feedback
    assert fb["path"] == list(task.state.path)
    # the hash gate in doExecCommandUtils stops the call to createUtils
    assert fb["deepest_index"] == 1
    hop, = [s for s, c in jenkins.program.calls.items() if c.callee == "createUtils"]
    assert fb["diverged_at"] == hop
    assert fb["verdict"]["kind"] == "ok"
    assert task.run().reason == "iterations"


def test_iteration_cap_validated():
    with pytest.raises(ValueError):
        ExploreConfig(max_iterations=31)
    with pytest.raises(ValueError):
        ExploreConfig(max_iterations=0)
