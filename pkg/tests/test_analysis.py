import pytest

from sinkfuzz.analysis import (
    CallPath, StaticAnalysis, build_callgraph, enumerate_paths, select_call_path, taint_analyze,
)
from sinkfuzz.detection import extract_sinks

CHAIN = r'''
fn harness(d) {
    let h = consume_string(d, 16);
    if (h == "go") { mid(consume_string(d, 32)); }
    short(d);
}
fn mid(v) { deep(v); }
fn deep(v) { let o = sys.exec(v); }
fn short(d) { let o = sys.exec("uptime"); deep("fixed"); }
fn orphan(v) { let o = sys.exec(v); }
'''


@pytest.fixture
def chain(mj):
    return mj(CHAIN)


def sink_in(program, function):
    return next(s for s in extract_sinks(program, ["CWE-078"]) if s.enclosing_function == function)


def test_callgraph_direct_edges(chain):
    cg = build_callgraph(chain)
    assert cg.entry == "harness"
    assert cg.successors("harness") == ["mid", "short"]
    assert cg.has_edge("short", "deep", "direct")
    assert "orphan" not in cg.reachable()
    assert cg.reachable("nope") == set()


def test_indirect_calls_get_approximate_edges(mj):
    prog = mj("fn harness(d) { let f = a; f(d); }\nfn a(x) { }\nfn b(x) { }")
    cg = build_callgraph(prog)
    assert cg.has_edge("harness", "a", "approximate")
    assert not cg.has_edge("harness", "b")
    bare = build_callgraph(mj("fn harness(d, f) { f(d); }"))
    assert bare.unresolved_sites


def test_paths_shortest_first_and_acyclic(chain):
    cg = build_callgraph(chain)
    paths = enumerate_paths(cg, sink_in(chain, "deep"), program=chain)
    assert [p.functions for p in paths] == [("harness", "mid", "deep"), ("harness", "short", "deep")]
    assert all(len(set(p.functions)) == len(p.functions) for p in paths)
    assert enumerate_paths(cg, sink_in(chain, "orphan")) == []
    with pytest.raises(ValueError):
        enumerate_paths(cg, sink_in(chain, "deep"), limit=0)


def test_select_prefers_taint_evidence(chain):
    cg = build_callgraph(chain)
    paths = enumerate_paths(cg, sink_in(chain, "deep"), program=chain)
    evidence = {p.functions: p.taint_evidence for p in paths}
    assert evidence[("harness", "mid", "deep")] is True
    assert evidence[("harness", "short", "deep")] is False
    assert select_call_path(paths).functions == ("harness", "mid", "deep")
    # without evidence the tie breaks on name order
    plain = [CallPath(p.functions, p.sink) for p in paths]
    assert select_call_path(reversed(plain)).functions == ("harness", "mid", "deep")
    with pytest.raises(ValueError):
        select_call_path([])


def test_taint_reaches_sink_argument(chain):
    sinks = extract_sinks(chain, ["CWE-078"])
    result = taint_analyze(chain, build_callgraph(chain), sinks)
    by_fn = {s.enclosing_function: result.sink_tainted.get(s.id) for s in sinks}
    assert by_fn["deep"] is True
    assert by_fn["short"] is False
    assert result.is_tainted("mid", "v")


def test_path_context_records_guards_and_literals(chain):
    analysis = StaticAnalysis.run(chain, extract_sinks(chain, ["CWE-078"]))
    path = select_call_path(analysis.paths(sink_in(chain, "deep")))
    ctx = analysis.context(path)
    fns = ctx["functions"]
    assert [f["name"] for f in fns] == ["harness", "mid", "deep"]
    assert "go" in str(fns[0])
    assert fns[0]["next_hop_site"] is not None


def test_jenkins_context_mentions_hash_gate(jenkins):
    prog = jenkins.program
    analysis = StaticAnalysis.run(prog, extract_sinks(prog, ["CWE-078"]))
    sink = sink_in(prog, jenkins.sink["function"])
    ctx = analysis.context(select_call_path(analysis.paths(sink)))
    text = str(ctx)
    assert "x-evil-backdoor" in text
    assert "sha256" in text
