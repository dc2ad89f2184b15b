"""Runtime invariants checked on randomized instances.

Each suite draws at least 1,000 examples. The expected values come from
small independent models (prefix length via os.path.commonprefix, a
recursive op counter for the DSL, set semantics for the corpus), not from
the code under test.
"""

import hashlib
import json
import os
import random

from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from sinkfuzz.fuzzer import Corpus, FuzzConfig, Fuzzer
from sinkfuzz.minij import Limits, RULES, evaluate_sanitizer, execute, parse_program, stack_hash
from sinkfuzz.oracle.dsl import MAX_OPS, DSLError, render, run_generator

N = 1000
PROPS = settings(max_examples=N, deadline=None, derandomize=True,
                 suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])

# a program with several sinks, a loop, a state flag and ways to fail at runtime
MIXED = parse_program(r'''
global armed = false;

fn harness(data) {
    let rounds = 0;
    while (remaining(data) > 0 && rounds < 6) {
        let op = consume_string(data, 8);
        let arg = consume_string(data, 32);
        rounds = rounds + 1;
        if (op == "arm") {
            armed = true;
        } else if (op == "x") {
            exec(arg);
        } else if (op == "p") {
            let f = fs.open("/sandbox/" + arg);
        } else if (op == "q") {
            let r = sql.query("SELECT '" + arg + "'");
        } else if (op == "n") {
            let v = int(arg);
        } else if (op == "spin") {
            let i = 0;
            while (i < len(arg) * 50) { i = i + 1; }
        } else if (op == "d" && armed) {
            let o = deser.load(arg);
        }
    }
}

fn exec(cmd) {
    let out = sys.exec(cmd);
}
''')
SINKS = sorted(s for s, c in MIXED.calls.items() if c.callee in RULES)

ops = st.sampled_from(["arm", "x", "p", "q", "n", "spin", "d", "zz"])
args = st.one_of(
    st.sampled_from(["jazze", "jazze -c id", "ls", "../../etc/passwd", "a.txt", "x';--",
                     "12", "nan", "evil.Sentinel", "abc" * 5, ""]),
    st.text(alphabet="abjz.;'/-e", max_size=12),
)
programs_input = st.lists(st.tuples(ops, args), max_size=6).map(
    lambda pairs: "".join(f"{o}\n{a}\n" for o, a in pairs).encode())


@PROPS
@given(data=st.one_of(programs_input, st.binary(max_size=80)), steps=st.integers(1, 4000))
def test_sanitizer_precedence(data, steps):
    trace = execute(MIXED, data, Limits(steps=steps))
    fired = [h for h in trace.sink_hits
             if evaluate_sanitizer(RULES[h.builtin], [str(a) if a is not None else "" for a in h.args]).triggered]
    if fired:
        assert trace.verdict.kind == "sanitizer_violation"
        assert trace.verdict.site == fired[0].site
    if trace.verdict.kind == "sanitizer_violation":
        assert fired and fired[-1].triggered


@settings(max_examples=N, deadline=None, derandomize=True, suppress_health_check=list(HealthCheck))
@given(data=st.one_of(programs_input, st.binary(max_size=80)))
def test_beep_seed_reproducibility(data):
    fz = Fuzzer(MIXED, SINKS, FuzzConfig(step_budget=4000))
    fz.run_input(data)
    for beep in fz.beeps:
        replay = execute(MIXED, beep.input, Limits(steps=4000))
        stacks = {stack_hash(h.stack, h.site) for h in replay.sink_hits if h.site == beep.sink_id}
        assert beep.stack_hash in stacks


@PROPS
@given(items=st.lists(st.binary(max_size=40), max_size=30), max_input=st.integers(1, 32),
       dup_rate=st.floats(0, 1))
def test_corpus_dedup_and_size_clamp(items, max_input, dup_rate):
    rng = random.Random(len(items))
    stream = []
    for it in items:
        stream.append(it)
        if stream and rng.random() < dup_rate:
            stream.append(rng.choice(stream))
    corpus = Corpus(max_input)
    reasons = [corpus.add(x) for x in stream]

    admissible = [x for x in stream if len(x) <= max_input]
    assert sorted(e.data for e in corpus) == sorted(set(admissible))
    assert all(len(e.data) <= max_input for e in corpus)
    assert len({e.hash for e in corpus}) == len(corpus)
    assert all(e.hash == hashlib.sha256(e.data).hexdigest() for e in corpus)
    seen = set()
    for x, why in zip(stream, reasons):
        if len(x) > max_input:
            assert why == "size"
        elif x in seen:
            assert why == "duplicate"
        else:
            assert why is None
            seen.add(x)


# -- generator DSL ------------------------------------------------------------

leaf = st.one_of(
    st.text(alphabet="abc\n\"\\", max_size=6).map(lambda s: ("emit", s)),
    st.binary(max_size=4).map(lambda b: ("bytes", b)),
    st.integers(0, 2**32 - 1).map(lambda n: ("u32", n)),
    st.text(alphabet="xyz", max_size=4).map(lambda s: ("sha", s)),
)
tree = st.recursive(
    st.lists(leaf, max_size=3),
    lambda inner: st.lists(st.one_of(
        leaf,
        st.tuples(st.just("repeat"), st.integers(0, 120), inner),
        st.tuples(st.just("lp"), inner),
    ), max_size=3),
    max_leaves=12,
)


def _source(ops):
    lines = []
    for op in ops:
        kind = op[0]
        if kind == "emit":
            lines.append(f"emit {json.dumps(op[1])}")
        elif kind == "bytes":
            lines.append(f'emit_bytes "{op[1].hex()}"')
        elif kind == "u32":
            lines.append(f"emit_u32le {op[1]}")
        elif kind == "sha":
            lines.append(f"sha256hex_of {json.dumps(op[1])}")
        elif kind == "repeat":
            lines.append(f"repeat {op[1]} {{")
            lines += _source(op[2])
            lines.append("}")
        else:
            lines.append("len_prefixed {")
            lines += _source(op[1])
            lines.append("}")
    return lines


def _model(ops):
    """(operation count, output bytes) computed directly from the tree."""
    count, out = 0, b""
    for op in ops:
        count += 1
        kind = op[0]
        if kind == "emit":
            out += op[1].encode()
        elif kind == "bytes":
            out += op[1]
        elif kind == "u32":
            out += op[1].to_bytes(4, "little")
        elif kind == "sha":
            out += hashlib.sha256(op[1].encode()).hexdigest().encode()
        elif kind == "repeat":
            c, o = _model(op[2])
            count += op[1] * (1 + c)
            out += o * op[1]
        else:
            c, o = _model(op[1])
            count += c
            out += len(o).to_bytes(4, "little") + o
    return count, out


@PROPS
@given(ops=tree, max_size=st.integers(0, 4096))
def test_generator_dsl_bounds(ops, max_size):
    count, expected = _model(ops)
    source = render(["# generated"] + _source(ops))
    if count > MAX_OPS or len(expected) > max_size:
        try:
            out = run_generator(source, max_size=max_size)
        except DSLError:
            return
        raise AssertionError(f"accepted {count} ops / {len(out)} bytes")
    out = run_generator(source, max_size=max_size)
    assert out == expected
    assert len(out) <= max_size


# -- value profile ----------------------------------------------------------------

@PROPS
@given(target=st.text(alphabet="abcxyz-_", min_size=1, max_size=12),
       k=st.integers(0, 11), tail=st.text(alphabet="abcxyz", max_size=4))
def test_value_profile_monotonicity(target, k, tail):
    k = min(k, len(target) - 1)
    prog = parse_program(f'fn harness(d) {{ let s = consume_string(d, 64); if (s == "{target}") {{ return 1; }} }}')

    def score(candidate):
        trace = execute(prog, candidate.encode() + b"\n")
        (cid, s), = trace.value_profile_events
        assert s == len(os.path.commonprefix([candidate, target]))
        return s

    assert score(target[:k]) <= score(target[:k + 1])
    # whatever follows, a correct prefix of length k scores at least k
    assert score(target[:k] + tail) >= k
    assert score(target[:k + 1] + tail) >= k + 1
