"""Instrumented tree-walking interpreter for MiniJ.

``execute`` runs a program's harness on one input and returns an
:class:`ExecutionTrace` with AFL-style edge coverage, value-profile events for
string/integer comparisons, every sink invocation (with argument snapshot and
stack), and a verdict. Sanitizers are evaluated at each sink call; the first
violation aborts the run, as a sanitizer exception would on the JVM.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from typing import Optional

from . import ast as A
from . import regex as _regex
from .catalog import lookup
from .errors import MiniJRuntimeError
from .sanitizers import RULES, SandboxState, declared_class, evaluate_sanitizer, normalize_path

DEFAULT_STEP_BUDGET = 200_000
MAX_INPUT_SIZE = 1 << 20
MAX_SINK_HITS = 256
MAX_ENTERED = 10_000
MAX_VP_EVENTS = 4096
MAX_CMP_OPERANDS = 64
MAP_SIZE = 1 << 16

if sys.getrecursionlimit() < 12000:
    sys.setrecursionlimit(12000)

VERDICT_RANK = {"sanitizer_violation": 3, "runtime_error": 2, "timeout": 1, "ok": 0}


@dataclass(frozen=True)
class Limits:
    steps: int = DEFAULT_STEP_BUDGET
    max_alloc: int = 4 * MAX_INPUT_SIZE
    max_depth: int = 64
    max_input: int = MAX_INPUT_SIZE


@dataclass(frozen=True)
class Verdict:
    kind: str = "ok"
    cwe: Optional[str] = None
    detail: str = ""
    site: Optional[int] = None

    def outranks(self, other: "Verdict") -> bool:
        return VERDICT_RANK[self.kind] > VERDICT_RANK[other.kind]

    def to_dict(self):
        return {"kind": self.kind, "cwe": self.cwe, "detail": self.detail, "site": self.site}


@dataclass(frozen=True)
class SinkHit:
    site: int
    builtin: str
    cwe: str
    args: tuple
    stack: tuple  # ((function, calling site or -1), ...) bottom to top
    triggered: bool = False

    def stack_hash(self) -> str:
        return stack_hash(self.stack, self.site)


def stack_hash(stack, site) -> str:
    blob = json.dumps([[list(f) for f in stack], site], separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ExecutionTrace:
    entered_functions: list = field(default_factory=list)
    sink_hits: list = field(default_factory=list)
    verdict: Verdict = field(default_factory=Verdict)
    coverage_delta: frozenset = frozenset()
    edge_counts: dict = field(default_factory=dict)
    value_profile_events: list = field(default_factory=list)
    cmp_operands: list = field(default_factory=list)
    breakpoints: dict = field(default_factory=dict)
    steps: int = 0

    @property
    def violated(self) -> bool:
        return self.verdict.kind == "sanitizer_violation"

    def hit_sites(self) -> set:
        return {h.site for h in self.sink_hits}

    def first_hit(self, site: int) -> Optional[SinkHit]:
        for h in self.sink_hits:
            if h.site == site:
                return h
        return None

    def to_dict(self):
        return {
            "entered_functions": [list(e) for e in self.entered_functions],
            "sink_hits": [
                {"site": h.site, "builtin": h.builtin, "cwe": h.cwe, "args": list(h.args),
                 "stack": [list(f) for f in h.stack], "triggered": h.triggered}
                for h in self.sink_hits
            ],
            "verdict": self.verdict.to_dict(),
            "coverage": sorted(self.coverage_delta),
            "edge_counts": sorted(self.edge_counts.items()),
            "value_profile_events": [list(e) for e in self.value_profile_events],
            "breakpoints": sorted(self.breakpoints.items()),
            "steps": self.steps,
        }


class InputStream:
    """Byte cursor handed to the harness; mirrors a fuzzed-data provider."""

    __slots__ = ("data", "pos")

    def __init__(self, data: str):
        self.data = data
        self.pos = 0

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def take(self, n: int) -> str:
        n = max(0, min(n, len(self.data) - self.pos))
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def take_line(self, limit: int) -> str:
        if limit <= 0:
            return ""
        end = min(len(self.data), self.pos + limit)
        nl = self.data.find("\n", self.pos, end)
        if nl >= 0:
            out = self.data[self.pos:nl]
            self.pos = nl + 1
        else:
            out = self.data[self.pos:end]
            self.pos = end
        return out


@dataclass(frozen=True)
class FuncValue:
    name: str


class _Timeout(Exception):
    pass


class _Violation(Exception):
    def __init__(self, verdict: Verdict):
        self.verdict = verdict


# control-flow signals returned by statement execution
_BREAK = object()
_CONTINUE = object()


class _Return:
    __slots__ = ("value",)

    def __init__(self, value):
        self.value = value


def common_prefix(a: str, b: str) -> int:
    n = min(len(a), len(b))
    i = 0
    while i < n and a[i] == b[i]:
        i += 1
    return i


def _int_bytes(v: int) -> str:
    return (v & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little").decode("latin-1")


def value_profile_score(comparison_id, lhs, rhs) -> int:
    """Match score of one instrumented comparison: common-prefix length."""
    if isinstance(lhs, bytes):
        lhs = lhs.decode("latin-1")
    if isinstance(rhs, bytes):
        rhs = rhs.decode("latin-1")
    return common_prefix(lhs, rhs)


def _loc(nid: int, k: int = 0) -> int:
    # pseudo-random 16-bit block id, stable for a given node
    return ((nid * 2654435761 + k * 40503) >> 7) & 0xFFFF


def to_text(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return v
    if isinstance(v, int):
        return str(v)
    if isinstance(v, list):
        return "[" + ", ".join(to_text(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{to_text(k)}: {to_text(x)}" for k, x in v.items()) + "}"
    if isinstance(v, FuncValue):
        return f"<fn {v.name}>"
    if isinstance(v, InputStream):
        return "<input>"
    return str(v)


def _snapshot(v):
    if isinstance(v, (str, int, bool)) or v is None:
        return v
    return to_text(v)


def _truthy(v) -> bool:
    if isinstance(v, (InputStream, FuncValue)):
        return True
    return bool(v)


class Interpreter:
    def __init__(self, program: A.TargetProgram, limits: Limits, breakpoints=None,
                 sandbox: SandboxState = SandboxState()):
        self.program = program
        self.limits = limits
        self.sandbox = sandbox
        self.bp = frozenset(breakpoints or ())
        self.bp_hit = set()
        self.steps = 0
        self.globals = {}
        self.stack = []
        self.entered = []
        self.sink_hits = []
        self.edges = {}
        self.prev_loc = 0
        self.vp = []
        self.cmp_ops = []
        self._cmp_seen = set()

    # -- instrumentation -----------------------------------------------------
    def edge(self, loc: int):
        e = (self.prev_loc >> 1) ^ loc
        self.edges[e] = self.edges.get(e, 0) + 1
        self.prev_loc = loc

    def compare(self, cmp_id: int, a: str, b: str) -> int:
        score = common_prefix(a, b)
        if len(self.vp) < MAX_VP_EVENTS:
            self.vp.append((cmp_id, score))
        if len(self.cmp_ops) < MAX_CMP_OPERANDS and a != b:
            key = (cmp_id, a[:64], b[:64])
            if key not in self._cmp_seen:
                self._cmp_seen.add(key)
                self.cmp_ops.append(key)
        return score

    def tick(self):
        self.steps += 1
        if self.steps > self.limits.steps:
            raise _Timeout()

    def check_alloc(self, n: int):
        if n > self.limits.max_alloc:
            raise MiniJRuntimeError(f"allocation of {n} exceeds limit")

    # -- program entry -------------------------------------------------------
    def run(self, data: str):
        for g in self.program.globals:
            self.tick()
            self.globals[g.name] = self.eval(g.value, {})
        entry = self.program.entry()
        return self.call_function(entry, [InputStream(data)], -1)

    def call_function(self, fn: A.FunctionDef, args: list, site: int):
        if len(args) != len(fn.params):
            raise MiniJRuntimeError(f"{fn.name} expects {len(fn.params)} argument(s), got {len(args)}")
        if len(self.stack) >= self.limits.max_depth:
            raise MiniJRuntimeError("call depth exceeded")
        self.tick()
        if len(self.entered) < MAX_ENTERED:
            self.entered.append((fn.name, site))
        self.stack.append((fn.name, site))
        self.edge(_loc(fn.nid))
        env = dict(zip(fn.params, args))
        try:
            sig = self.exec_block(fn.body, env)
        finally:
            self.stack.pop()
        if isinstance(sig, _Return):
            return sig.value
        return None

    # -- statements ----------------------------------------------------------
    def exec_block(self, body, env):
        for stmt in body:
            sig = self.exec_stmt(stmt, env)
            if sig is not None:
                return sig
        return None

    def exec_stmt(self, s, env):
        self.tick()
        t = type(s)
        if t is A.ExprStmt:
            self.eval(s.expr, env)
            return None
        if t is A.Let:
            env[s.name] = self.eval(s.value, env)
            return None
        if t is A.Assign:
            value = self.eval(s.value, env)
            target = s.target
            if type(target) is A.Name:
                if target.kind == "local" or (target.name in env and target.kind != "global"):
                    env[target.name] = value
                else:
                    self.globals[target.name] = value
            else:
                container = self.eval(target.target, env)
                key = self.eval(target.key, env)
                self.store_index(container, key, value)
            return None
        if t is A.If:
            if _truthy(self.eval(s.cond, env)):
                self.edge(_loc(s.nid, 1))
                return self.exec_block(s.then, env)
            self.edge(_loc(s.nid, 2))
            if s.orelse:
                return self.exec_block(s.orelse, env)
            return None
        if t is A.While:
            while _truthy(self.eval(s.cond, env)):
                self.edge(_loc(s.nid, 1))
                sig = self.exec_block(s.body, env)
                if sig is _BREAK:
                    break
                if sig is _CONTINUE:
                    continue
                if sig is not None:
                    return sig
                self.tick()
            self.edge(_loc(s.nid, 2))
            return None
        if t is A.Return:
            return _Return(None if s.value is None else self.eval(s.value, env))
        if t is A.Break:
            return _BREAK
        if t is A.Continue:
            return _CONTINUE
        raise MiniJRuntimeError(f"unknown statement {t.__name__}")

    def store_index(self, container, key, value):
        if isinstance(container, dict):
            if not isinstance(key, (str, int)):
                raise MiniJRuntimeError("map keys must be strings or integers")
            container[key] = value
            self.check_alloc(len(container))
        elif isinstance(container, list):
            if not isinstance(key, int) or not 0 <= key < len(container):
                raise MiniJRuntimeError(f"list index {to_text(key)} out of range")
            container[key] = value
        else:
            raise MiniJRuntimeError(f"cannot index-assign into {to_text(container)}")

    # -- expressions ---------------------------------------------------------
    def eval(self, e, env):
        t = type(e)
        if t is A.Name:
            kind = e.kind
            if kind == "local":
                try:
                    return env[e.name]
                except KeyError:
                    raise MiniJRuntimeError(f"variable {e.name!r} used before assignment") from None
            if kind == "global":
                return self.globals.get(e.name)
            return FuncValue(e.name)
        if t is A.Str or t is A.Num or t is A.Bool:
            return e.value
        if t is A.Call:
            return self.eval_call(e, env)
        if t is A.Binary:
            return self.eval_binary(e, env)
        if t is A.Unary:
            v = self.eval(e.operand, env)
            if e.op == "!":
                return not _truthy(v)
            if not isinstance(v, int) or isinstance(v, bool):
                raise MiniJRuntimeError("unary minus on non-integer")
            return -v
        if t is A.Index:
            container = self.eval(e.target, env)
            key = self.eval(e.key, env)
            return self.load_index(e.nid, container, key)
        if t is A.Null:
            return None
        if t is A.ListLit:
            return [self.eval(x, env) for x in e.items]
        if t is A.MapLit:
            out = {}
            for k, v in e.pairs:
                key = self.eval(k, env)
                if not isinstance(key, (str, int)):
                    raise MiniJRuntimeError("map keys must be strings or integers")
                out[key] = self.eval(v, env)
            return out
        raise MiniJRuntimeError(f"unknown expression {t.__name__}")

    def load_index(self, cmp_id, container, key):
        if isinstance(container, dict):
            if isinstance(key, str) and key not in container:
                for existing in list(container)[:8]:
                    if isinstance(existing, str):
                        self.compare(cmp_id, existing, key)
            return container.get(key)
        if isinstance(container, list):
            if not isinstance(key, int) or isinstance(key, bool) or not 0 <= key < len(container):
                raise MiniJRuntimeError(f"list index {to_text(key)} out of range")
            return container[key]
        if isinstance(container, str):
            if not isinstance(key, int) or not 0 <= key < len(container):
                raise MiniJRuntimeError(f"string index {to_text(key)} out of range")
            return container[key]
        raise MiniJRuntimeError(f"cannot index {to_text(container)}")

    def eval_binary(self, e, env):
        op = e.op
        if op == "&&":
            return _truthy(self.eval(e.left, env)) and _truthy(self.eval(e.right, env))
        if op == "||":
            return _truthy(self.eval(e.left, env)) or _truthy(self.eval(e.right, env))
        a = self.eval(e.left, env)
        b = self.eval(e.right, env)
        ta, tb = type(a), type(b)
        if op == "==" or op == "!=":
            if ta is str and tb is str:
                self.compare(e.nid, a, b)
                eq = a == b
            elif ta is int and tb is int:
                self.compare(e.nid, _int_bytes(a), _int_bytes(b))
                eq = a == b
            else:
                eq = ta is tb and a == b
            return eq if op == "==" else not eq
        if op == "+":
            if ta is str or tb is str:
                out = to_text(a) + to_text(b)
                self.check_alloc(len(out))
                return out
            if ta is list and tb is list:
                self.check_alloc(len(a) + len(b))
                return a + b
        if ta is not int or tb is not int:
            raise MiniJRuntimeError(f"operator {op} needs integers, got {to_text(a)} and {to_text(b)}")
        if op in ("<", "<=", ">", ">="):
            self.compare(e.nid, _int_bytes(a), _int_bytes(b))
            if op == "<":
                return a < b
            if op == "<=":
                return a <= b
            if op == ">":
                return a > b
            return a >= b
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            out = a * b
            if out.bit_length() > 4096:
                raise MiniJRuntimeError("integer overflow")
            return out
        if op == "/" or op == "%":
            if b == 0:
                raise MiniJRuntimeError("division by zero")
            q = abs(a) // abs(b)
            if (a < 0) != (b < 0):
                q = -q
            return q if op == "/" else a - b * q
        raise MiniJRuntimeError(f"unknown operator {op}")

    def eval_call(self, e, env):
        kind = e.kind
        if kind == "builtin":
            args = [self.eval(a, env) for a in e.args]
            if e.site in self.bp:
                self.bp_hit.add(e.site)
            info = lookup(e.callee)
            if info.cwe is not None:
                return self.call_sink(e, info, args)
            return _HELPERS[e.callee](self, e, args)
        if kind == "direct":
            fn = self.program.functions[e.callee]
        else:
            target = env.get(e.callee) if e.callee in env else self.globals.get(e.callee)
            if not isinstance(target, FuncValue):
                raise MiniJRuntimeError(f"{e.callee!r} is not a function value")
            fn = self.program.functions[target.name]
        args = [self.eval(a, env) for a in e.args]
        if e.site in self.bp:
            self.bp_hit.add(e.site)
        return self.call_function(fn, args, e.site)

    def call_sink(self, e, info, args):
        self.tick()
        rule = RULES[e.callee]
        snapshot = tuple(_snapshot(a) for a in args)
        result = evaluate_sanitizer(rule, [to_text(a) if a is not None else "" for a in args], self.sandbox)
        if result.guidance is not None:
            observed, target = result.guidance
            self.compare(e.nid, observed, target)
        if len(self.sink_hits) < MAX_SINK_HITS or result.triggered:
            self.sink_hits.append(SinkHit(e.site, e.callee, info.cwe, snapshot,
                                          tuple(self.stack), result.triggered))
        if result.triggered:
            raise _Violation(Verdict("sanitizer_violation", info.cwe, result.detail, e.site))
        return _SINK_RESULTS[e.callee](self, args)


# -- helper builtins ------------------------------------------------------------

def _need_stream(v) -> InputStream:
    if not isinstance(v, InputStream):
        raise MiniJRuntimeError("expected the input stream")
    return v


def _need_int(v, what="argument") -> int:
    if not isinstance(v, int) or isinstance(v, bool):
        raise MiniJRuntimeError(f"{what} must be an integer, got {to_text(v)}")
    return v


def _need_str(v, what="argument") -> str:
    if not isinstance(v, str):
        raise MiniJRuntimeError(f"{what} must be a string, got {to_text(v)}")
    return v


def _consume_string(it, e, a):
    return _need_stream(a[0]).take_line(_need_int(a[1]))


def _consume_bytes(it, e, a):
    return _need_stream(a[0]).take(_need_int(a[1]))


def _consume_u32(it, e, a):
    raw = _need_stream(a[0]).take(4).encode("latin-1").ljust(4, b"\0")
    return int.from_bytes(raw, "little")


def _len(it, e, a):
    v = a[0]
    if isinstance(v, (str, list, dict)):
        return len(v)
    raise MiniJRuntimeError(f"len of {to_text(v)}")


def _substr(it, e, a):
    s = _need_str(a[0])
    start = max(0, _need_int(a[1]))
    end = len(s) if len(a) < 3 else _need_int(a[2])
    return s[start:max(start, end)]


def _starts_with(it, e, a):
    s, p = _need_str(a[0]), _need_str(a[1])
    it.compare(e.nid, s[:len(p)], p)
    return s.startswith(p)


def _ends_with(it, e, a):
    s, p = _need_str(a[0]), _need_str(a[1])
    it.compare(e.nid, s[::-1][:len(p)], p[::-1])
    return s.endswith(p)


def _contains(it, e, a):
    hay, needle = a[0], a[1]
    if isinstance(hay, list):
        return needle in hay
    if isinstance(hay, dict):
        return needle in hay
    return _need_str(needle) in _need_str(hay)


def _index_of(it, e, a):
    return _need_str(a[0]).find(_need_str(a[1]))


def _split(it, e, a):
    s, sep = _need_str(a[0]), _need_str(a[1])
    if not sep:
        raise MiniJRuntimeError("empty separator")
    return s.split(sep)


def _join(it, e, a):
    if not isinstance(a[0], list):
        raise MiniJRuntimeError("join expects a list")
    out = _need_str(a[1]).join(to_text(x) for x in a[0])
    it.check_alloc(len(out))
    return out


def _replace(it, e, a):
    s, old, new = _need_str(a[0]), _need_str(a[1]), _need_str(a[2])
    if not old:
        return s
    count = s.count(old)
    it.check_alloc(len(s) + count * (len(new) - len(old)))
    return s.replace(old, new)


def _to_int(it, e, a):
    v = a[0]
    if isinstance(v, int) and not isinstance(v, bool):
        return v
    s = _need_str(v).strip()
    body = s[1:] if s[:1] in "+-" else s
    if not body or not body.isdigit() or len(body) > 19:
        return 0
    return int(s)


def _byte_at(it, e, a):
    s, i = _need_str(a[0]), _need_int(a[1])
    if not 0 <= i < len(s):
        raise MiniJRuntimeError(f"byte index {i} out of range")
    return ord(s[i])


def _chr(it, e, a):
    return chr(_need_int(a[0]) & 0xFF)


def _has_key(it, e, a):
    m, k = a[0], a[1]
    if not isinstance(m, dict):
        raise MiniJRuntimeError("has_key expects a map")
    if isinstance(k, str) and k not in m:
        for existing in list(m)[:8]:
            if isinstance(existing, str):
                it.compare(e.nid, existing, k)
    return k in m


def _get(it, e, a):
    m, k = a[0], a[1]
    if not isinstance(m, dict):
        raise MiniJRuntimeError("get expects a map")
    default = a[2] if len(a) > 2 else None
    if isinstance(k, str) and k not in m:
        for existing in list(m)[:8]:
            if isinstance(existing, str):
                it.compare(e.nid, existing, k)
    return m.get(k, default)


def _keys(it, e, a):
    if not isinstance(a[0], dict):
        raise MiniJRuntimeError("keys expects a map")
    return list(a[0])


def _push(it, e, a):
    if not isinstance(a[0], list):
        raise MiniJRuntimeError("push expects a list")
    it.check_alloc(len(a[0]) + 1)
    a[0].append(a[1])
    return a[0]


def _sha256hex(it, e, a):
    return hashlib.sha256(to_text(a[0]).encode("latin-1")).hexdigest()


_HELPERS = {
    "consume_string": _consume_string,
    "consume_bytes": _consume_bytes,
    "consume_u32": _consume_u32,
    "remaining": lambda it, e, a: _need_stream(a[0]).remaining(),
    "sha256hex": _sha256hex,
    "len": _len,
    "substr": _substr,
    "starts_with": _starts_with,
    "ends_with": _ends_with,
    "contains": _contains,
    "index_of": _index_of,
    "to_lower": lambda it, e, a: _need_str(a[0]).lower(),
    "to_upper": lambda it, e, a: _need_str(a[0]).upper(),
    "trim": lambda it, e, a: _need_str(a[0]).strip(),
    "split": _split,
    "join": _join,
    "replace": _replace,
    "str": lambda it, e, a: to_text(a[0]),
    "int": _to_int,
    "byte_at": _byte_at,
    "chr": _chr,
    "has_key": _has_key,
    "get": _get,
    "keys": _keys,
    "push": _push,
}


def _regex_result(it, a):
    try:
        ok, _ = _regex.match(to_text(a[0]), to_text(a[1]))
        return ok
    except (_regex.RegexSyntaxError, _regex.MatchTooDeep, _regex.BacktrackLimitExceeded):
        return False


_SINK_RESULTS = {
    "sys.exec": lambda it, a: "",
    "fs.open": lambda it, a: it.sandbox.read(normalize_path(it.sandbox.root, to_text(a[0]))),
    "sql.query": lambda it, a: [],
    "xml.parse": lambda it, a: {},
    "deser.load": lambda it, a: {"class": declared_class(to_text(a[0]))},
    "net.fetch": lambda it, a: "",
    "xpath.eval": lambda it, a: [],
    "regex.match": _regex_result,
    "reflect.load": lambda it, a: {"class": to_text(a[0])},
}


def execute(program: A.TargetProgram, data: bytes, limits: Limits = Limits(),
            trace_spec=None, sandbox: SandboxState = SandboxState()) -> ExecutionTrace:
    """Run the harness of ``program`` on ``data``.

    Deterministic in ``(program, data, limits)``. Never raises for program
    behavior: failures land in ``trace.verdict`` with precedence
    sanitizer_violation > runtime_error > timeout > ok. ``trace_spec`` is an
    optional set of call-site ids used as breakpoints.
    """
    if len(data) > limits.max_input:
        raise ValueError(f"input of {len(data)} bytes exceeds max_input {limits.max_input}")
    trace = ExecutionTrace()
    bp = frozenset(trace_spec or ())
    if limits.steps <= 0:
        trace.verdict = Verdict("timeout", detail="zero step budget")
        trace.breakpoints = {s: False for s in sorted(bp)}
        return trace
    interp = Interpreter(program, limits, bp, sandbox)
    verdict = Verdict()
    try:
        interp.run(data.decode("latin-1") if isinstance(data, (bytes, bytearray)) else data)
    except _Violation as v:
        verdict = v.verdict
    except _Timeout:
        verdict = Verdict("timeout", detail=f"step budget {limits.steps} exhausted")
    except MiniJRuntimeError as err:
        verdict = Verdict("runtime_error", detail=str(err))
    except RecursionError:
        verdict = Verdict("runtime_error", detail="host recursion limit")
    trace.entered_functions = interp.entered
    trace.sink_hits = interp.sink_hits
    trace.verdict = verdict
    trace.edge_counts = interp.edges
    trace.coverage_delta = frozenset(interp.edges)
    trace.value_profile_events = interp.vp
    trace.cmp_operands = interp.cmp_ops
    trace.breakpoints = {s: s in interp.bp_hit for s in sorted(bp)}
    trace.steps = interp.steps
    return trace
