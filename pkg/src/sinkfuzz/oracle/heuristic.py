"""Deterministic rule-based oracle.

Exploration: walk the guards along the call path, resolve each side of a
comparison back to an input slot or a concrete value, and turn the required
outcome into per-slot constraints. Hash comparisons are inverted only when
the preimage is a literal present in the context. Unconstrained slots get a
filler that varies with the attempt number.

Exploitation: splice a CWE payload into the part of the beep input that
shows up in the sink argument.

Filtering: drop only when a guard on the sink's own function pins the
sensitive argument to a literal table.
"""

from __future__ import annotations

import base64
import hashlib
from dataclasses import dataclass, field
from typing import Optional

from .dsl import emit_op, render
from .types import EXPLOIT, EXPLORE, FILTER, OracleRequest, OracleResponse

FILLERS = ("A", "1", "AAAAAAAA", "0", "a", "true", "AAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAA")
U32_FILLERS = (1, 0, 2, 255, 4096)

PAYLOADS = {
    "CWE-078": ("jazze", "jazze -c id"),
    "CWE-022": ("../../../../etc/passwd", "../../../../../../../../etc/passwd", "/etc/passwd"),
    "CWE-089": ("x';--", "1;--", "';--"),
    "CWE-611": ('<!DOCTYPE x [<!ENTITY e SYSTEM "file:///etc/passwd">]><x>&e;</x>',
                '<!ENTITY e SYSTEM "file:///etc/passwd">'),
    "CWE-502": ("evil.Sentinel{}", "evil.Sentinel"),
    "CWE-918": ("http://sink.invalid/", "sink.invalid"),
    "CWE-643": ("' or '1'='1", "x' or 'a'='a"),
    "CWE-730": ("(a+)+$", "(a|a)*$", "(a*)*b"),
    "CWE-470": ("evil.Sentinel",),
}

_NEGATE = {"==": "!=", "!=": "==", "<": ">=", ">=": "<", ">": "<=", "<=": ">"}
_FLIP = {"==": "==", "!=": "!=", "<": ">", ">": "<", "<=": ">=", ">=": "<="}
_TRANSPARENT = {"to_lower", "to_upper", "trim", "str"}


def sha256hex(text: str) -> str:
    return hashlib.sha256(text.encode("latin-1", "replace")).hexdigest()


# -- symbolic values ----------------------------------------------------------------

@dataclass(frozen=True)
class Val:
    value: object


@dataclass(frozen=True)
class Sym:
    slot: int


@dataclass(frozen=True)
class Hash:
    slot: int


@dataclass(frozen=True)
class Len:
    slot: int


@dataclass(frozen=True)
class ByteAt:
    slot: int
    index: int


@dataclass(frozen=True)
class MapV:
    pairs: tuple  # ((key value, value tree), ...)
    stores: tuple  # ((key tree, value tree), ...)


@dataclass(frozen=True)
class ListV:
    items: tuple  # resolved items


@dataclass
class SlotSpec:
    equals: Optional[object] = None
    not_equals: set = field(default_factory=set)
    prefix: str = ""
    suffix: str = ""
    contains: list = field(default_factory=list)
    min_len: int = 0
    max_len: Optional[int] = None
    chars: dict = field(default_factory=dict)
    lo: Optional[int] = None
    hi: Optional[int] = None


class Solver:
    def __init__(self, context: dict):
        self.ctx = context
        self.slots = {s["slot"]: s for s in context.get("input_plan", [])}
        self.specs = {}
        self.unsat = []
        self.pending = []  # literals compared against values we could not link to a slot
        self.literals = sorted({lit["value"] for fn in context.get("functions", [])
                                for lit in fn.get("literals", [])})

    def spec(self, slot: int) -> SlotSpec:
        return self.specs.setdefault(slot, SlotSpec())

    # resolution ------------------------------------------------------------------
    def resolve(self, t):
        if t is None:
            return None
        op = t.get("op")
        if op == "lit":
            return Val(t["value"])
        if op == "consume":
            return Sym(t["slot"]) if t.get("slot") is not None else None
        if op in ("var", "global"):
            if "stores" in t or (t.get("def") or {}).get("op") == "map":
                base = self.resolve(t.get("def")) if t.get("def") else MapV((), ())
                if isinstance(base, MapV):
                    return MapV(base.pairs, base.stores + tuple((s["key"], s["value"]) for s in t.get("stores", [])))
            return self.resolve(t.get("def"))
        if op == "param":
            return self.resolve(t.get("bound"))
        if op == "map":
            pairs = []
            for k, v in t["pairs"]:
                kr = self.resolve(k)
                if isinstance(kr, Val):
                    pairs.append((kr.value, v))
            return MapV(tuple(pairs), ())
        if op == "list":
            return ListV(tuple(self.resolve(x) for x in t["items"]))
        if op == "index":
            return self.lookup(self.resolve(t["target"]), self.resolve(t["key"]))
        if op == "call":
            return self.call(t["name"], [self.resolve(a) for a in t["args"]], t["args"])
        if op == "+":
            left, right = self.resolve(t["lhs"]), self.resolve(t["rhs"])
            if isinstance(left, Val) and isinstance(right, Val):
                lv, rv = left.value, right.value
                if isinstance(lv, int) and isinstance(rv, int) and not isinstance(lv, bool):
                    return Val(lv + rv)
                return Val(_text(lv) + _text(rv))
            return None
        return None

    def lookup(self, container, key):
        if isinstance(container, MapV) and isinstance(key, Val):
            for k, v in container.pairs:
                if k == key.value:
                    return self.resolve(v)
            for k_tree, v_tree in container.stores:
                kr = self.resolve(k_tree)
                if isinstance(kr, Sym):
                    self.require_equal(kr.slot, key.value)
                    return self.resolve(v_tree)
                if isinstance(kr, Val) and kr.value == key.value:
                    return self.resolve(v_tree)
        if isinstance(container, ListV) and isinstance(key, Val) and isinstance(key.value, int):
            if 0 <= key.value < len(container.items):
                return container.items[key.value]
        return None

    def call(self, name, args, trees):
        if name == "sha256hex" and args:
            if isinstance(args[0], Val):
                return Val(sha256hex(_text(args[0].value)))
            if isinstance(args[0], Sym):
                return Hash(args[0].slot)
        if name in _TRANSPARENT and args:
            if isinstance(args[0], Val):
                v = _text(args[0].value)
                return Val({"to_lower": v.lower(), "to_upper": v.upper(), "trim": v.strip()}.get(name, v))
            return args[0] if isinstance(args[0], Sym) else None
        if name == "len" and args and isinstance(args[0], Sym):
            return Len(args[0].slot)
        if name == "byte_at" and len(args) == 2 and isinstance(args[0], Sym) and isinstance(args[1], Val):
            return ByteAt(args[0].slot, args[1].value)
        if name == "get" and len(args) >= 2:
            return self.lookup(args[0], args[1])
        if name == "int" and args and isinstance(args[0], Sym):
            return args[0]
        return None

    # constraints -------------------------------------------------------------------
    def require_equal(self, slot, value):
        sp = self.spec(slot)
        if sp.equals is None:
            sp.equals = value

    def guard(self, cond, truth: bool):
        op = cond.get("op")
        if op == "not":
            return self.guard(cond["arg"], not truth)
        if op == "&&" and truth or op == "||" and not truth:
            self.guard(cond["lhs"], truth)
            self.guard(cond["rhs"], truth)
            return
        if op in ("&&", "||"):
            # one side suffices: take the left
            self.guard(cond["lhs"], truth)
            return
        if op in _NEGATE:
            self.compare(op if truth else _NEGATE[op], self.resolve(cond["lhs"]), self.resolve(cond["rhs"]), cond)
            return
        if op == "call":
            self.predicate(cond["name"], [self.resolve(a) for a in cond["args"]], truth)
            return
        r = self.resolve(cond)
        if isinstance(r, Sym) and truth:
            self.spec(r.slot).min_len = max(self.spec(r.slot).min_len, 1)

    def compare(self, op, left, right, cond):
        if isinstance(left, Val) and not isinstance(right, Val):
            left, right, op = right, left, _FLIP[op]
        if not isinstance(right, Val):
            return
        v = right.value
        if isinstance(left, Sym):
            sp = self.spec(left.slot)
            if op == "==":
                self.require_equal(left.slot, v)
            elif op == "!=":
                sp.not_equals.add(v)
            elif isinstance(v, int):
                if op in (">", ">="):
                    sp.lo = v + (op == ">")
                else:
                    sp.hi = v - (op == "<")
        elif isinstance(left, Hash):
            if op == "==":
                pre = next((lit for lit in self.literals if sha256hex(lit) == v), None)
                if pre is None:
                    self.unsat.append(f"no preimage in context for hash comparison {v!r}")
                else:
                    self.require_equal(left.slot, pre)
        elif isinstance(left, Len) and isinstance(v, int):
            sp = self.spec(left.slot)
            if op == "==":
                sp.min_len, sp.max_len = v, v
            elif op == "!=" and v == 0:
                sp.min_len = max(sp.min_len, 1)
            elif op in (">", ">="):
                sp.min_len = max(sp.min_len, v + (op == ">"))
            elif op in ("<", "<="):
                sp.max_len = v - (op == "<")
        elif isinstance(left, ByteAt) and op == "==" and isinstance(v, int):
            self.spec(left.slot).chars[left.index] = chr(v & 0xFF)
        elif left is None and op == "==" and isinstance(v, str) and v:
            self.pending.append(v)

    def predicate(self, name, args, truth):
        if len(args) < 2:
            return
        subject, arg = args[0], args[1]
        if name == "has_key" and truth and isinstance(subject, MapV) and isinstance(arg, Val):
            self.lookup(subject, arg)
            return
        if not truth or not isinstance(arg, Val):
            if name == "contains" and truth and isinstance(subject, ListV) and isinstance(arg, Sym):
                options = [x.value for x in subject.items if isinstance(x, Val)]
                if options:
                    self.require_equal(arg.slot, options[0])
            return
        v = _text(arg.value)
        if not isinstance(subject, Sym):
            if subject is None and name in ("starts_with", "contains") and v:
                self.pending.append(v)
            return
        sp = self.spec(subject.slot)
        if name == "starts_with":
            sp.prefix = v if len(v) > len(sp.prefix) else sp.prefix
        elif name == "ends_with":
            sp.suffix = v if len(v) > len(sp.suffix) else sp.suffix
        elif name == "contains":
            sp.contains.append(v)


def _text(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, bool):
        return "true" if v else "false"
    return v if isinstance(v, str) else str(v)


def _realize_str(sp: SlotSpec, filler: str) -> str:
    if sp.equals is not None:
        return _text(sp.equals)
    body = filler
    for c in sp.contains:
        if c not in body:
            body += c
    s = sp.prefix + body + sp.suffix
    if sp.chars:
        need = max(sp.chars) + 1
        s = s.ljust(need, "A")
        chars = list(s)
        for i, ch in sp.chars.items():
            chars[i] = ch
        s = "".join(chars)
    if len(s) < sp.min_len:
        s = s + "A" * (sp.min_len - len(s))
    if sp.max_len is not None and len(s) > sp.max_len:
        s = s[:sp.max_len]
    while s in sp.not_equals:
        s += "A"
    return s


def _realize_int(sp: SlotSpec, filler: int) -> int:
    if sp.equals is not None:
        try:
            return int(sp.equals) & 0xFFFFFFFF
        except (TypeError, ValueError):
            return filler
    v = filler
    if sp.lo is not None and v < sp.lo:
        v = sp.lo
    if sp.hi is not None and v > sp.hi:
        v = max(sp.hi, 0)
    while v in sp.not_equals:
        v += 1
    return v & 0xFFFFFFFF


def _slot_line(slot: dict, value) -> str:
    kind = slot["builtin"]
    if kind == "consume_u32":
        return f"emit_u32le {value}"
    text = _text(value)
    if kind == "consume_bytes" and slot.get("max") is not None:
        n = slot["max"]
        text = text[:n].ljust(n, "A")
        return emit_op(text)
    if slot.get("max") is not None:
        text = text[:slot["max"]]
    return emit_op(text + "\n")


def explore(request: OracleRequest) -> OracleResponse:
    ctx = request.context
    plan = ctx.get("input_plan", [])
    solver = Solver(ctx)
    for fn in ctx.get("functions", []):
        for g in fn.get("guards", []):
            if g.get("required") is not None:
                solver.guard(g["cond"], g["required"])
    if not plan:
        if not solver.literals:
            return OracleResponse(EXPLORE, no_progress=True, report="no input consumption on the path")
        return OracleResponse(EXPLORE, dsl=render(["# path consumes no input"]))
    if solver.unsat and not solver.literals:
        return OracleResponse(EXPLORE, no_progress=True, report="; ".join(solver.unsat))

    attempt = request.attempt
    # unlinked literal comparisons go to free string slots in plan order
    free = [s["slot"] for s in plan if s["builtin"] != "consume_u32"
            and solver.spec(s["slot"]).equals is None]
    for lit, slot in zip(solver.pending, free):
        solver.require_equal(slot, lit)

    # solved slots keep their value; only unconstrained ones vary per attempt
    body = []
    for slot in plan:
        sp = solver.spec(slot["slot"])
        if slot["builtin"] == "consume_u32":
            value = _realize_int(sp, U32_FILLERS[attempt % len(U32_FILLERS)])
        else:
            value = _realize_str(sp, FILLERS[attempt % len(FILLERS)])
        body.append(_slot_line(slot, value))
    at, priming = _priming(ctx, solver, attempt)
    lines = [f"# attempt {attempt}: {len(plan)} input slot(s) along {' -> '.join(ctx.get('path', []))}"]
    lines += body[:at] + priming + body[at:]
    return OracleResponse(EXPLORE, dsl=render(lines))


def _priming(ctx, solver: Solver, attempt: int):
    """For looping harnesses, from the second attempt on, insert one earlier
    iteration that takes a branch the path itself must avoid, such as a
    state-setting command. Returns (insert position, lines)."""
    plan = ctx.get("input_plan", [])
    loop = [j for j, s in enumerate(plan) if s.get("in_loop")]
    if attempt < 1 or not ctx.get("loop_harness") or not loop:
        return 0, []
    excluded = []
    for fn in ctx.get("functions", []):
        for g in fn.get("guards", []):
            cond = g["cond"]
            if g.get("required") is False and cond.get("op") == "==":
                left, right = solver.resolve(cond["lhs"]), solver.resolve(cond["rhs"])
                if isinstance(left, Val):
                    left, right = right, left
                if isinstance(left, Sym) and isinstance(right, Val):
                    excluded.append((left.slot, right.value))
    if not excluded:
        return 0, []
    slot_id, value = excluded[(attempt - 1) % len(excluded)]
    lines = [f"# prime state: one iteration with {_text(value)!r}"]
    for j in loop:
        slot = plan[j]
        if slot["slot"] == slot_id:
            lines.append(_slot_line(slot, value))
        else:
            lines.append(_slot_line(slot, 1 if slot["builtin"] == "consume_u32" else "A"))
    return loop[0], lines


# -- exploitation ----------------------------------------------------------------------

def longest_common_substring(a: str, b: str):
    """(start in b, length) of the longest substring of ``a`` also found in ``b``."""
    best = (0, 0)
    if not a or not b:
        return best
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        ai = a[i - 1]
        for j in range(1, len(b) + 1):
            if ai == b[j - 1]:
                cur[j] = prev[j - 1] + 1
                if cur[j] > best[1]:
                    best = (j - cur[j], cur[j])
        prev = cur
    return best


def candidate_regions(data: str, arg: str) -> list:
    """Spans of ``data`` that plausibly feed the sink argument, best first."""
    regions = []
    if not arg:
        # an empty argument usually means the input ran out before it was read
        regions.append((len(data), len(data)))
    else:
        pos = data.rfind(arg)
        while pos >= 0:
            regions.append((pos, pos + len(arg)))
            pos = data.rfind(arg, 0, pos)
        start, n = longest_common_substring(arg[:512], data[:4096])
        if n and (start, start + n) not in regions:
            regions.append((start, start + n))
    segs = []
    pos = 0
    for piece in data.split("\n"):
        if piece:
            segs.append((pos, pos + len(piece)))
        pos += len(piece) + 1
    for span in reversed(segs):
        if span not in regions:
            regions.append(span)
    if not regions:
        regions.append((len(data), len(data)))
    return regions


def exploit_candidates(data: str, arg: str, cwe: str) -> list:
    payloads = PAYLOADS.get(cwe, ())
    out = []
    for start, end in candidate_regions(data, arg):
        sep = "\n" if start == end == len(data) and data and not data.endswith("\n") else ""
        for p in payloads:
            out.append(data[:start] + sep + p + data[end:])
    seen = set()
    return [c for c in out if not (c in seen or seen.add(c))]


def exploit(request: OracleRequest) -> OracleResponse:
    ctx = request.context
    data = base64.b64decode(ctx["input_b64"]).decode("latin-1")
    sink = ctx["sink"]
    args = sink.get("args") or []
    idx = sink.get("tainted_param_index", 0)
    arg = _text(args[idx]) if idx < len(args) and args[idx] is not None else ""
    candidates = exploit_candidates(data, arg, ctx["cwe"])
    if not candidates:
        return OracleResponse(EXPLOIT, no_progress=True, report=f"no payloads for {ctx['cwe']}")
    choice = candidates[request.attempt % len(candidates)]
    lines = [f"# attempt {request.attempt}: {ctx['cwe']} payload spliced into the sink-argument region"]
    lines += [emit_op(seg + "\n") for seg in choice.split("\n")[:-1]]
    tail = choice.split("\n")[-1]
    if tail:
        lines.append(emit_op(tail))
    return OracleResponse(EXPLOIT, dsl=render(lines))


# -- filtering ---------------------------------------------------------------------------

def _allowlist(cond, truth, name):
    """Literal values ``name`` is restricted to when ``cond`` has value ``truth``."""
    op = cond.get("op")
    if op == "not":
        return _allowlist(cond["arg"], not truth, name)
    if op == "call" and cond["name"] == "contains" and truth and len(cond["args"]) == 2:
        table, subject = cond["args"]
        if _names(subject, name):
            items = _literal_items(table)
            if items:
                return items
    if op in ("==", "!=") and (op == "==") == truth:
        for a, b in ((cond["lhs"], cond["rhs"]), (cond["rhs"], cond["lhs"])):
            if _names(a, name) and b.get("op") == "lit":
                return [b["value"]]
    if op == "||" and truth:
        left, right = _allowlist(cond["lhs"], True, name), _allowlist(cond["rhs"], True, name)
        if left and right:
            return left + right
    return None


def _names(t, name) -> bool:
    return t.get("op") in ("var", "param") and t.get("name") == name


def _literal_items(t):
    while t.get("op") == "var" and "def" in t:
        t = t["def"]
    if t.get("op") == "list" and t["items"] and all(x.get("op") == "lit" for x in t["items"]):
        return [x["value"] for x in t["items"]]
    return None


def filter_evidence(ctx: dict) -> Optional[str]:
    path = ctx.get("path")
    if not path:
        return None
    sink = path["sink"]
    idx = 0
    if not sink["args"]:
        return None
    arg = sink["args"][idx]
    if arg.get("op") not in ("var", "param"):
        return None
    name = arg["name"]
    for g in path["functions"][-1]["guards"]:
        if g.get("required") is None:
            continue
        allowed = _allowlist(g["cond"], g["required"], name)
        if allowed:
            shown = ", ".join(repr(a) for a in allowed)
            return (f"guard `{g['text']}` (line {g['line']}) restricts {name} to the fixed values "
                    f"{shown}; no malicious value can reach {sink['text']}")
    return None


def filter_request(request: OracleRequest) -> OracleResponse:
    ctx = request.context
    evidence = filter_evidence(ctx)
    if request.phase == "report":
        sink = ctx["sink"]
        lines = [f"sink {sink['text']} ({sink['cwe']}) in {sink['function']} line {sink['line']}"]
        lines.append("path: " + (" -> ".join(ctx["path"]["path"]) if ctx.get("path") else "none found"))
        lines.append("finding: " + (evidence or "no invariant prevents attacker-controlled values"))
        return OracleResponse(FILTER, report="\n".join(lines))
    if evidence:
        return OracleResponse(FILTER, decision="drop", evidence=evidence)
    return OracleResponse(FILTER, decision="keep", report="no concrete evidence of unexploitability")


class HeuristicOracle:
    """Stateless except for call counters."""

    name = "heuristic"

    def __init__(self):
        from .types import UsageCounters
        self.usage = UsageCounters()

    def ask(self, request: OracleRequest) -> OracleResponse:
        self.usage.count(request.mode)
        if request.mode == EXPLORE:
            return explore(request)
        if request.mode == EXPLOIT:
            return exploit(request)
        return filter_request(request)
