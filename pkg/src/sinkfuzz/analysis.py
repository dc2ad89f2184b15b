"""Call graph, forward taint, and call-path machinery over MiniJ programs."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .minij import ast as A
from .minij.catalog import INPUT_SOURCES

DEFAULT_PATH_LIMIT = 16
# inlining depth for definitions in context expression trees
MAX_EXPR_DEPTH = 20


# -- call graph -----------------------------------------------------------------

@dataclass(frozen=True)
class Edge:
    caller: str
    callee: str
    site: int
    resolution: str  # "direct" or "approximate"


@dataclass
class CallGraph:
    nodes: list
    edges: list
    entry: str
    unresolved_sites: list = field(default_factory=list)

    def __post_init__(self):
        self._succ = {}
        for e in self.edges:
            self._succ.setdefault(e.caller, []).append(e)

    def out_edges(self, fn: str) -> list:
        return self._succ.get(fn, [])

    def successors(self, fn: str) -> list:
        return sorted({e.callee for e in self.out_edges(fn)})

    def has_edge(self, caller: str, callee: str, resolution: Optional[str] = None) -> bool:
        return any(e.callee == callee and (resolution is None or e.resolution == resolution)
                   for e in self.out_edges(caller))

    def reachable(self, start: Optional[str] = None) -> set:
        start = self.entry if start is None else start
        if start not in self.nodes:
            return set()
        seen = {start}
        todo = [start]
        while todo:
            fn = todo.pop()
            for nxt in self.successors(fn):
                if nxt not in seen:
                    seen.add(nxt)
                    todo.append(nxt)
        return seen

    def to_dict(self):
        return {
            "entry": self.entry,
            "nodes": list(self.nodes),
            "edges": [
                {"caller": e.caller, "callee": e.callee, "site": e.site, "resolution": e.resolution}
                for e in self.edges
            ],
            "unresolved_sites": list(self.unresolved_sites),
        }


def stored_function_names(program: A.TargetProgram) -> list:
    """Function names that are ever stored into a variable (let, assign, global)."""
    names = set()
    roots = list(program.globals) + list(program.functions.values())
    for root in roots:
        for node in A.walk(root):
            if isinstance(node, (A.Let, A.Assign, A.GlobalDef)):
                value = node.value
                if isinstance(value, A.Name) and value.kind == "func":
                    names.add(value.name)
    return sorted(names)


def build_callgraph(program: A.TargetProgram) -> CallGraph:
    """Resolve direct calls by name and function-value calls approximately.

    A call through a function-valued variable gets an approximate edge to
    every function whose name is stored into some variable anywhere. Function
    values that only travel through arguments, map/list literals or returns
    are not tracked, so such calls stay unresolved.
    """
    stored = stored_function_names(program)
    edges = []
    seen = set()
    unresolved = []
    for fn in program.functions.values():
        for node in A.walk(fn):
            if not isinstance(node, A.Call):
                continue
            if node.kind == "direct":
                targets, how = [node.callee], "direct"
            elif node.kind == "indirect":
                targets, how = stored, "approximate"
                if not stored:
                    unresolved.append(node.site)
            else:
                continue
            for callee in targets:
                key = (fn.name, callee, node.site)
                if key not in seen:
                    seen.add(key)
                    edges.append(Edge(fn.name, callee, node.site, how))
    edges.sort(key=lambda e: (e.site, e.callee))
    return CallGraph(sorted(program.functions), edges, program.harness_entry, unresolved)


# -- taint --------------------------------------------------------------------------

GLOBAL = "<global>"


@dataclass(frozen=True)
class TaintFact:
    variable: tuple  # (function, name)
    source: str
    via: tuple


@dataclass
class TaintResult:
    facts: dict  # (function, name) -> TaintFact
    returns: dict  # function -> TaintFact for tainted return values
    sink_tainted: dict = field(default_factory=dict)  # site -> bool

    def is_tainted(self, function: str, name: str) -> bool:
        return (function, name) in self.facts

    def fact_set(self) -> set:
        return set(self.facts.values())


class _TaintEngine:
    def __init__(self, program: A.TargetProgram, binding_filter: Optional[Callable] = None):
        self.program = program
        self.binding_filter = binding_filter
        self.facts = {}
        self.returns = {}
        self.changed = False

    def var_key(self, fn_name, name_node: A.Name):
        if name_node.kind == "global":
            return (GLOBAL, name_node.name)
        return (fn_name, name_node.name)

    def origin(self, e, fn_name):
        """Return (source, via) of the first tainted component of ``e``, or None."""
        t = type(e)
        if t is A.Name:
            if e.kind == "func":
                return None
            fact = self.facts.get(self.var_key(fn_name, e))
            if fact is None:
                return None
            return fact.source, fact.via + (f"{fact.variable[0]}.{fact.variable[1]}",)
        if t is A.Call:
            if e.kind == "builtin":
                if e.callee in INPUT_SOURCES:
                    return e.callee, ()
                for a in e.args:
                    o = self.origin(a, fn_name)
                    if o is not None:
                        return o[0], o[1] + (e.callee,)
                return None
            if e.kind == "direct":
                fact = self.returns.get(e.callee)
                if fact is not None:
                    return fact.source, fact.via + (f"return {e.callee}",)
            # no propagation through approximate (function-value) calls
            return None
        for child in A.children(e):
            o = self.origin(child, fn_name)
            if o is not None:
                return o
        return None

    def taint(self, key, origin):
        if key not in self.facts:
            self.facts[key] = TaintFact(key, origin[0], origin[1])
            self.changed = True

    def container_root(self, e):
        while isinstance(e, A.Index):
            e = e.target
        return e if isinstance(e, A.Name) else None

    def visit_function(self, fn: A.FunctionDef):
        name = fn.name
        for node in A.walk(fn):
            t = type(node)
            if t is A.Let:
                o = self.origin(node.value, name)
                if o is not None:
                    self.taint((name, node.name), o)
            elif t is A.Assign:
                o = self.origin(node.value, name)
                if isinstance(node.target, A.Name):
                    if o is not None:
                        self.taint(self.var_key(name, node.target), o)
                else:
                    if o is None:
                        o = self.origin(node.target.key, name)
                    root = self.container_root(node.target)
                    if o is not None and root is not None:
                        self.taint(self.var_key(name, root), (o[0], o[1] + ("map insert",)))
            elif t is A.Return and node.value is not None:
                o = self.origin(node.value, name)
                if o is not None and name not in self.returns:
                    self.returns[name] = TaintFact((name, "<return>"), o[0], o[1])
                    self.changed = True
            elif t is A.Call:
                if node.kind == "builtin" and node.callee == "push" and node.args:
                    root = self.container_root(node.args[0])
                    o = self.origin(node.args[1], name) if len(node.args) > 1 else None
                    if root is not None and o is not None:
                        self.taint(self.var_key(name, root), (o[0], o[1] + ("push",)))
                elif node.kind == "direct":
                    callee = self.program.functions[node.callee]
                    if self.binding_filter is not None and not self.binding_filter(name, callee.name, node.site):
                        continue
                    for param, arg in zip(callee.params, node.args):
                        o = self.origin(arg, name)
                        if o is not None:
                            self.taint((callee.name, param), (o[0], o[1] + (f"param {callee.name}.{param}",)))

    def run(self):
        roots = list(self.program.functions.values())
        self.changed = True
        while self.changed:
            self.changed = False
            for g in self.program.globals:
                o = self.origin(g.value, GLOBAL)
                if o is not None:
                    self.taint((GLOBAL, g.name), o)
            for fn in roots:
                self.visit_function(fn)
        return self


def _sink_arg(program: A.TargetProgram, site: int, param_index: int):
    call = program.calls[site]
    if param_index < len(call.args):
        return call.args[param_index]
    return None


def taint_analyze(program: A.TargetProgram, callgraph: Optional[CallGraph] = None, sinks=(),
                  binding_filter: Optional[Callable] = None) -> TaintResult:
    """Flow-insensitive forward taint from the input-consumption builtins.

    ``sinks`` is an iterable of SinkCallSite; the result's ``sink_tainted``
    maps each site id to whether its sensitive argument may carry input.
    """
    engine = _TaintEngine(program, binding_filter).run()
    result = TaintResult(engine.facts, engine.returns)
    for s in sinks:
        arg = _sink_arg(program, s.id, s.spec.tainted_param_index)
        fn = program.source_map[s.id][0]
        result.sink_tainted[s.id] = arg is not None and engine.origin(arg, fn) is not None
    return result


# -- call paths ------------------------------------------------------------------------

@dataclass(frozen=True)
class CallPath:
    functions: tuple
    sink: int
    taint_evidence: bool = False

    @property
    def length(self) -> int:
        return len(self.functions) - 1

    def rank_key(self):
        return (not self.taint_evidence, self.length, self.functions)

    def to_dict(self):
        return {"functions": list(self.functions), "sink": self.sink,
                "taint_evidence": self.taint_evidence, "length": self.length}


def _raw_paths(callgraph: CallGraph, target: str, limit: int, max_expansions: int = 200_000) -> list:
    entry = callgraph.entry
    if entry not in callgraph.nodes or target not in callgraph.nodes:
        return []
    found = []
    queue = deque([(entry,)])
    expansions = 0
    while queue and len(found) < limit and expansions < max_expansions:
        path = queue.popleft()
        expansions += 1
        if path[-1] == target:
            found.append(path)
            continue
        for nxt in callgraph.successors(path[-1]):
            if nxt not in path:
                queue.append(path + (nxt,))
    return found


def path_taint_evidence(program: A.TargetProgram, functions: tuple, sink) -> bool:
    """Taint reaches the sink when parameters of path functions are bound only along the path."""
    on_path = set(functions)
    hops = set(zip(functions, functions[1:]))

    def allow(caller, callee, site):
        if callee not in on_path:
            return True
        return (caller, callee) in hops

    result = taint_analyze(program, None, [sink], binding_filter=allow)
    return result.sink_tainted.get(sink.id, False)


def enumerate_paths(callgraph: CallGraph, sink, limit: int = DEFAULT_PATH_LIMIT, program=None) -> list:
    """Acyclic entry-to-sink paths, shortest first, at most ``limit``.

    With ``program`` given each path is tagged with per-path taint evidence;
    an empty list means the sink's function is unreachable.
    """
    if limit < 1:
        raise ValueError("limit must be >= 1")
    raws = _raw_paths(callgraph, sink.enclosing_function, limit)
    out = []
    for fns in raws:
        evidence = path_taint_evidence(program, fns, sink) if program is not None else False
        out.append(CallPath(fns, sink.id, evidence))
    return out


def select_call_path(paths) -> CallPath:
    """Taint-evidenced paths first, then shorter, then lexicographic function names."""
    paths = list(paths)
    if not paths:
        raise ValueError("no call paths to select from")
    return min(paths, key=CallPath.rank_key)


# -- path context --------------------------------------------------------------------

def expr_text(e) -> str:
    t = type(e)
    if t is A.Num:
        return str(e.value)
    if t is A.Str:
        return json.dumps(e.value)
    if t is A.Bool:
        return "true" if e.value else "false"
    if t is A.Null:
        return "null"
    if t is A.Name:
        return e.name
    if t is A.Unary:
        return e.op + expr_text(e.operand)
    if t is A.Binary:
        return f"{expr_text(e.left)} {e.op} {expr_text(e.right)}"
    if t is A.Index:
        return f"{expr_text(e.target)}[{expr_text(e.key)}]"
    if t is A.Call:
        return f"{e.callee}({', '.join(expr_text(a) for a in e.args)})"
    if t is A.ListLit:
        return "[" + ", ".join(expr_text(x) for x in e.items) + "]"
    if t is A.MapLit:
        return "{" + ", ".join(f"{expr_text(k)}: {expr_text(v)}" for k, v in e.pairs) + "}"
    return "?"


def _definitions(fn: A.FunctionDef) -> dict:
    defs = {}
    for node in A.walk(fn):
        if isinstance(node, A.Let):
            defs.setdefault(node.name, []).append(node.value)
        elif isinstance(node, A.Assign) and isinstance(node.target, A.Name) and node.target.kind == "local":
            defs.setdefault(node.target.name, []).append(node.value)
    return defs


def _stores(fn: A.FunctionDef) -> dict:
    """``m[k] = v`` assignments per container variable, in source order."""
    out = {}
    for node in A.walk(fn):
        if isinstance(node, A.Assign) and isinstance(node.target, A.Index) \
                and isinstance(node.target.target, A.Name):
            out.setdefault(node.target.target.name, []).append((node.target.key, node.value))
    return out


def _terminates(body) -> bool:
    return bool(body) and isinstance(body[-1], (A.Return, A.Break, A.Continue))


def _contains_site(node, site: int) -> bool:
    return any(isinstance(n, A.Call) and n.site == site for n in A.walk(node))


def _guards(body, site, out):
    """Collect (cond node, required truth, is_loop) on the way to ``site``."""
    for stmt in body:
        if not isinstance(stmt, (A.If, A.While)):
            if _contains_site(stmt, site):
                return True
            continue
        if isinstance(stmt, A.If):
            in_then = any(_contains_site(s, site) for s in stmt.then)
            in_else = bool(stmt.orelse) and any(_contains_site(s, site) for s in stmt.orelse)
            in_cond = _contains_site(stmt.cond, site)
            if in_cond:
                return True
            if in_then:
                out.append((stmt.cond, True, False))
                return _guards(stmt.then, site, out)
            if in_else:
                out.append((stmt.cond, False, False))
                return _guards(stmt.orelse, site, out)
            if _terminates(stmt.then) and not (stmt.orelse and _terminates(stmt.orelse)):
                out.append((stmt.cond, False, False))
            elif stmt.orelse and _terminates(stmt.orelse) and not _terminates(stmt.then):
                out.append((stmt.cond, True, False))
            continue
        if isinstance(stmt, A.While):
            if _contains_site(stmt.cond, site):
                return True
            if any(_contains_site(s, site) for s in stmt.body):
                out.append((stmt.cond, True, True))
                return _guards(stmt.body, site, out)
            continue
    return False


class _ContextBuilder:
    def __init__(self, program: A.TargetProgram, path: CallPath, taint: Optional[TaintResult]):
        self.program = program
        self.path = path
        self.taint = taint
        self.functions = [program.functions[f] for f in path.functions]
        self.hop_sites = []
        for i, fn in enumerate(self.functions):
            if i + 1 < len(self.functions):
                nxt = self.functions[i + 1].name
                sites = [n.site for n in A.walk(fn) if isinstance(n, A.Call) and n.callee == nxt]
                if not sites:
                    # reached through a function value
                    sites = [n.site for n in A.walk(fn) if isinstance(n, A.Call) and n.kind == "indirect"]
                self.hop_sites.append(min(sites) if sites else None)
            else:
                self.hop_sites.append(path.sink)
        self.slots = []
        self.slot_of_site = {}
        self._plan(0)

    # consumption plan: path order with non-path helper calls spliced in place
    def _consumptions(self, fn: A.FunctionDef, depth: int):
        out = []
        for node in sorted((n for n in A.walk(fn) if isinstance(n, A.Call)), key=lambda c: c.site):
            if node.kind == "builtin" and node.callee in INPUT_SOURCES:
                out.append((fn, node))
            elif node.kind == "direct" and depth < 3 and node.callee not in self.path.functions:
                out.extend(self._consumptions(self.program.functions[node.callee], depth + 1))
        return out

    def _add_slot(self, fn, call):
        target = None
        for node in A.walk(fn):
            if isinstance(node, A.Let) and node.value is call:
                target = node.name
        size = None
        if call.callee in ("consume_string", "consume_bytes") and len(call.args) > 1 \
                and isinstance(call.args[1], A.Num):
            size = call.args[1].value
        elif call.callee == "consume_u32":
            size = 4
        self.slot_of_site[call.site] = len(self.slots)
        self.slots.append({
            "slot": len(self.slots), "function": fn.name, "site": call.site,
            "builtin": call.callee, "max": size, "target": target, "line": call.line,
            "in_loop": self.in_loop(fn, call.site) or fn.name != self.functions[0].name,
        })

    @staticmethod
    def in_loop(fn: A.FunctionDef, site: int) -> bool:
        return any(isinstance(n, A.While) and any(_contains_site(s, site) for s in n.body)
                   for n in A.walk(fn))

    def _plan(self, i):
        if i >= len(self.functions):
            return
        fn = self.functions[i]
        hop = self.hop_sites[i] if i + 1 < len(self.functions) else None
        items = self._consumptions(fn, 0)
        before = [c for c in items if hop is None or c[1].site < hop]
        after = [c for c in items if hop is not None and c[1].site > hop]
        for owner, call in before:
            self._add_slot(owner, call)
        if hop is not None:
            self._plan(i + 1)
        for owner, call in after:
            self._add_slot(owner, call)

    # structured expressions with local definitions and parameter bindings inlined
    def expr(self, e, idx: int, depth: int = 0):
        fn = self.functions[idx]
        t = type(e)
        if depth > MAX_EXPR_DEPTH:
            return {"op": "opaque", "text": expr_text(e)}
        if t in (A.Num, A.Str, A.Bool):
            return {"op": "lit", "value": e.value}
        if t is A.Null:
            return {"op": "lit", "value": None}
        if t is A.Name:
            if e.kind == "func":
                return {"op": "func", "name": e.name}
            if e.kind == "global":
                g = next((g for g in self.program.globals if g.name == e.name), None)
                out = {"op": "global", "name": e.name}
                if g is not None:
                    out["def"] = self.expr(g.value, idx, depth + 1)
                return out
            if e.name in fn.params:
                out = {"op": "param", "name": e.name, "index": fn.params.index(e.name)}
                if idx > 0 and self.hop_sites[idx - 1] is not None:
                    call = self.program.calls[self.hop_sites[idx - 1]]
                    pos = fn.params.index(e.name)
                    if pos < len(call.args):
                        out["bound"] = self.expr(call.args[pos], idx - 1, depth + 1)
                return out
            defs = _definitions(fn).get(e.name, [])
            out = {"op": "var", "name": e.name}
            if self.taint is not None:
                out["tainted"] = self.taint.is_tainted(fn.name, e.name)
            if len(defs) == 1:
                out["def"] = self.expr(defs[0], idx, depth + 1)
            stores = _stores(fn).get(e.name)
            if stores:
                out["stores"] = [{"key": self.expr(k, idx, depth + 1), "value": self.expr(v, idx, depth + 1)}
                                 for k, v in stores]
            return out
        if t is A.Call:
            if e.kind == "builtin" and e.callee in INPUT_SOURCES:
                return {"op": "consume", "builtin": e.callee, "site": e.site,
                        "slot": self.slot_of_site.get(e.site)}
            return {"op": "call", "name": e.callee, "kind": e.kind,
                    "args": [self.expr(a, idx, depth + 1) for a in e.args]}
        if t is A.Binary:
            return {"op": e.op, "lhs": self.expr(e.left, idx, depth + 1),
                    "rhs": self.expr(e.right, idx, depth + 1)}
        if t is A.Unary:
            return {"op": "not" if e.op == "!" else "neg", "arg": self.expr(e.operand, idx, depth + 1)}
        if t is A.Index:
            return {"op": "index", "target": self.expr(e.target, idx, depth + 1),
                    "key": self.expr(e.key, idx, depth + 1)}
        if t is A.ListLit:
            return {"op": "list", "items": [self.expr(x, idx, depth + 1) for x in e.items]}
        if t is A.MapLit:
            return {"op": "map", "pairs": [[self.expr(k, idx, depth + 1), self.expr(v, idx, depth + 1)]
                                           for k, v in e.pairs]}
        return {"op": "opaque", "text": expr_text(e)}

    def function_bundle(self, idx: int) -> dict:
        fn = self.functions[idx]
        target_site = self.hop_sites[idx]
        guarding = []
        if target_site is not None:
            _guards(fn.body, target_site, guarding)
        required = {id(cond): (req, loop) for cond, req, loop in guarding}
        guards = []
        for node in A.walk(fn):
            if isinstance(node, (A.If, A.While)):
                req, loop = required.get(id(node.cond), (None, isinstance(node, A.While)))
                guards.append({
                    "line": node.line,
                    "kind": "while" if isinstance(node, A.While) else "if",
                    "text": expr_text(node.cond),
                    "cond": self.expr(node.cond, idx),
                    "required": req,
                })
        guards.sort(key=lambda g: g["line"])
        literals = [
            {"value": lit.value, "line": lit.line, "compared": lit.compared}
            for lit in self.program.literals if lit.function == fn.name
        ]
        consumptions = [s for s in self.slots if s["function"] == fn.name]
        return {
            "name": fn.name,
            "params": list(fn.params),
            "source": fn.source,
            "literals": literals,
            "consumptions": consumptions,
            "guards": guards,
            "next_hop_site": target_site if idx + 1 < len(self.functions) else None,
        }

    def build(self) -> dict:
        sink_call = self.program.calls[self.path.sink]
        fn_name, line = self.program.source_map[self.path.sink]
        return {
            "path": list(self.path.functions),
            "taint_evidence": self.path.taint_evidence,
            "sink": {
                "site": self.path.sink, "builtin": sink_call.callee, "function": fn_name,
                "line": line, "text": expr_text(sink_call),
                "args": [self.expr(a, len(self.functions) - 1) for a in sink_call.args],
            },
            "functions": [self.function_bundle(i) for i in range(len(self.functions))],
            "input_plan": list(self.slots),
            "loop_harness": self.hop_sites[0] is not None and len(self.functions) > 1
            and self.in_loop(self.functions[0], self.hop_sites[0]),
        }


def path_context(program: A.TargetProgram, path: CallPath, taint: Optional[TaintResult] = None) -> dict:
    """Per-function context along ``path``: source, literals, input consumption
    in order, and branch conditions with the truth value each must take for
    execution to continue toward the next hop (``None`` when unrelated)."""
    return _ContextBuilder(program, path, taint).build()


@dataclass
class StaticAnalysis:
    """Call graph plus taint results for one program, with per-sink paths."""

    program: A.TargetProgram
    callgraph: CallGraph
    taint: TaintResult
    path_limit: int = DEFAULT_PATH_LIMIT
    _paths: dict = field(default_factory=dict)

    @classmethod
    def run(cls, program: A.TargetProgram, sinks=(), path_limit: int = DEFAULT_PATH_LIMIT):
        cg = build_callgraph(program)
        return cls(program, cg, taint_analyze(program, cg, sinks), path_limit)

    def paths(self, sink) -> list:
        if sink.id not in self._paths:
            self._paths[sink.id] = enumerate_paths(self.callgraph, sink, self.path_limit, self.program)
        return self._paths[sink.id]

    def context(self, path: CallPath) -> dict:
        return path_context(self.program, path, self.taint)

    def to_dict(self, sinks=()):
        return {
            "callgraph": self.callgraph.to_dict(),
            "paths": {str(s.id): [p.to_dict() for p in self.paths(s)] for s in sinks},
        }
