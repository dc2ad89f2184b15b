"""Sink detection: extract every CWE-tagged call site, then filter.

Stages run in order: invalid (constant argument or test code), unreachable
(call-graph reachability from the harness, with a fallback that restores
the previous set when everything would be dropped) and unexploitable (a
two-call oracle protocol that drops only with evidence). The invalid stage
always runs; later stages are skipped once the candidate count is at or
below the threshold.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

from .analysis import StaticAnalysis, expr_text, select_call_path
from .minij import ast as A
from .minij.catalog import INPUT_SOURCES
from .minij.sanitizers import rule_for
from .oracle.types import FILTER, OracleError, OracleRequest
from .sinks import SinkCallSite, check_cwes, load_sink_database

log = logging.getLogger(__name__)

STAGES = ("invalid", "unreachable", "unexploitable")


@dataclass(frozen=True)
class FilterConfig:
    threshold: int = 10
    test_name_marker: str = "Test"
    test_path_marker: str = "/test/"

    def __post_init__(self):
        if self.threshold < 1:
            raise ValueError("threshold must be >= 1")


# -- constant propagation -------------------------------------------------------

# builtins whose result depends only on their arguments
_IMPURE = INPUT_SOURCES | {"remaining", "push"}


class _Constness:
    """Literal-only constant propagation over one function's locals."""

    def __init__(self, fn: A.FunctionDef):
        self.fn = fn
        self.defs = {}
        self.mutated = set()
        for node in A.walk(fn):
            if isinstance(node, A.Let):
                self.defs.setdefault(node.name, []).append(node.value)
            elif isinstance(node, A.Assign):
                if isinstance(node.target, A.Name):
                    self.defs.setdefault(node.target.name, []).append(node.value)
                else:
                    self._mutate(node.target, node.value)
            elif isinstance(node, A.Call) and node.callee == "push" and node.kind == "builtin":
                self._mutate(node.args[0], node.args[1])
        self.cache = {}

    def _mutate(self, target, value):
        while isinstance(target, A.Index):
            target = target.target
        if isinstance(target, A.Name):
            self.defs.setdefault(target.name, []).append(value)

    def var(self, name: str, visiting: frozenset) -> bool:
        if name in self.fn.params or name not in self.defs:
            return False
        if name in visiting:
            return True  # cycles add no non-literal source
        if name not in self.cache:
            inner = visiting | {name}
            self.cache[name] = all(self.expr(d, inner) for d in self.defs[name])
        return self.cache[name]

    def expr(self, e, visiting: frozenset = frozenset()) -> bool:
        t = type(e)
        if t in (A.Num, A.Str, A.Bool, A.Null):
            return True
        if t is A.Name:
            return e.kind == "local" and self.var(e.name, visiting)
        if t is A.Call:
            return e.kind == "builtin" and e.callee not in _IMPURE and \
                all(self.expr(a, visiting) for a in e.args)
        if t is A.MapLit:
            return all(self.expr(k, visiting) and self.expr(v, visiting) for k, v in e.pairs)
        return all(self.expr(c, visiting) for c in A.children(e))


def argument_class(program: A.TargetProgram, site: SinkCallSite) -> str:
    call = program.calls[site.id]
    idx = site.spec.tainted_param_index
    if idx >= len(call.args):
        return "constant"
    fn = program.functions[site.enclosing_function]
    return "constant" if _Constness(fn).expr(call.args[idx]) else "variable"


# -- stages -------------------------------------------------------------------------

def extract_sinks(program: A.TargetProgram, cwes, database=None) -> list:
    """Every call site of a sink builtin for the requested CWEs, in source order."""
    cwes = set(check_cwes(cwes))
    specs = {s.builtin: s for s in (database or load_sink_database()) if s.cwe in cwes}
    out = []
    for site in sorted(program.calls):
        call = program.calls[site]
        if call.kind != "builtin" or call.callee not in specs:
            continue
        fn, line = program.source_map[site]
        sc = SinkCallSite(site, specs[call.callee], fn, (program.path, line))
        sc.arg_class = argument_class(program, sc)
        out.append(sc)
    return out


def filter_invalid(sites, program: A.TargetProgram, config: FilterConfig = FilterConfig()):
    kept, dropped = [], []
    for s in sites:
        if s.arg_class == "constant":
            reason = "constant-argument"
        elif config.test_name_marker in s.enclosing_function or config.test_path_marker in s.location[0]:
            reason = "test-code"
        else:
            s.record("invalid", "keep", "variable-argument")
            kept.append(s)
            continue
        s.record("invalid", "drop", reason)
        s.record("final", "drop", reason)
        dropped.append(s)
    return kept, dropped


def filter_unreachable(sites, callgraph, entry: Optional[str] = None):
    reachable = callgraph.reachable(entry)
    kept = [s for s in sites if s.enclosing_function in reachable]
    if not kept and sites:
        for s in sites:
            s.record("unreachable", "keep", "fallback-applied")
        return list(sites), []
    dropped = []
    for s in sites:
        if s.enclosing_function in reachable:
            s.record("unreachable", "keep", "reachable")
        else:
            s.record("unreachable", "drop", "unreachable")
            s.record("final", "drop", "unreachable")
            dropped.append(s)
    return kept, dropped


def filter_context(program: A.TargetProgram, site: SinkCallSite, analysis: StaticAnalysis) -> dict:
    """What the oracle sees about one sink: the sink, its function, and the best path."""
    call = program.calls[site.id]
    fn = program.functions[site.enclosing_function]
    paths = analysis.paths(site)
    ctx = {
        "sink": {
            "id": site.id, "cwe": site.cwe, "builtin": site.builtin,
            "function": site.enclosing_function, "line": site.location[1],
            "text": expr_text(call), "condition": rule_for(site.builtin).description,
            "tainted": analysis.taint.sink_tainted.get(site.id, False),
        },
        "function_source": fn.source,
        "path": None,
    }
    if paths:
        ctx["path"] = analysis.context(select_call_path(paths))
    return ctx


def filter_unexploitable(sites, program: A.TargetProgram, oracle, config: FilterConfig = FilterConfig(),
                         analysis: Optional[StaticAnalysis] = None):
    sites = list(sites)
    if len(sites) <= config.threshold:
        for s in sites:
            s.record("unexploitable", "skip", "below-threshold")
        return sites, []
    if oracle is None:
        for s in sites:
            s.record("unexploitable", "skip", "no-oracle")
        return sites, []
    analysis = analysis or StaticAnalysis.run(program, sites)
    kept, dropped = [], []
    for s in sites:
        ctx = filter_context(program, s, analysis)
        try:
            report = oracle.ask(OracleRequest(FILTER, ctx, phase="report"))
            decision = oracle.ask(OracleRequest(FILTER, ctx, {"report": report.report}, phase="decision"))
        except (OracleError, ValueError) as err:
            log.warning("oracle failed on sink %d: %s", s.id, err)
            s.record("unexploitable", "keep", "oracle-error-keep")
            kept.append(s)
            continue
        if decision.decision == "drop":
            reason = f"evidence: {decision.evidence}"
            s.record("unexploitable", "drop", reason)
            s.record("final", "drop", reason)
            dropped.append(s)
        else:
            s.record("unexploitable", "keep", "no-evidence")
            kept.append(s)
    return kept, dropped


@dataclass
class SinkDetectionReport:
    sites: list
    counts: dict
    stages_run: list
    final: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "counts": dict(self.counts),
            "stages_run": list(self.stages_run),
            "final": [s.id for s in self.final],
            "sites": [s.to_dict() for s in self.sites],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def trails(self) -> dict:
        return {str(s.id): [list(v) for v in s.verdicts] for s in self.sites}


def detect(program: A.TargetProgram, cwes, oracle=None, config: FilterConfig = FilterConfig(),
           database=None) -> SinkDetectionReport:
    sites = extract_sinks(program, cwes, database)
    counts = {"extracted": len(sites), "invalid": 0, "unreachable": 0, "unexploitable": 0}
    stages = []
    kept, dropped = filter_invalid(sites, program, config)
    stages.append("invalid")
    counts["invalid"] = len(dropped)
    analysis = StaticAnalysis.run(program, kept)

    if len(kept) <= config.threshold:
        for s in kept:
            s.record("unreachable", "skip", "below-threshold")
    else:
        stages.append("unreachable")
        kept, dropped = filter_unreachable(kept, analysis.callgraph, program.harness_entry)
        counts["unreachable"] = len(dropped)

    if len(kept) > config.threshold and oracle is not None:
        stages.append("unexploitable")
    kept, dropped = filter_unexploitable(kept, program, oracle, config, analysis)
    counts["unexploitable"] = len(dropped)

    for s in kept:
        s.record("final", "keep", "retained")
    counts["final"] = len(kept)
    return SinkDetectionReport(sites, counts, stages, kept)
