"""Exploration agent: iteratively generate inputs that reach one sink.

Each sink gets a single call path, chosen once. Every generated input is
pushed to the fuzzer's inbound channel whether or not it reaches the sink;
the trace of a miss is summarized into feedback for the next attempt.
"""

from __future__ import annotations

import base64
import logging
from dataclasses import dataclass, field
from typing import Optional

from .analysis import StaticAnalysis, select_call_path
from .minij import Limits, execute
from .oracle.dsl import DSLError, run_generator
from .oracle.types import EXPLORE, OracleError, OracleRequest

log = logging.getLogger(__name__)

MAX_ITERATIONS = 30


@dataclass(frozen=True)
class ExploreConfig:
    max_iterations: int = MAX_ITERATIONS
    max_input: int = 1 << 20

    def __post_init__(self):
        if not 1 <= self.max_iterations <= MAX_ITERATIONS:
            raise ValueError(f"max_iterations must be within 1..{MAX_ITERATIONS}")


@dataclass(frozen=True)
class ProgressReport:
    deepest_index: int
    diverged_at: Optional[int]  # call site of the first hop not taken
    trace_excerpt: tuple = ()

    def to_dict(self) -> dict:
        return {"deepest_index": self.deepest_index, "diverged_at": self.diverged_at,
                "trace_excerpt": [list(e) for e in self.trace_excerpt]}


def analyze_progress(trace, path_functions, hop_sites=None, excerpt: int = 24) -> ProgressReport:
    """Deepest k such that path_functions[0..k] were entered in path order.

    The entry function counts as reached even when the trace is empty.
    """
    entered = [e[0] if isinstance(e, (tuple, list)) else e for e in trace.entered_functions]
    j = 0
    for name in entered:
        if j < len(path_functions) and name == path_functions[j]:
            j += 1
    deepest = max(j - 1, 0)
    diverged = None
    if hop_sites is not None and deepest < len(hop_sites):
        diverged = hop_sites[deepest]
    return ProgressReport(deepest, diverged, tuple(tuple(e) if isinstance(e, list) else e
                                                   for e in trace.entered_functions[:excerpt]))


def validate_input(program, data: bytes, sink_id: int, limits: Limits = Limits()):
    """(reached, trace) with a breakpoint on the sink call site."""
    trace = execute(program, data, limits, trace_spec={sink_id})
    return trace.breakpoints.get(sink_id, False), trace


def generate_input(oracle, context: dict, feedback, attempt: int, cap: int, max_size: int):
    """Ask for one generator and run it. Returns (dsl source, bytes)."""
    resp = oracle.ask(OracleRequest(EXPLORE, context, feedback, attempt=attempt, cap=cap))
    if resp.no_progress or not resp.dsl:
        raise OracleError(f"no progress: {resp.report or 'empty generator'}")
    return resp.dsl, run_generator(resp.dsl, max_size=max_size)


@dataclass
class GeneratedInput:
    attempt: int
    dsl: str
    data: bytes
    reached: bool
    deepest_index: int


@dataclass
class ExplorationState:
    sink_id: int
    path: Optional[tuple] = None
    context: Optional[dict] = None
    hop_sites: tuple = ()
    attempts: int = 0
    feedback: Optional[dict] = None
    generated: list = field(default_factory=list)
    status: str = "running"  # running | reached | exhausted
    reason: str = ""
    reached_input: Optional[bytes] = None

    @property
    def done(self) -> bool:
        return self.status != "running"


class ExplorationTask:
    """One sink's exploration, advanced one oracle attempt at a time."""

    def __init__(self, program, sink, analysis: StaticAnalysis, oracle, channel=None,
                 config: ExploreConfig = ExploreConfig(), log_records: Optional[list] = None,
                 limits: Limits = Limits()):
        self.program = program
        self.sink = sink
        self.oracle = oracle
        self.channel = channel
        self.config = config
        self.limits = limits
        self.log = log_records if log_records is not None else []
        self.state = ExplorationState(sink.id)
        self.last_trace = None
        paths = analysis.paths(sink)
        if not paths:
            self.state.status, self.state.reason = "exhausted", "no-path"
            return
        path = select_call_path(paths)
        self.state.path = path.functions
        self.state.context = analysis.context(path)
        self.state.hop_sites = tuple(_hop_sites(self.state.context, path))

    def step(self) -> ExplorationState:
        st = self.state
        if st.done:
            return st
        attempt = st.attempts
        st.attempts += 1
        record = {"sink_id": st.sink_id, "attempt": attempt, "dsl_source": None,
                  "bytes_b64": None, "reached": False, "deepest_index": None}
        try:
            dsl, data = generate_input(self.oracle, st.context, st.feedback, attempt,
                                       self.config.max_iterations, self.config.max_input)
        except (OracleError, DSLError) as err:
            st.feedback = {"error": str(err)}
            record["error"] = str(err)
            self.log.append(record)
            self._check_exhausted()
            return st
        reached, trace = validate_input(self.program, data, st.sink_id, self.limits)
        self.last_trace = trace
        progress = analyze_progress(trace, st.path, st.hop_sites)
        st.generated.append(GeneratedInput(attempt, dsl, data, reached, progress.deepest_index))
        if self.channel is not None:
            self.channel.send((data, "exploration_agent"))
        record.update(dsl_source=dsl, bytes_b64=base64.b64encode(data).decode("ascii"),
                      reached=reached, deepest_index=progress.deepest_index)
        self.log.append(record)
        if reached:
            st.status, st.reached_input = "reached", data
            return st
        st.feedback = dict(progress.to_dict(), verdict=trace.verdict.to_dict(),
                           path=list(st.path))
        self._check_exhausted()
        return st

    def _check_exhausted(self):
        if self.state.attempts >= self.config.max_iterations:
            self.state.status, self.state.reason = "exhausted", "iterations"

    def run(self) -> ExplorationState:
        while not self.state.done:
            self.step()
        return self.state


def _hop_sites(context: dict, path) -> list:
    hops = [fn.get("next_hop_site") for fn in context.get("functions", [])]
    if hops:
        hops[-1] = path.sink
    return hops


def explore_sink(program, sink, analysis: StaticAnalysis, oracle, channel=None,
                 config: ExploreConfig = ExploreConfig(), log_records: Optional[list] = None,
                 limits: Limits = Limits()) -> ExplorationState:
    """Run exploration for ``sink`` to completion: reached or exhausted."""
    return ExplorationTask(program, sink, analysis, oracle, channel, config, log_records, limits).run()
