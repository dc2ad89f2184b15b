"""Exploitation agent: turn beep seeds into sanitizer violations.

Beeps are grouped by stack hash and scheduled fairly: always a group with
the fewest schedulings, ties broken by key, and never past the group's
limit. Each scheduled beep gets up to 30 oracle attempts; after every
attempt a short no-coverage fuzzing run polishes the candidates, which are
then synced back to the fuzzer.
"""

from __future__ import annotations

import base64
import logging
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .analysis import expr_text
from .fuzzer import BeepSeed, FuzzConfig, NoCovResult, no_cov_fuzz
from .minij import Limits, execute
from .minij.sanitizers import rule_for
from .oracle.dsl import DSLError, run_generator
from .oracle.types import EXPLOIT, OracleError, OracleRequest

log = logging.getLogger(__name__)

MAX_ATTEMPTS = 30


@dataclass
class BeepGroup:
    key: str  # stack hash
    sink_id: int
    members: list = field(default_factory=list)
    schedule_count: int = 0
    max_schedule: int = 1

    @property
    def saturated(self) -> bool:
        return self.schedule_count >= self.max_schedule


@dataclass
class BeepStore:
    max_schedule: int = 1
    groups: dict = field(default_factory=dict)
    seen: set = field(default_factory=set)
    quarantine: list = field(default_factory=list)  # (beep, reason)

    def __len__(self):
        return sum(len(g.members) for g in self.groups.values())

    def pending(self, skip_sinks=()) -> bool:
        return any(not g.saturated and g.sink_id not in skip_sinks for g in self.groups.values())


def beep_reproduces(program, beep: BeepSeed, limits: Limits = Limits()) -> bool:
    trace = execute(program, beep.input, limits)
    return any(h.site == beep.sink_id and h.stack == beep.stack_trace for h in trace.sink_hits)


def update_beep_seeds(store: BeepStore, inbound, program=None, limits: Limits = Limits()) -> BeepStore:
    """Fold delivered beeps into ``store``.

    Duplicate deliveries (same sink, stack hash and input hash) are ignored.
    With ``program`` given, each new beep is replayed first and quarantined
    when it no longer reaches its sink along the recorded stack.
    """
    for beep in inbound:
        key = beep.key()
        if key in store.seen:
            continue
        store.seen.add(key)
        if program is not None and not beep_reproduces(program, beep, limits):
            store.quarantine.append((beep, "non-reproducing"))
            continue
        group = store.groups.get(beep.stack_hash)
        if group is None:
            group = store.groups[beep.stack_hash] = BeepGroup(beep.stack_hash, beep.sink_id,
                                                              max_schedule=store.max_schedule)
        group.members.append(beep)
    return store


def schedule_beep_seed(store: BeepStore, rng: random.Random, skip_sinks=()):
    """Pick (group, beep) or None when every group is saturated."""
    open_groups = [g for g in store.groups.values() if not g.saturated and g.sink_id not in skip_sinks]
    if not open_groups:
        return None
    low = min(g.schedule_count for g in open_groups)
    group = min((g for g in open_groups if g.schedule_count == low), key=lambda g: g.key)
    group.schedule_count += 1
    return group, rng.choice(group.members)


def beep_context(program, beep: BeepSeed, sink_info=None) -> dict:
    """The bundle the oracle sees: input, stack, sink details and the full
    source of every function on the stack."""
    call = program.calls[beep.sink_id]
    fn_name, line = program.source_map[beep.sink_id]
    idx = getattr(getattr(sink_info, "spec", None), "tainted_param_index", 0)
    frames = []
    for name, site in beep.stack_trace:
        fn = program.functions.get(name)
        frames.append({"function": name, "site": site,
                       "line": program.source_map[site][1] if site in program.source_map else None,
                       "source": fn.source if fn is not None else ""})
    return {
        "input_b64": base64.b64encode(beep.input).decode("ascii"),
        "stack": [{"fn": f, "site": s} for f, s in beep.stack_trace],
        "sink": {"site": beep.sink_id, "builtin": call.callee, "function": fn_name, "line": line,
                 "text": expr_text(call), "args": list(beep.args), "tainted_param_index": idx},
        "cwe": beep.cwe,
        "condition": rule_for(call.callee).description,
        "frames": frames,
    }


@dataclass
class ExploitCandidate:
    attempt: int
    dsl: str
    data: bytes
    verdict: dict


@dataclass
class ExploitAttempt:
    beep: BeepSeed
    group_key: str
    attempts: int = 0
    candidates: list = field(default_factory=list)
    outcome: str = "failed"  # exploited | failed
    exploited_by: Optional[str] = None  # agent | nocov
    exploit_input: Optional[bytes] = None
    nocov_executions: int = 0


def _feedback(trace, sink_id: int) -> dict:
    hit = trace.first_hit(sink_id)
    return {
        "verdict": trace.verdict.to_dict(),
        "sink_hit": hit is not None,
        "sink_args": list(hit.args) if hit else [],
        "entered": [list(e) for e in trace.entered_functions[-20:]],
    }


def generate_exploit(program, beep: BeepSeed, oracle, group_key: str = "", sink_info=None,
                     max_attempts: int = MAX_ATTEMPTS, limits: Limits = Limits(),
                     after_attempt: Optional[Callable] = None, log_records: Optional[list] = None,
                     max_size: int = 1 << 20) -> ExploitAttempt:
    """Iterate the oracle on one beep until a candidate violates the sink's
    sanitizer or the attempts run out.

    ``after_attempt(result, candidates)`` runs after every attempt (the
    no-coverage hook) and may return a NoCovResult; a found input ends the
    loop as a no-coverage exploit.
    """
    if not 1 <= max_attempts <= MAX_ATTEMPTS:
        raise ValueError(f"max_attempts must be within 1..{MAX_ATTEMPTS}")
    ctx = beep_context(program, beep, sink_info)
    result = ExploitAttempt(beep, group_key or beep.stack_hash)
    feedback = None
    records = log_records if log_records is not None else []
    while result.attempts < max_attempts:
        attempt = result.attempts
        result.attempts += 1
        record = {"group_key": result.group_key, "beep_hash": beep.input_hash, "attempt": attempt,
                  "dsl_source": None, "verdict": None, "nocov_result": None}
        try:
            resp = oracle.ask(OracleRequest(EXPLOIT, ctx, feedback, attempt=attempt, cap=max_attempts))
            if resp.no_progress or not resp.dsl:
                raise OracleError(f"no progress: {resp.report or 'empty generator'}")
            data = run_generator(resp.dsl, max_size=max_size)
        except (OracleError, DSLError) as err:
            feedback = {"error": str(err)}
            record["verdict"] = {"kind": "error", "detail": str(err)}
            records.append(record)
            continue
        trace = execute(program, data, limits)
        result.candidates.append(ExploitCandidate(attempt, resp.dsl, data, trace.verdict.to_dict()))
        record.update(dsl_source=resp.dsl, verdict=trace.verdict.to_dict())
        hit = trace.violated and trace.verdict.site == beep.sink_id
        if hit:
            result.outcome, result.exploited_by, result.exploit_input = "exploited", "agent", data
        if after_attempt is not None:
            nc = after_attempt(result, [c.data for c in result.candidates])
            if nc is not None:
                result.nocov_executions += nc.executions
                record["nocov_result"] = {"found": nc.found is not None, "executions": nc.executions}
                if not hit and nc.found is not None:
                    result.outcome, result.exploited_by, result.exploit_input = "exploited", "nocov", nc.found
        records.append(record)
        if result.outcome == "exploited":
            break
        feedback = _feedback(trace, beep.sink_id)
    return result


class ExploitationAgent:
    """Consumes beeps, schedules one beep per step, and reports candidates
    back through ``sync`` as ``(data, provenance)`` pairs."""

    def __init__(self, program, oracle, sinks=(), seed: int = 0, max_schedule: int = 1,
                 max_attempts: int = MAX_ATTEMPTS, nocov_budget: Optional[int] = 20_000,
                 fuzz_config: FuzzConfig = FuzzConfig(), sync: Optional[Callable] = None,
                 limits: Limits = Limits()):
        self.program = program
        self.oracle = oracle
        self.sinks = {s.id: s for s in sinks}
        self.rng = random.Random(seed)
        self.seed = seed
        self.store = BeepStore(max_schedule)
        self.max_attempts = max_attempts
        self.nocov_budget = nocov_budget
        self.fuzz_config = fuzz_config
        self.sync = sync
        self.limits = limits
        self.log = []
        self.results = []
        self.nocov_runs = 0

    def receive(self, beeps):
        update_beep_seeds(self.store, beeps, self.program, self.limits)

    def _nocov(self, beep):
        if not self.nocov_budget:
            return None

        def hook(result, candidates):
            self.nocov_runs += 1
            nc = no_cov_fuzz(self.program, beep, candidates, self.nocov_budget,
                             seed=self.seed * 1_000_003 + self.nocov_runs, config=self.fuzz_config)
            if self.sync is not None:
                self.sync([(d, "nocov") for d in nc.corpus])
                if nc.found is not None:
                    self.sync([(nc.found, "nocov")])
            return nc
        return hook

    def step(self, skip_sinks=()) -> Optional[ExploitAttempt]:
        pick = schedule_beep_seed(self.store, self.rng, skip_sinks)
        if pick is None:
            return None
        group, beep = pick
        result = generate_exploit(self.program, beep, self.oracle, group.key, self.sinks.get(beep.sink_id),
                                  self.max_attempts, self.limits, self._nocov(beep), self.log)
        if self.sync is not None:
            self.sync([(c.data, "exploitation_agent") for c in result.candidates])
        self.results.append(result)
        return result


def exploit_loop(agent: ExploitationAgent, inbound=None, skip_sinks=()):
    """Drain ``inbound`` into the store and run until every group is saturated."""
    while True:
        if inbound is not None:
            agent.receive(inbound.drain())
        result = agent.step(skip_sinks)
        if result is None:
            return
        yield result
