"""Campaign driver: detection, then fuzzer and agents interleaved on one clock.

Components are stepped in a fixed round-robin so a campaign is a pure
function of its configuration, oracle transcript and seed. One round
("tick") is: merge inbound agent seeds into the fuzzer, one scheduled beep
for the exploitation agent, one fuzz batch per worker, then one attempt
for every live exploration task. An oracle round trip is slow next to a
fuzz execution, so a batch runs while exploration waits for its answer;
the exploitation agent sees each beep before the fuzzer mutates it.
Components talk only through the three channels.
"""

from __future__ import annotations

import base64
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .analysis import StaticAnalysis
from .detection import FilterConfig, detect
from .exploitation import MAX_ATTEMPTS, ExploitationAgent
from .exploration import MAX_ITERATIONS, ExplorationTask, ExploreConfig
from .fuzzer import BeepSeed, Channel, FuzzConfig, Fuzzer
from .minij import load_program
from .minij.errors import MiniJError
from .oracle import make_oracle
from .sinks import check_cwes
from .storage import atomic_write_json, atomic_write_text, write_jsonl

log = logging.getLogger(__name__)

REPORT_VERSION = 1

MODES = {
    "full": (True, True, True),
    "reachability_only": (True, True, False),
    "exploitation_only": (True, False, True),
    "agents_only": (False, True, True),
    "fuzzer_only": (True, False, False),
}
MODE_ALIASES = {"ro": "reachability_only", "xo": "exploitation_only", "af": "agents_only",
                "fuzzer": "fuzzer_only"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CampaignConfig:
    target: str
    cwes: tuple
    harness: str = "harness"
    oracle: str = "heuristic"
    oracle_params: dict = field(default_factory=dict)
    mode: str = "full"
    seed: int = 0
    budget_execs: int = 200_000
    wall_clock: Optional[float] = None  # seconds; breaks byte-level reproducibility when hit
    nocov_execs: int = 20_000
    exploration_iterations: int = MAX_ITERATIONS
    exploit_attempts: int = MAX_ATTEMPTS
    sink_threshold: int = 10
    schedule_limit: int = 1
    reload_interval: int = 1000
    workers: int = 1
    output_dir: Optional[str] = None
    # ablation toggles, normally set through ablation_modes
    fuzzer: bool = True
    exploration: bool = True
    exploitation: bool = True

    def __post_init__(self):
        for name in ("budget_execs", "nocov_execs", "exploration_iterations", "exploit_attempts",
                     "sink_threshold", "schedule_limit", "reload_interval", "workers"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.wall_clock is not None and self.wall_clock <= 0:
            raise ConfigError("wall_clock must be positive")
        if self.exploration_iterations > MAX_ITERATIONS or self.exploit_attempts > MAX_ATTEMPTS:
            raise ConfigError(f"iteration caps are at most {MAX_ITERATIONS}")
        if canonical_mode(self.mode) is None:
            raise ConfigError(f"unknown mode {self.mode!r}")

    @classmethod
    def from_dict(cls, raw: dict) -> "CampaignConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = sorted(set(raw) - known)
        if extra:
            raise ConfigError(f"unknown config key(s): {', '.join(extra)}")
        raw = dict(raw)
        if isinstance(raw.get("cwes"), str):
            raw["cwes"] = raw["cwes"].split(",")
        raw["cwes"] = tuple(raw.get("cwes", ()))
        return ablation_modes(cls(**raw))

    def public(self) -> dict:
        """Config as recorded in report.json: no output location."""
        d = dataclasses.asdict(self)
        d.pop("output_dir")
        d["cwes"] = list(self.cwes)
        return d


def canonical_mode(mode: str) -> Optional[str]:
    mode = MODE_ALIASES.get(mode, mode)
    return mode if mode in MODES else None


def ablation_modes(config: CampaignConfig) -> CampaignConfig:
    """Set the component toggles from ``config.mode``."""
    mode = canonical_mode(config.mode)
    if mode is None:
        raise ConfigError(f"unknown mode {config.mode!r}")
    fz, ex, xp = MODES[mode]
    return dataclasses.replace(config, mode=mode, fuzzer=fz, exploration=ex, exploitation=xp)


# -- lifecycle ------------------------------------------------------------------------

_AGENT = {"exploration_agent": "agent", "exploitation_agent": "agent", "nocov": "nocov",
          "fuzzer": "fuzzer", "user-seed": "fuzzer"}


@dataclass
class SinkRecord:
    site: object  # SinkCallSite
    retained: bool
    reached: Optional[dict] = None
    exploited: Optional[dict] = None

    @property
    def status(self) -> str:
        if self.exploited:
            return "exploited"
        return "reached_only" if self.reached else "not_reached"

    def mark_reached(self, by: str, tick: int, data: bytes):
        if self.reached is None:
            self.reached = {"by": by, "tick": tick, "input_b64": _b64(data)}

    def mark_exploited(self, by: str, tick: int, data: bytes, reach_by: str):
        if self.exploited is None:
            self.mark_reached(reach_by, tick, data)
            self.exploited = {"by": by, "tick": tick, "input_b64": _b64(data)}

    def to_dict(self) -> dict:
        s = self.site
        return {
            "id": s.id, "cwe": s.cwe, "builtin": s.builtin, "function": s.enclosing_function,
            "line": s.location[1], "verdicts": [list(v) for v in s.verdicts],
            "retained": self.retained, "status": self.status if self.retained else "filtered",
            "reached": self.reached, "exploited": self.exploited,
        }


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


@dataclass
class CampaignReport:
    config: CampaignConfig
    detection: object  # SinkDetectionReport
    records: dict  # site id -> SinkRecord
    ticks: int = 0
    fuzz_executions: int = 0
    nocov_executions: int = 0
    oracle_usage: dict = field(default_factory=dict)
    stop_reason: str = ""
    partial: bool = False
    failures: list = field(default_factory=list)
    corpus_manifest: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    beeps: list = field(default_factory=list)
    drained_beeps: list = field(default_factory=list)
    exploration_log: list = field(default_factory=list)
    exploitation_log: list = field(default_factory=list)

    def retained(self) -> list:
        return [r for r in self.records.values() if r.retained]

    def aggregates(self) -> dict:
        counts = {"not_reached": 0, "reached_only": 0, "exploited": 0}
        for r in self.retained():
            counts[r.status] += 1
        return counts

    def sinks_with(self, status: str) -> set:
        return {r.site.id for r in self.retained() if r.status == status}

    def exploited(self) -> set:
        return self.sinks_with("exploited")

    def reached(self) -> set:
        return {r.site.id for r in self.retained() if r.reached}

    def to_dict(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "config": self.config.public(),
            "detection": {"counts": self.detection.counts, "stages_run": self.detection.stages_run},
            "sinks": [self.records[k].to_dict() for k in sorted(self.records)],
            "aggregates": self.aggregates(),
            "ticks": self.ticks,
            "fuzz_executions": self.fuzz_executions,
            "nocov_executions": self.nocov_executions,
            "corpus_size": len(self.corpus_manifest),
            "violations": len(self.violations),
            "beeps": len(self.beeps),
            "oracle_usage": self.oracle_usage,
            "stop_reason": self.stop_reason,
            "partial": self.partial,
            "failures": list(self.failures),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# -- the campaign ---------------------------------------------------------------------

def run_campaign(config: CampaignConfig, oracle=None, program=None) -> CampaignReport:
    """Run one campaign. ``oracle`` overrides ``config.oracle``; ``program``
    skips loading ``config.target``."""
    config = ablation_modes(config)
    cwes = check_cwes(config.cwes)
    if program is None:
        try:
            program = load_program(config.target, harness=config.harness)
        except (OSError, MiniJError) as err:
            raise ConfigError(f"cannot load target {config.target}: {err}") from err
    try:
        program.entry()
    except MiniJError as err:
        raise ConfigError(str(err)) from err
    if oracle is None and (config.exploration or config.exploitation or config.sink_threshold):
        oracle = make_oracle(config.oracle, config.oracle_params)
    out = Path(config.output_dir) if config.output_dir else None

    detection = detect(program, cwes, oracle, FilterConfig(threshold=config.sink_threshold))
    final = detection.final
    finals = {s.id for s in final}
    records = {s.id: SinkRecord(s, s.id in finals) for s in detection.sites}
    report = CampaignReport(config, detection, records)
    state = _Campaign(config, program, final, oracle, report, out)
    try:
        state.run()
    except KeyboardInterrupt:
        report.partial = True
        report.stop_reason = "interrupted"
    state.finish()
    if out is not None:
        emit_report(report, out)
    return report


class _Campaign:
    def __init__(self, config, program, sinks, oracle, report, out):
        self.config = config
        self.program = program
        self.sinks = sinks
        self.oracle = oracle
        self.report = report
        self.started = time.monotonic()
        self.seeds = Channel("exploration->fuzzer")
        self.beeps = Channel("fuzzer->exploitation")
        self.candidates = Channel("exploitation->fuzzer")
        self.tick = 0
        fconf = FuzzConfig(corpus_reload_interval=config.reload_interval)
        self.fuzzers = []
        if config.fuzzer:
            corpus_dir = out / "corpus" if out else None
            vdir = out / "violations" if out else None
            lead = Fuzzer(program, sinks, fconf, config.seed, corpus_dir, vdir, self.beeps)
            self.fuzzers = [lead] + [Fuzzer(program, sinks, fconf, config.seed + i, corpus_dir, vdir,
                                            self.beeps, peer=lead) for i in range(1, config.workers)]
        self.seen_beeps = 0
        self.seen_violations = 0
        self.tasks = []
        if config.exploration and sinks:
            analysis = StaticAnalysis.run(program, sinks)
            econf = ExploreConfig(config.exploration_iterations)
            chan = self.seeds if config.fuzzer else None
            self.tasks = [ExplorationTask(program, s, analysis, oracle, chan, econf, report.exploration_log)
                          for s in sinks]
        self.agent = None
        if config.exploitation:
            # with no fuzzer there is nothing to run no-coverage mode against
            self.agent = ExploitationAgent(
                program, oracle, sinks, config.seed, config.schedule_limit, config.exploit_attempts,
                config.nocov_execs if config.fuzzer else None, fconf,
                sync=self.candidates.send_all if config.fuzzer else None)
            self.agent.log = report.exploitation_log

    # -- stepping

    def run(self):
        rep = self.report
        if not self.sinks:
            rep.stop_reason = "no-sinks"
            return
        while True:
            if self._all_exploited():
                rep.stop_reason = "all-exploited"
                return
            if self.fuzzers and self._fuzz_execs() >= self.config.budget_execs:
                rep.stop_reason = "budget"
                return
            if not self.fuzzers and not self._agents_busy():
                rep.stop_reason = "agents-idle"
                return
            if self.config.wall_clock and time.monotonic() - self.started > self.config.wall_clock:
                rep.stop_reason = "wall-clock"
                return
            self.tick += 1
            if self.fuzzers:
                self._merge_inbound()
            self._step_exploitation()
            self._step_fuzzers()
            self._step_exploration()

    def _fuzz_execs(self) -> int:
        return sum(f.executions for f in self.fuzzers)

    def _all_exploited(self) -> bool:
        return all(self.report.records[s.id].exploited for s in self.sinks)

    def _exploited_ids(self) -> set:
        return {s.id for s in self.sinks if self.report.records[s.id].exploited}

    def _agents_busy(self) -> bool:
        if any(not t.state.done for t in self.tasks):
            return True
        return self.agent is not None and (len(self.beeps) > 0 or self.agent.store.pending(self._exploited_ids()))

    def _step_fuzzers(self):
        if not self.fuzzers:
            return
        remaining = self.config.budget_execs - self._fuzz_execs()
        for fz in self.fuzzers:
            if remaining <= 0:
                break
            n = min(self.config.reload_interval, remaining)
            fz.run(n)
            remaining -= n
        self._harvest()

    def _merge_inbound(self):
        items = self.seeds.drain() + self.candidates.drain()
        if items:
            self.fuzzers[0].sync_inbound(items)
            self._harvest()

    def _harvest(self):
        lead = self.fuzzers[0]
        for beep in lead.beeps[self.seen_beeps:]:
            self.report.records[beep.sink_id].mark_reached("fuzzer", self.tick, beep.input)
        self.seen_beeps = len(lead.beeps)
        found = list(lead.violations.values())
        for v in found[self.seen_violations:]:
            rec = self.report.records.get(v.site)
            if rec is not None and rec.retained:
                by = _AGENT.get(v.provenance, "fuzzer")
                rec.mark_exploited(by, self.tick, v.input, "fuzzer" if by == "fuzzer" else "exploration")
        self.seen_violations = len(found)

    def _step_exploration(self):
        for task in self.tasks:
            if task.state.done:
                continue
            try:
                st = task.step()
            except Exception as err:  # a crashing component becomes a failure record
                self._fail("exploration", task.sink.id, err)
                task.state.status, task.state.reason = "exhausted", "internal-error"
                continue
            if st.status != "reached":
                continue
            rec = self.report.records[st.sink_id]
            rec.mark_reached("exploration", self.tick, st.reached_input)
            trace = task.last_trace
            if trace.violated and trace.verdict.site == st.sink_id:
                rec.mark_exploited("agent", self.tick, st.reached_input, "exploration")
            elif not self.fuzzers:
                # no fuzzer to turn the reaching input into a beep; hand it over directly
                hit = trace.first_hit(st.sink_id)
                if hit is not None:
                    self.beeps.send(BeepSeed(st.reached_input, hit.stack, hit.site, hit.cwe, self.tick, hit.args))

    def _step_exploitation(self):
        if self.agent is None:
            return
        self.agent.receive(self.beeps.drain())
        try:
            result = self.agent.step(self._exploited_ids())
        except Exception as err:
            self._fail("exploitation", None, err)
            return
        if result is not None and result.outcome == "exploited":
            rec = self.report.records[result.beep.sink_id]
            rec.mark_exploited(result.exploited_by, self.tick, result.exploit_input, "fuzzer")

    def _fail(self, component, sink_id, err):
        log.exception("%s failed", component)
        self.report.failures.append({"component": component, "sink_id": sink_id,
                                     "tick": self.tick, "error": f"{type(err).__name__}: {err}"})

    # -- shutdown: agents first, then one last fuzzer pass over what they produced

    def finish(self):
        rep = self.report
        if self.agent is not None:
            self.agent.receive(self.beeps.drain())
            # beeps the agent never worked on are kept in the drain record
            worked = {r.beep.key() for r in self.agent.results}
            rep.drained_beeps = [b.to_dict() for g in self.agent.store.groups.values()
                                 for b in g.members if b.key() not in worked]
        if self.fuzzers:
            self._merge_inbound()
            lead = self.fuzzers[0]
            rep.corpus_manifest = lead.corpus.manifest()
            rep.violations = [v.to_dict() for v in lead.violations.values()]
            rep.beeps = [b.to_dict() for b in lead.beeps]
        for ch in (self.seeds, self.beeps, self.candidates):
            ch.close()
        rep.ticks = self.tick
        rep.fuzz_executions = self._fuzz_execs()
        if self.agent is not None:
            rep.nocov_executions = sum(r.nocov_executions for r in self.agent.results)
        usage = getattr(self.oracle, "usage", None)
        rep.oracle_usage = usage.to_dict() if usage is not None else {}


# -- output ---------------------------------------------------------------------------

def emit_report(report: CampaignReport, out_dir) -> Path:
    """Write report.json and its companion artifacts under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "report.json", report.to_json())
    atomic_write_json(out / "detection.json", report.detection.to_dict())
    atomic_write_json(out / "trails.json", report.detection.trails())
    atomic_write_json(out / "corpus_manifest.json", report.corpus_manifest)
    atomic_write_json(out / "violations_index.json",
                      [{k: v[k] for k in ("cwe", "site", "stack_hash", "provenance", "tick")}
                       for v in report.violations])
    write_jsonl(out / "beeps.jsonl", report.beeps)
    write_jsonl(out / "drained_beeps.jsonl", report.drained_beeps)
    write_jsonl(out / "exploration.jsonl", report.exploration_log)
    write_jsonl(out / "exploitation.jsonl", report.exploitation_log)
    return out / "report.json"
