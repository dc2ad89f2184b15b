"""Request/response types shared by every oracle backend."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

FILTER = "filter_exploitability"
EXPLORE = "explore_input"
EXPLOIT = "exploit_input"
MODES = (FILTER, EXPLORE, EXPLOIT)

# keys a context must carry for each mode
_CONTEXT_KEYS = {
    FILTER: ("sink",),
    EXPLORE: ("path", "functions", "input_plan", "sink"),
    EXPLOIT: ("input_b64", "stack", "sink", "cwe", "condition", "frames"),
}


class OracleError(RuntimeError):
    """Any backend failure: transport, parse, exhausted transcript."""


@dataclass(frozen=True)
class OracleRequest:
    mode: str
    context: dict
    feedback: Optional[dict] = None
    attempt: int = 0
    cap: int = 30
    # filter mode runs as two calls: "report" then "decision"
    phase: Optional[str] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown oracle mode {self.mode!r}")
        missing = [k for k in _CONTEXT_KEYS[self.mode] if k not in self.context]
        if missing:
            raise ValueError(f"{self.mode} context lacks {', '.join(missing)}")
        if self.mode == FILTER and self.phase not in ("report", "decision"):
            raise ValueError("filter requests need phase 'report' or 'decision'")


@dataclass(frozen=True)
class OracleResponse:
    mode: str
    dsl: Optional[str] = None
    decision: Optional[str] = None
    evidence: str = ""
    report: str = ""
    # input modes only: the backend had nothing to offer
    no_progress: bool = False

    def __post_init__(self):
        if self.decision is not None and self.decision not in ("keep", "drop"):
            raise ValueError(f"decision must be keep or drop, not {self.decision!r}")
        if self.decision == "drop" and not self.evidence.strip():
            raise ValueError("a drop decision must carry evidence")

    @classmethod
    def from_dict(cls, mode: str, raw) -> "OracleResponse":
        if isinstance(raw, str):
            return cls(mode, dsl=raw) if mode != FILTER else cls(mode, report=raw)
        if not isinstance(raw, dict):
            raise ValueError(f"response must be an object or string, got {type(raw).__name__}")
        return cls(
            mode,
            dsl=raw.get("dsl"),
            decision=raw.get("decision"),
            evidence=raw.get("evidence", ""),
            report=raw.get("report", ""),
            no_progress=bool(raw.get("no_progress", False)),
        )

    def to_dict(self) -> dict:
        out = {}
        for key in ("dsl", "decision", "report"):
            value = getattr(self, key)
            if value:
                out[key] = value
        if self.evidence:
            out["evidence"] = self.evidence
        if self.no_progress:
            out["no_progress"] = True
        return out


@dataclass
class UsageCounters:
    calls: int = 0
    errors: int = 0
    retries: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    by_mode: dict = field(default_factory=dict)

    def count(self, mode: str):
        self.calls += 1
        self.by_mode[mode] = self.by_mode.get(mode, 0) + 1

    def to_dict(self) -> dict:
        return {
            "calls": self.calls, "errors": self.errors, "retries": self.retries,
            "prompt_tokens": self.prompt_tokens, "completion_tokens": self.completion_tokens,
            "by_mode": dict(sorted(self.by_mode.items())),
        }
