"""Sink database and the sink call-site record shared by all stages."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

from .minij.catalog import SUPPORTED_CWES, lookup


class UnknownCWE(ValueError):
    pass


@dataclass(frozen=True)
class SinkSpec:
    cwe: str
    builtin: str
    tainted_param_index: int = 0

    def __post_init__(self):
        info = lookup(self.builtin)
        if info is None or info.cwe != self.cwe:
            raise ValueError(f"{self.builtin} is not a {self.cwe} sink builtin")
        if not 0 <= self.tainted_param_index < info.arity:
            raise ValueError(f"{self.builtin} has no parameter {self.tainted_param_index}")


def load_sink_database(path=None) -> list:
    """Load SinkSpec entries from a JSON array of ``{cwe, builtin, tainted_param_index}``."""
    if path is None:
        text = resources.files("sinkfuzz").joinpath("sink_db.json").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return [SinkSpec(e["cwe"], e["builtin"], int(e.get("tainted_param_index", 0)))
            for e in json.loads(text)]


def check_cwes(cwes) -> list:
    cwes = sorted(set(cwes))
    unknown = [c for c in cwes if c not in SUPPORTED_CWES]
    if unknown:
        raise UnknownCWE(f"unsupported CWE id(s): {', '.join(unknown)}")
    return cwes


@dataclass
class SinkCallSite:
    id: int
    spec: SinkSpec
    enclosing_function: str
    location: tuple  # (file, line)
    arg_class: str = "variable"
    verdicts: list = field(default_factory=list)

    @property
    def cwe(self) -> str:
        return self.spec.cwe

    @property
    def builtin(self) -> str:
        return self.spec.builtin

    def record(self, stage: str, decision: str, reason: str):
        self.verdicts.append((stage, decision, reason))

    @property
    def disposition(self) -> Optional[str]:
        for stage, decision, _ in reversed(self.verdicts):
            if stage == "final":
                return decision
        return None

    def to_dict(self):
        return {
            "id": self.id,
            "cwe": self.cwe,
            "builtin": self.builtin,
            "tainted_param_index": self.spec.tainted_param_index,
            "function": self.enclosing_function,
            "file": self.location[0],
            "line": self.location[1],
            "arg_class": self.arg_class,
            "verdicts": [list(v) for v in self.verdicts],
        }
