"""Shipped MiniJ vulnerability suite with ground truth.

Each case directory holds ``program.mj`` and ``case.json``. Ground truth
names the vulnerable sink by enclosing function and builtin, and carries a
known reaching input and a known exploiting input (base64). Decoy cases
also describe the decoy sink and the detection stage expected to drop it.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from ..minij import execute, load_program

TAGS = frozenset({"format-gated", "hash-gated", "stateful", "sanitizer-sentinel", "decoy",
                  "last-mile", "synergy"})


def _root() -> Path:
    return Path(str(resources.files("sinkfuzz").joinpath("benchmarks")))


def locate_site(program, function: str, builtin: str) -> int:
    sites = [s for s, call in sorted(program.calls.items())
             if call.callee == builtin and program.source_map[s][0] == function]
    if not sites:
        raise ValueError(f"no {builtin} call in {function}")
    return sites[0]


@dataclass
class BenchmarkCase:
    id: str
    cwe: str
    directory: Path
    sink: dict  # {"function", "builtin"}
    reaching_input: bytes
    exploiting_input: bytes
    tags: tuple = ()
    harness: str = "harness"
    sink_threshold: int = 10
    decoy: Optional[dict] = None  # {"function", "builtin", "stage", "reason"}
    notes: str = ""
    _program: object = field(default=None, repr=False, compare=False)

    @property
    def program_path(self) -> Path:
        return self.directory / "program.mj"

    @property
    def program(self):
        if self._program is None:
            self._program = load_program(self.program_path, harness=self.harness)
        return self._program

    @property
    def sink_site(self) -> int:
        return locate_site(self.program, self.sink["function"], self.sink["builtin"])

    @property
    def decoy_site(self) -> Optional[int]:
        if self.decoy is None:
            return None
        return locate_site(self.program, self.decoy["function"], self.decoy["builtin"])

    @classmethod
    def load(cls, directory) -> "BenchmarkCase":
        directory = Path(directory)
        raw = json.loads((directory / "case.json").read_text(encoding="utf-8"))
        tags = tuple(raw.get("tags", ()))
        unknown = set(tags) - TAGS
        if unknown:
            raise ValueError(f"{directory.name}: unknown tags {sorted(unknown)}")
        return cls(
            id=raw["id"], cwe=raw["cwe"], directory=directory, sink=raw["sink"],
            reaching_input=base64.b64decode(raw["reaching_input_b64"]),
            exploiting_input=base64.b64decode(raw["exploiting_input_b64"]),
            tags=tags, harness=raw.get("harness", "harness"),
            sink_threshold=raw.get("sink_threshold", 10), decoy=raw.get("decoy"),
            notes=raw.get("notes", ""),
        )


def suite_manifest(root=None) -> list:
    root = Path(root) if root else _root()
    return [BenchmarkCase.load(d) for d in sorted(root.iterdir()) if (d / "case.json").is_file()]


def get_case(case_id: str, root=None) -> BenchmarkCase:
    for case in suite_manifest(root):
        if case.id == case_id:
            return case
    raise KeyError(f"no benchmark case {case_id!r}")


@dataclass
class Verification:
    case: str
    ok: bool
    failures: list = field(default_factory=list)

    def __bool__(self):
        return self.ok


def _describe(trace) -> str:
    entered = " > ".join(f for f, _ in trace.entered_functions[:12]) or "(nothing)"
    hits = sorted(trace.hit_sites())
    return f"entered {entered}; sink hits {hits}; verdict {trace.verdict.kind} {trace.verdict.detail}".strip()


def verify_ground_truth(case: BenchmarkCase, reaching: Optional[bytes] = None,
                        exploiting: Optional[bytes] = None) -> Verification:
    """Replay both ground-truth inputs (or overrides) against the case program.

    The reaching input must hit the sink without violating; the exploiting
    input must violate the sink's sanitizer at that site.
    """
    site = case.sink_site
    failures = []
    reaching = case.reaching_input if reaching is None else reaching
    exploiting = case.exploiting_input if exploiting is None else exploiting

    tr = execute(case.program, reaching, trace_spec={site})
    if not tr.breakpoints[site]:
        failures.append(f"reaching input misses sink {site}: {_describe(tr)}")
    elif tr.violated and tr.verdict.site == site:
        failures.append(f"reaching input already violates at {site}")

    tx = execute(case.program, exploiting, trace_spec={site})
    if not (tx.violated and tx.verdict.site == site and tx.verdict.cwe == case.cwe):
        failures.append(f"exploiting input does not trigger {case.cwe} at {site}: {_describe(tx)}")

    if case.decoy is not None:
        try:
            case.decoy_site
        except ValueError as err:
            failures.append(f"decoy: {err}")
    return Verification(case.id, not failures, failures)
