"""Coverage-guided mutation fuzzer with value-profile feedback.

Inputs that reach an instrumented sink along a new stack become beep seeds;
sanitizer violations are written to disk before the loop moves on. Budgets
are counted in executions so campaigns are reproducible.
"""

from __future__ import annotations

import base64
import hashlib
import logging
import math
import random
import time
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

from .minij import Limits, execute
from .minij.interpreter import DEFAULT_STEP_BUDGET, MAX_INPUT_SIZE, stack_hash
from .storage import atomic_write_bytes, atomic_write_json

log = logging.getLogger(__name__)

# feature kinds; features are int tuples so set order never depends on string hashing
EDGE = 0
CMP = 1

PROVENANCES = ("fuzzer", "exploration_agent", "exploitation_agent", "nocov", "user-seed")
MAP_SIZE = 1 << 16


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class FuzzConfig:
    max_input: int = MAX_INPUT_SIZE
    step_budget: int = DEFAULT_STEP_BUDGET
    corpus_reload_interval: int = 1000  # executions between inbound-channel merges
    persist_after_crash: bool = True
    value_profile: bool = True
    # cap on how long mutation may grow an input; the corpus clamp is max_input
    max_len: int = 4096
    max_stacked_mutations: int = 4

    def __post_init__(self):
        for name in ("max_input", "step_budget", "corpus_reload_interval", "max_len",
                     "max_stacked_mutations"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def limits(self) -> Limits:
        return Limits(steps=self.step_budget, max_input=self.max_input)


# -- features ------------------------------------------------------------------------

def count_bucket(n: int) -> int:
    """AFL-style hit-count classes: 1, 2, 3, 4-7, 8-15, 16-31, 32-127, 128+."""
    if n <= 3:
        return n
    if n < 8:
        return 4
    if n < 16:
        return 5
    if n < 32:
        return 6
    if n < 128:
        return 7
    return 8


def score_bucket(score: int) -> int:
    return int(math.log2(score + 1))


def feature_set(trace, value_profile: bool = True) -> frozenset:
    """Edge features (edge id mod 65536, count class) plus value-profile
    features (comparison id, floor(log2(score + 1)))."""
    feats = {(EDGE, e % MAP_SIZE, count_bucket(c)) for e, c in trace.edge_counts.items()}
    if value_profile:
        feats.update((CMP, cid, score_bucket(s)) for cid, s in trace.value_profile_events)
    return frozenset(feats)


def vp_feature_set(trace) -> frozenset:
    """Value-profile-only features with exact scores, for no-coverage fuzzing."""
    return frozenset((CMP, cid, s) for cid, s in trace.value_profile_events)


# -- corpus --------------------------------------------------------------------------

@dataclass
class CorpusEntry:
    data: bytes
    features: frozenset
    provenance: str
    hash: str
    cmp_operands: tuple = ()


class Corpus:
    """Hash-deduplicated inputs with their features and provenance."""

    def __init__(self, max_input: int = MAX_INPUT_SIZE, directory=None):
        self.max_input = max_input
        self.directory = Path(directory) if directory else None
        self.entries = []
        self.by_hash = {}
        self.feature_counts = Counter()
        self._weights = None

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __contains__(self, data: bytes) -> bool:
        return content_hash(data) in self.by_hash

    def add(self, data: bytes, features=frozenset(), provenance: str = "fuzzer", cmp_operands=()) -> Optional[str]:
        """Insert ``data``; returns the drop reason, or None when added."""
        if not isinstance(data, (bytes, bytearray)):
            return "malformed"
        data = bytes(data)
        if len(data) > self.max_input:
            return "size"
        h = content_hash(data)
        if h in self.by_hash:
            return "duplicate"
        if provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {provenance!r}")
        entry = CorpusEntry(data, frozenset(features), provenance, h, tuple(cmp_operands))
        self.entries.append(entry)
        self.by_hash[h] = entry
        self.feature_counts.update(entry.features)
        self._weights = None
        if self.directory is not None:
            atomic_write_bytes(self.directory / h, data)
        return None

    def weights(self) -> list:
        """Favor entries holding rare features: sum of 1/count over features."""
        if self._weights is None:
            fc = self.feature_counts
            self._weights = [1.0 + sum(1.0 / fc[f] for f in e.features) for e in self.entries]
        return self._weights

    def pick(self, rng: random.Random) -> CorpusEntry:
        return rng.choices(self.entries, weights=self.weights(), k=1)[0]

    def manifest(self) -> list:
        return [{"hash": e.hash, "size": len(e.data), "provenance": e.provenance} for e in self.entries]


@dataclass
class SyncResult:
    added: list = field(default_factory=list)
    dropped: list = field(default_factory=list)  # (hash or "?", reason)


def sync_corpus(corpus: Corpus, inbound: Iterable, evaluate: Optional[Callable] = None) -> SyncResult:
    """Merge ``(data, provenance)`` pairs. ``evaluate(data)`` returns the
    entry's features and comparison operands, or raises ValueError when the
    input cannot be replayed."""
    out = SyncResult()
    for item in inbound:
        try:
            data, provenance = item
        except (TypeError, ValueError):
            out.dropped.append(("?", "malformed"))
            continue
        if not isinstance(data, (bytes, bytearray)):
            out.dropped.append(("?", "malformed"))
            continue
        h = content_hash(bytes(data))
        if len(data) > corpus.max_input:
            out.dropped.append((h, "size"))
            continue
        if h in corpus.by_hash:
            out.dropped.append((h, "duplicate"))
            continue
        features, operands = frozenset(), ()
        if evaluate is not None:
            try:
                features, operands = evaluate(bytes(data))
            except ValueError as err:
                out.dropped.append((h, f"non-reproducing: {err}"))
                continue
        reason = corpus.add(bytes(data), features, provenance, operands)
        if reason is None:
            out.added.append(h)
        else:
            out.dropped.append((h, reason))
    return out


# -- mutation ------------------------------------------------------------------------

INTERESTING_8 = (0, 1, 0x7F, 0x80, 0xFF, 0x10, 0x20, 0x40, 0x64)
INTERESTING_32 = (0, 1, 0xFF, 0x100, 0x7FFF, 0x8000, 0xFFFF, 0x10000, 0x7FFFFFFF, 0x80000000, 0xFFFFFFFF)


def _flip_bit(d, rng, ctx):
    if not d:
        return False
    i = rng.randrange(len(d))
    d[i] ^= 1 << rng.randrange(8)
    return True


def _flip_byte(d, rng, ctx):
    if not d:
        return False
    d[rng.randrange(len(d))] ^= 0xFF
    return True


def _random_byte(d, rng, ctx):
    if not d:
        return False
    d[rng.randrange(len(d))] = rng.randrange(256)
    return True


def _insert_byte(d, rng, ctx):
    d.insert(rng.randrange(len(d) + 1), rng.randrange(256))
    return True


def _interesting(d, rng, ctx):
    if not d:
        return False
    if len(d) >= 4 and rng.random() < 0.5:
        i = rng.randrange(len(d) - 3)
        d[i:i + 4] = rng.choice(INTERESTING_32).to_bytes(4, "little")
    else:
        d[rng.randrange(len(d))] = rng.choice(INTERESTING_8)
    return True


def _dict_insert(d, rng, ctx):
    if not ctx.dictionary:
        return False
    tok = rng.choice(ctx.dictionary)
    i = rng.randrange(len(d) + 1)
    d[i:i] = tok
    return True


def _dict_overwrite(d, rng, ctx):
    if not ctx.dictionary:
        return False
    tok = rng.choice(ctx.dictionary)
    i = rng.randrange(len(d) + 1)
    d[i:i + len(tok)] = tok
    return True


def _duplicate_block(d, rng, ctx):
    if not d:
        return False
    i = rng.randrange(len(d))
    n = rng.randint(1, min(len(d) - i, 64))
    j = rng.randrange(len(d) + 1)
    d[j:j] = d[i:i + n]
    return True


def _delete_block(d, rng, ctx):
    if len(d) < 2:
        return False
    i = rng.randrange(len(d))
    n = rng.randint(1, min(len(d) - i, 16))
    del d[i:i + n]
    return True


def _crossover(d, rng, ctx):
    if not ctx.others:
        return False
    other = rng.choice(ctx.others)
    if not other:
        return False
    i = rng.randrange(len(other))
    n = rng.randint(1, len(other) - i)
    j = rng.randrange(len(d) + 1)
    if rng.random() < 0.5:
        d[j:j] = other[i:i + n]
    else:
        d[j:j + n] = other[i:i + n]
    return True


def _operand_bytes(s: str) -> bytes:
    return s.encode("latin-1", "replace")


def _torc(d, rng, ctx):
    """Replace an occurrence of one comparison operand with the other."""
    if not ctx.cmp_operands:
        return False
    _, a, b = rng.choice(ctx.cmp_operands)
    a, b = _operand_bytes(a), _operand_bytes(b)
    if rng.random() < 0.5:
        a, b = b, a
    if not a:
        return False
    hits = []
    pos = d.find(a)
    while pos >= 0 and len(hits) < 16:
        hits.append(pos)
        pos = d.find(a, pos + 1)
    if not hits:
        return False
    i = rng.choice(hits)
    d[i:i + len(a)] = b
    return True


def _complete_prefix(d, rng, ctx):
    """Insert what is missing after the matched prefix of a comparison target."""
    if not ctx.cmp_operands:
        return False
    _, a, b = rng.choice(ctx.cmp_operands)
    s = 0
    while s < min(len(a), len(b)) and a[s] == b[s]:
        s += 1
    rest = _operand_bytes(b[s:])
    if not rest:
        return False
    head = _operand_bytes(a[:s])
    pos = d.find(head) if head else -1
    if pos >= 0 and rng.random() < 0.5:
        at = pos + len(head)
        d[at:at + len(rest)] = rest
    else:
        i = rng.randrange(len(d) + 1)
        d[i:i] = rest
    return True


MUTATORS = (
    ("bit_flip", _flip_bit),
    ("byte_flip", _flip_byte),
    ("random_byte", _random_byte),
    ("insert_byte", _insert_byte),
    ("interesting", _interesting),
    ("dict_insert", _dict_insert),
    ("dict_overwrite", _dict_overwrite),
    ("duplicate_block", _duplicate_block),
    ("delete_block", _delete_block),
    ("crossover", _crossover),
    ("torc", _torc),
    ("complete_prefix", _complete_prefix),
)


@dataclass
class MutationContext:
    dictionary: tuple = ()
    others: tuple = ()
    cmp_operands: tuple = ()


def mutate(data: bytes, dictionary, rng: random.Random, max_len: int = MAX_INPUT_SIZE,
           others=(), cmp_operands=(), ops=None) -> bytes:
    """Apply one randomly chosen mutator; result is clamped to ``max_len``."""
    ctx = MutationContext(tuple(bytes(t) for t in dictionary if t), tuple(others), tuple(cmp_operands))
    d = bytearray(data[:max_len])
    ops = ops or MUTATORS
    for _ in range(8):
        _, fn = ops[rng.randrange(len(ops))]
        if fn(d, rng, ctx):
            break
    else:
        _insert_byte(d, rng, ctx)
    del d[max_len:]
    return bytes(d)


def auto_dictionary(program) -> tuple:
    """Tokens from string literals the program compares input against."""
    seen = []
    for lit in program.literals:
        if lit.compared and lit.value and lit.value not in seen:
            seen.append(lit.value)
    return tuple(v.encode("latin-1", "replace") for v in seen)


# -- beep seeds and violations --------------------------------------------------------

@dataclass(frozen=True)
class BeepSeed:
    input: bytes
    stack_trace: tuple  # ((function, calling site), ...)
    sink_id: int
    cwe: str
    first_seen: int = 0
    args: tuple = ()

    @property
    def stack_hash(self) -> str:
        return stack_hash(self.stack_trace, self.sink_id)

    @property
    def input_hash(self) -> str:
        return content_hash(self.input)

    def key(self) -> tuple:
        return (self.sink_id, self.stack_hash, self.input_hash)

    def to_dict(self) -> dict:
        return {
            "input_b64": base64.b64encode(self.input).decode("ascii"),
            "stack": [{"fn": f, "site": s} for f, s in self.stack_trace],
            "sink_id": self.sink_id,
            "cwe": self.cwe,
            "tick": self.first_seen,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "BeepSeed":
        return cls(base64.b64decode(raw["input_b64"]),
                   tuple((f["fn"], f["site"]) for f in raw["stack"]),
                   raw["sink_id"], raw["cwe"], raw.get("tick", 0))


@dataclass(frozen=True)
class Violation:
    input: bytes
    cwe: str
    site: int
    stack_hash: str
    detail: str
    provenance: str
    tick: int
    trace: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        return {
            "input_b64": base64.b64encode(self.input).decode("ascii"),
            "cwe": self.cwe, "site": self.site, "stack_hash": self.stack_hash,
            "detail": self.detail, "provenance": self.provenance, "tick": self.tick,
            "trace": self.trace,
        }


def beeps_from_trace(trace, data: bytes, sink_ids, tick: int) -> list:
    out = []
    for hit in trace.sink_hits:
        if hit.site in sink_ids and not hit.triggered:
            out.append(BeepSeed(bytes(data), hit.stack, hit.site, hit.cwe, tick, hit.args))
    return out


def violation_from_trace(trace, data: bytes, provenance: str, tick: int) -> Optional[Violation]:
    if not trace.violated:
        return None
    site = trace.verdict.site
    hit = next((h for h in trace.sink_hits if h.site == site and h.triggered), None)
    sh = stack_hash(hit.stack, site) if hit else ""
    brief = {"entered_functions": [list(e) for e in trace.entered_functions[:64]],
             "verdict": trace.verdict.to_dict(), "sink_args": list(hit.args) if hit else []}
    return Violation(bytes(data), trace.verdict.cwe, site, sh, trace.verdict.detail, provenance, tick, brief)


# -- channels ------------------------------------------------------------------------

class Channel:
    """Unbounded FIFO with at-least-once delivery; consumers dedup by key."""

    def __init__(self, name: str):
        self.name = name
        self._q = deque()
        self.sent = 0
        self.closed = False

    def send(self, item):
        if self.closed:
            raise RuntimeError(f"channel {self.name} is closed")
        self._q.append(item)
        self.sent += 1

    def send_all(self, items):
        for item in items:
            self.send(item)

    def drain(self) -> list:
        out = list(self._q)
        self._q.clear()
        return out

    def __len__(self):
        return len(self._q)

    def close(self):
        self.closed = True


# -- the fuzzer ----------------------------------------------------------------------

@dataclass
class FuzzStats:
    executions: int = 0
    new_coverage: int = 0
    beeps: int = 0
    violations: int = 0
    inbound_added: int = 0
    inbound_dropped: int = 0


class Fuzzer:
    def __init__(self, program, sinks=(), config: FuzzConfig = FuzzConfig(), seed: int = 0,
                 corpus_dir=None, violations_dir=None, beep_channel: Optional[Channel] = None,
                 peer: Optional["Fuzzer"] = None):
        self.program = program
        self.sink_ids = frozenset(getattr(s, "id", s) for s in sinks)
        self.config = config
        self.rng = random.Random(seed)
        self.violations_dir = Path(violations_dir) if violations_dir else None
        self.dictionary = auto_dictionary(program)
        if peer is None:
            self.corpus = Corpus(config.max_input, corpus_dir)
            self.features = set()
            self.beep_keys = set()
            self.beeps = []
            self.violations = {}  # (site, stack hash) -> first Violation
        else:
            # another worker on the same campaign: share corpus, features and dedup state
            self.corpus, self.features = peer.corpus, peer.features
            self.beep_keys, self.beeps, self.violations = peer.beep_keys, peer.beeps, peer.violations
        self.beep_channel = beep_channel
        self.stats = FuzzStats()
        self.events = deque(maxlen=10_000)
        self.dropped = []
        self.stopped = False

    @property
    def executions(self) -> int:
        return self.stats.executions

    def run_input(self, data: bytes, provenance: str = "fuzzer", force_keep: bool = False):
        """Execute one input and fold the result into corpus, beeps and violations."""
        data = bytes(data[:self.config.max_input])
        trace = execute(self.program, data, self.config.limits)
        self.stats.executions += 1
        tick = self.stats.executions
        feats = feature_set(trace, self.config.value_profile)
        novel = not feats <= self.features
        if novel:
            self.features |= feats
            self.stats.new_coverage += 1
            self.events.append({"kind": "new_coverage", "tick": tick, "features": len(self.features)})
        if novel or force_keep:
            self.corpus.add(data, feats, provenance, trace.cmp_operands)
        for beep in beeps_from_trace(trace, data, self.sink_ids, tick):
            key = (beep.sink_id, beep.stack_hash)
            if key in self.beep_keys:
                continue
            self.beep_keys.add(key)
            self.beeps.append(beep)
            self.stats.beeps += 1
            self.events.append({"kind": "beep_seed", "tick": tick, "sink_id": beep.sink_id})
            if self.beep_channel is not None:
                self.beep_channel.send(beep)
        v = violation_from_trace(trace, data, provenance, tick)
        if v is not None:
            self.record_violation(v)
        return trace

    def record_violation(self, v: Violation):
        self.stats.violations += 1
        key = (v.site, v.stack_hash)
        if key in self.violations:
            return
        if self.violations_dir is not None:
            atomic_write_json(self.violations_dir / f"{v.provenance}-{content_hash(v.input)[:16]}.json",
                              v.to_dict())
        self.violations[key] = v
        self.events.append({"kind": "violation", "tick": v.tick, "cwe": v.cwe, "site": v.site})
        if not self.config.persist_after_crash:
            self.stopped = True

    def add_seeds(self, seeds: Iterable, provenance: str = "user-seed"):
        for s in seeds:
            if len(s) > self.config.max_input:
                self.dropped.append((content_hash(bytes(s)), "size"))
                continue
            if bytes(s) not in self.corpus:
                self.run_input(s, provenance, force_keep=True)

    def sync_inbound(self, items: Iterable):
        """Merge agent seeds: ``(data, provenance)`` pairs."""
        for item in items:
            try:
                data, provenance = item
                data = bytes(data)
            except (TypeError, ValueError):
                self.stats.inbound_dropped += 1
                self.dropped.append(("?", "malformed"))
                log.info("dropped malformed inbound seed")
                continue
            if len(data) > self.config.max_input:
                self.stats.inbound_dropped += 1
                self.dropped.append((content_hash(data), "size"))
                continue
            if data in self.corpus:
                continue
            self.run_input(data, provenance, force_keep=True)
            self.stats.inbound_added += 1

    def fuzz_one(self):
        if not self.corpus.entries:
            self.run_input(b"", "fuzzer")
            return
        entry = self.corpus.pick(self.rng)
        data = entry.data
        others = ()
        if len(self.corpus) > 1:
            others = (self.corpus.entries[self.rng.randrange(len(self.corpus))].data,)
        depth = 1 + self.rng.randrange(self.config.max_stacked_mutations)
        for _ in range(depth):
            data = mutate(data, self.dictionary, self.rng, self.config.max_len, others, entry.cmp_operands)
        self.run_input(data, "fuzzer")

    def run(self, executions: int):
        """Fuzz for ``executions`` more executions (or until stopped)."""
        target = self.stats.executions + executions
        while self.stats.executions < target and not self.stopped:
            self.fuzz_one()


def fuzz_loop(program, sinks, corpus_seeds=(), config: FuzzConfig = FuzzConfig(), channels=None,
              budget: int = 10_000, seed: int = 0):
    """Run a standalone fuzzer, yielding its events as they happen.

    ``channels`` may hold ``"inbound"`` (agent seeds, merged every reload
    interval) and ``"beeps"`` (outbound beep seeds).
    """
    channels = channels or {}
    fz = Fuzzer(program, sinks, config, seed, beep_channel=channels.get("beeps"))
    fz.add_seeds(corpus_seeds)
    yield from _flush(fz)
    while fz.executions < budget and not fz.stopped:
        step = min(config.corpus_reload_interval, budget - fz.executions)
        fz.run(step)
        if "inbound" in channels:
            fz.sync_inbound(channels["inbound"].drain())
        yield from _flush(fz)


def _flush(fz: Fuzzer):
    while fz.events:
        yield fz.events.popleft()


# -- no-coverage fuzzing --------------------------------------------------------------

@dataclass
class NoCovResult:
    found: Optional[bytes]
    executions: int
    corpus: list  # inputs kept during the run, for syncing back
    features_seen: int = 0
    edge_features_seen: int = 0


def no_cov_fuzz(program, beep: BeepSeed, candidates, budget: int, seed: int = 0,
                config: FuzzConfig = FuzzConfig(), dictionary=None) -> NoCovResult:
    """Mutate the beep input and candidates with value-profile feedback only.

    Returns the first input whose execution violates a sanitizer at the beep's
    sink, or ``found=None`` when the budget runs out.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    rng = random.Random(seed)
    dictionary = auto_dictionary(program) if dictionary is None else tuple(dictionary)
    corpus = Corpus(config.max_input)
    seen = set()
    execs = 0
    edge_features = 0

    def run(data: bytes, keep: bool):
        nonlocal execs, edge_features
        trace = execute(program, data, config.limits)
        execs += 1
        feats = vp_feature_set(trace)
        edge_features += sum(1 for f in feats if f[0] == EDGE)
        if trace.violated and trace.verdict.site == beep.sink_id:
            return True
        if keep or not feats <= seen:
            seen.update(feats)
            corpus.add(data, feats, "nocov", trace.cmp_operands)
        return False

    for data in [beep.input, *candidates]:
        data = bytes(data)[:config.max_input]
        if data in corpus:
            continue
        if execs >= budget:
            break
        if run(data, True):
            return NoCovResult(data, execs, [e.data for e in corpus], len(seen), edge_features)
    while execs < budget and corpus.entries:
        entry = corpus.pick(rng)
        data = entry.data
        for _ in range(1 + rng.randrange(config.max_stacked_mutations)):
            data = mutate(data, dictionary, rng, config.max_len, (), entry.cmp_operands)
        if run(data, False):
            return NoCovResult(data, execs, [e.data for e in corpus] + [data], len(seen), edge_features)
    return NoCovResult(None, execs, [e.data for e in corpus], len(seen), edge_features)


# -- calibration ----------------------------------------------------------------------

def calibrate(program, seconds: float = 0.25, sample: bytes = b"A\nA\nA\n") -> float:
    """Measured executions per second on ``program``."""
    start = time.perf_counter()
    n = 0
    while time.perf_counter() - start < seconds:
        execute(program, sample)
        n += 1
    return n / max(time.perf_counter() - start, 1e-9)


def executions_for(seconds: float, execs_per_second: float) -> int:
    """Map a wall-clock budget to an execution count."""
    return max(1, int(seconds * execs_per_second))
