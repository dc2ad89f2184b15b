"""Byte-builder DSL that oracles answer with instead of raw bytes.

One statement per line (``;`` also separates)::

    # comment
    emit "x-evil-backdoor\\n"     text, UTF-8 encoded, JSON string escapes
    emit_bytes "00ff41"           raw hex
    emit_u32le 7                  4-byte little-endian integer
    sha256hex_of "breakin the law"
    repeat 3 { emit "ab" }
    len_prefixed { emit "body" }  u32le byte length, then the block

Execution is bounded: at most ``MAX_OPS`` operations after repeat expansion
(each repeat iteration counts as one) and at most ``max_size`` output bytes.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass

MAX_OPS = 10_000
DEFAULT_MAX_SIZE = 1 << 20

_TOKEN = re.compile(r'\s*(?:(#[^\n]*)|("(?:[^"\\\n]|\\.)*")|([A-Za-z_][A-Za-z0-9_]*)|(-?\d+)|([{};\n]))')


class DSLError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorProgram:
    ops: tuple  # (name, arg) or (name, count, block) for repeat / (name, block)
    source: str = ""

    def __len__(self):
        return len(self.ops)


def _tokens(source: str):
    pos = 0
    out = []
    line = 1
    while pos < len(source):
        m = _TOKEN.match(source, pos)
        if m is None or m.end() == pos:
            rest = source[pos:].lstrip(" \t\r")
            if not rest:
                break
            raise DSLError(f"line {line}: unexpected {rest[:12]!r}")
        line += source.count("\n", pos, m.start(m.lastindex))
        pos = m.end()
        kind = m.lastindex
        text = m.group(kind)
        if kind == 1:
            continue
        if kind == 5 and text in ";\n":
            out.append(("sep", None, line))
            if text == "\n":
                line += 1
            continue
        out.append((("str", "word", "int", "punct")[kind - 2], text, line))
    return out


class _Parser:
    def __init__(self, tokens):
        self.toks = tokens
        self.i = 0

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else (None, None, -1)

    def take(self, kind, value=None):
        tok = self.peek()
        if tok[0] != kind or (value is not None and tok[1] != value):
            want = value or kind
            raise DSLError(f"line {tok[2]}: expected {want}, got {tok[1] or 'end of input'!r}")
        self.i += 1
        return tok

    def skip_seps(self):
        while self.peek()[0] == "sep":
            self.i += 1

    def block(self, closing: bool):
        ops = []
        while True:
            self.skip_seps()
            kind, text, line = self.peek()
            if kind is None:
                if closing:
                    raise DSLError("unterminated block")
                return tuple(ops)
            if kind == "punct" and text == "}":
                if not closing:
                    raise DSLError(f"line {line}: unbalanced '}}'")
                self.i += 1
                return tuple(ops)
            ops.append(self.statement())

    def string(self):
        _, text, line = self.take("str")
        try:
            return json.loads(text)
        except json.JSONDecodeError as err:
            raise DSLError(f"line {line}: bad string literal: {err.msg}") from None

    def statement(self):
        _, word, line = self.take("word")
        if word in ("emit", "emit_str"):
            return ("emit", self.string().encode("utf-8"))
        if word == "emit_bytes":
            hexs = self.string()
            try:
                return ("emit", bytes.fromhex(hexs))
            except ValueError:
                raise DSLError(f"line {line}: emit_bytes needs an even-length hex string") from None
        if word == "emit_u32le":
            n = int(self.take("int")[1])
            if not 0 <= n < 1 << 32:
                raise DSLError(f"line {line}: emit_u32le out of range")
            return ("emit", n.to_bytes(4, "little"))
        if word == "sha256hex_of":
            text = self.string()
            return ("emit", hashlib.sha256(text.encode("utf-8")).hexdigest().encode("ascii"))
        if word == "repeat":
            n = int(self.take("int")[1])
            if n < 0:
                raise DSLError(f"line {line}: negative repeat count")
            self.take("punct", "{")
            return ("repeat", n, self.block(True))
        if word in ("len_prefixed", "emit_len_prefixed"):
            self.take("punct", "{")
            return ("len_prefixed", self.block(True))
        raise DSLError(f"line {line}: unknown operation {word!r}")


def parse_generator(source: str) -> GeneratorProgram:
    if not isinstance(source, str):
        raise DSLError("generator source must be text")
    return GeneratorProgram(_Parser(_tokens(source)).block(False), source)


class _Runner:
    def __init__(self, max_ops: int, max_size: int):
        self.max_ops = max_ops
        self.max_size = max_size
        self.ops = 0

    def step(self):
        self.ops += 1
        if self.ops > self.max_ops:
            raise DSLError(f"generator exceeds {self.max_ops} operations")

    def run(self, ops, out: bytearray):
        for op in ops:
            self.step()
            name = op[0]
            if name == "emit":
                out += op[1]
            elif name == "repeat":
                for _ in range(op[1]):
                    self.step()
                    self.run(op[2], out)
            else:
                inner = bytearray()
                self.run(op[1], inner)
                out += len(inner).to_bytes(4, "little") + inner
            if len(out) > self.max_size:
                raise DSLError(f"generator output exceeds {self.max_size} bytes")


def run_generator(prog, max_size: int = DEFAULT_MAX_SIZE, max_ops: int = MAX_OPS) -> bytes:
    """Execute a generator (program or source text) and return its bytes."""
    if isinstance(prog, str):
        prog = parse_generator(prog)
    out = bytearray()
    _Runner(max_ops, max_size).run(prog.ops, out)
    return bytes(out)


def _quote(text: str) -> str:
    return json.dumps(text)


def emit_op(data) -> str:
    """One DSL line reproducing ``data`` (latin-1 text or bytes) exactly."""
    if isinstance(data, str):
        data = data.encode("latin-1")
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError:
        return f"emit_bytes {_quote(data.hex())}"
    return f"emit {_quote(text)}"


def render(lines) -> str:
    return "\n".join(lines) + "\n"
