"""The fixed MiniJ builtin catalog.

Sink builtins carry the CWE they are security-sensitive for. Everything else
is a helper: input consumption mirroring a fuzzed-data provider, string and
map operations, and ``sha256hex``.
"""

from __future__ import annotations

from typing import NamedTuple, Optional


class BuiltinInfo(NamedTuple):
    name: str
    cwe: Optional[str]
    arity: int
    min_arity: int


def _b(name, cwe, arity, min_arity=None):
    return BuiltinInfo(name, cwe, arity, arity if min_arity is None else min_arity)


SINK_BUILTINS = [
    _b("sys.exec", "CWE-078", 1),
    _b("fs.open", "CWE-022", 1),
    _b("sql.query", "CWE-089", 1),
    _b("xml.parse", "CWE-611", 1),
    _b("deser.load", "CWE-502", 1),
    _b("net.fetch", "CWE-918", 1),
    _b("xpath.eval", "CWE-643", 1),
    _b("regex.match", "CWE-730", 2),
    _b("reflect.load", "CWE-470", 1),
]

HELPER_BUILTINS = [
    # input consumption (taint sources)
    _b("consume_string", None, 2),
    _b("consume_bytes", None, 2),
    _b("consume_u32", None, 1),
    _b("remaining", None, 1),
    # hashing
    _b("sha256hex", None, 1),
    # string ops
    _b("len", None, 1),
    _b("substr", None, 3, 2),
    _b("starts_with", None, 2),
    _b("ends_with", None, 2),
    _b("contains", None, 2),
    _b("index_of", None, 2),
    _b("to_lower", None, 1),
    _b("to_upper", None, 1),
    _b("trim", None, 1),
    _b("split", None, 2),
    _b("join", None, 2),
    _b("replace", None, 3),
    _b("str", None, 1),
    _b("int", None, 1),
    _b("byte_at", None, 2),
    _b("chr", None, 1),
    # map / list ops
    _b("has_key", None, 2),
    _b("get", None, 3, 2),
    _b("keys", None, 1),
    _b("push", None, 2),
]

INPUT_SOURCES = frozenset({"consume_string", "consume_bytes", "consume_u32"})

_BY_NAME = {b.name: b for b in SINK_BUILTINS + HELPER_BUILTINS}

CWE_NAMES = {
    "CWE-022": "Path Traversal",
    "CWE-078": "OS Command Injection",
    "CWE-089": "SQL Injection",
    "CWE-470": "Unsafe Reflection",
    "CWE-502": "Deserialization of Untrusted Data",
    "CWE-611": "Improper Restriction of XML External Entity Reference (XXE)",
    "CWE-643": "XPath Injection",
    "CWE-730": "Denial of Service (Regular Expression Injection)",
    "CWE-918": "Server-Side Request Forgery",
}

SUPPORTED_CWES = frozenset(b.cwe for b in SINK_BUILTINS)


def builtin_catalog() -> list:
    """Return ``(name, cwe or None, arity)`` for every builtin."""
    return [(b.name, b.cwe, b.arity) for b in SINK_BUILTINS + HELPER_BUILTINS]


def lookup(name: str) -> Optional[BuiltinInfo]:
    return _BY_NAME.get(name)


def is_builtin(name: str) -> bool:
    return name in _BY_NAME


def is_sink(name: str) -> bool:
    info = _BY_NAME.get(name)
    return info is not None and info.cwe is not None
