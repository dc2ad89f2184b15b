"""Sanitizer rules: one deterministic exploitation condition per sink builtin.

The trigger table (bit-exact):

========  ================  ==========================================================
CWE       builtin           triggers when
========  ================  ==========================================================
CWE-078   sys.exec          command starts with ``jazze``
CWE-022   fs.open           lexically normalized path escapes the sandbox root
CWE-089   sql.query         a ``;`` occurs outside every single-quoted SQL literal
CWE-611   xml.parse         an ``<!ENTITY ... SYSTEM "id">`` declaration whose system
                            id scheme is ``file``
CWE-502   deser.load        declared class name (text before the first ``{``,
                            stripped) equals ``evil.Sentinel``
CWE-918   net.fetch         URL host equals ``sink.invalid``
CWE-643   xpath.eval        a closing quote is followed (after spaces) by the word
                            ``or`` outside any quoted literal
CWE-730   regex.match       matching needs more than 100,000 backtracking steps
CWE-470   reflect.load      loaded class name equals ``evil.Sentinel``
========  ================  ==========================================================

Only CWE-078's sentinel is the real-world fuzzer convention; the rest are
stand-ins chosen to be deterministic and documented. Rules with an
equality/prefix shape also expose a ``guidance`` pair so the interpreter can
report value-profile feedback toward the sentinel.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Optional
from urllib.parse import urlsplit

from . import regex as _regex

SENTINEL_COMMAND = "jazze"
SENTINEL_CLASS = "evil.Sentinel"
SENTINEL_HOST = "sink.invalid"
REGEX_STEP_LIMIT = 100_000


@dataclass(frozen=True)
class SandboxState:
    root: str = "/sandbox"
    files: tuple = field(default_factory=tuple)  # ((path, content), ...)

    def read(self, path: str) -> str:
        return dict(self.files).get(path, "")


@dataclass(frozen=True)
class SanitizerResult:
    triggered: bool
    detail: str = ""
    # (observed, target) strings for prefix-score feedback, when meaningful
    guidance: Optional[tuple] = None


@dataclass(frozen=True)
class SanitizerRule:
    cwe: str
    sink_builtin: str
    sentinel: str
    description: str
    condition: Callable


def normalize_path(root: str, path: str) -> str:
    """Lexically resolve ``path`` against ``root`` (no filesystem access)."""
    full = path if path.startswith("/") else root.rstrip("/") + "/" + path
    parts = []
    for seg in full.split("/"):
        if seg in ("", "."):
            continue
        if seg == "..":
            if parts:
                parts.pop()
            continue
        parts.append(seg)
    return "/" + "/".join(parts)


def path_escapes(root: str, path: str) -> bool:
    root_norm = normalize_path("/", root)
    resolved = normalize_path(root_norm, path)
    if root_norm == "/":
        return False
    return not (resolved == root_norm or resolved.startswith(root_norm + "/"))


def _text(arg) -> str:
    if arg is None:
        return ""
    if isinstance(arg, bool):
        return "true" if arg else "false"
    return arg if isinstance(arg, str) else str(arg)


def _cmd(args, sandbox):
    cmd = _text(args[0])
    if not cmd:
        return SanitizerResult(False)
    if cmd.startswith(SENTINEL_COMMAND):
        return SanitizerResult(True, f"OS command injection: {cmd[:64]!r}", (cmd, SENTINEL_COMMAND))
    return SanitizerResult(False, guidance=(cmd, SENTINEL_COMMAND))


def _path(args, sandbox):
    path = _text(args[0])
    if not path:
        return SanitizerResult(False)
    if path_escapes(sandbox.root, path):
        resolved = normalize_path(normalize_path("/", sandbox.root), path)
        return SanitizerResult(True, f"path traversal: {path[:64]!r} resolves to {resolved!r}")
    return SanitizerResult(False)


def sql_separator_outside_literal(query: str) -> bool:
    in_quote = False
    i = 0
    while i < len(query):
        ch = query[i]
        if in_quote:
            if ch == "'":
                if i + 1 < len(query) and query[i + 1] == "'":
                    i += 1  # doubled quote stays inside the literal
                else:
                    in_quote = False
        elif ch == "'":
            in_quote = True
        elif ch == ";":
            return True
        i += 1
    return False


def _sql(args, sandbox):
    query = _text(args[0])
    if query and sql_separator_outside_literal(query):
        return SanitizerResult(True, f"SQL injection: {query[:64]!r}")
    return SanitizerResult(False)


_ENTITY_RE = re.compile(
    r"<!ENTITY\s+(?:%\s*)?[A-Za-z_][\w.\-]*\s+SYSTEM\s+([\"'])(.*?)\1", re.DOTALL
)


def _xml(args, sandbox):
    doc = _text(args[0])
    if not doc:
        return SanitizerResult(False)
    for m in _ENTITY_RE.finditer(doc):
        system_id = m.group(2)
        scheme, sep, _ = system_id.partition(":")
        if sep and scheme.strip().lower() == "file":
            return SanitizerResult(True, f"XXE: external entity {system_id[:64]!r}")
    return SanitizerResult(False)


def declared_class(payload: str) -> str:
    return payload.split("{", 1)[0].strip()


def _deser(args, sandbox):
    payload = _text(args[0])
    if not payload:
        return SanitizerResult(False)
    cls = declared_class(payload)
    if cls == SENTINEL_CLASS:
        return SanitizerResult(True, f"deserialization of {cls}", (cls, SENTINEL_CLASS))
    return SanitizerResult(False, guidance=(cls, SENTINEL_CLASS))


def url_host(url: str) -> str:
    try:
        return (urlsplit(url).hostname or "").lower()
    except ValueError:
        return ""


def _ssrf(args, sandbox):
    url = _text(args[0])
    if not url:
        return SanitizerResult(False)
    host = url_host(url)
    if host == SENTINEL_HOST:
        return SanitizerResult(True, f"SSRF to {host}", (host, SENTINEL_HOST))
    return SanitizerResult(False, guidance=(host, SENTINEL_HOST))


def xpath_quote_then_or(expr: str) -> bool:
    quote = None
    i = 0
    while i < len(expr):
        ch = expr[i]
        if quote is None:
            if ch in "'\"":
                quote = ch
        elif ch == quote:
            quote = None
            j = i + 1
            while j < len(expr) and expr[j] in " \t\r\n":
                j += 1
            word = expr[j:j + 2].lower()
            after = expr[j + 2:j + 3]
            if word == "or" and not (after.isalnum() or after == "_"):
                return True
        i += 1
    return False


def _xpath(args, sandbox):
    expr = _text(args[0])
    if expr and xpath_quote_then_or(expr):
        return SanitizerResult(True, f"XPath injection: {expr[:64]!r}")
    return SanitizerResult(False)


def _redos(args, sandbox):
    pattern = _text(args[0])
    text = _text(args[1]) if len(args) > 1 else ""
    if not pattern:
        return SanitizerResult(False)
    try:
        _regex.match(pattern, text, REGEX_STEP_LIMIT)
    except _regex.BacktrackLimitExceeded:
        return SanitizerResult(True, f"ReDoS: pattern {pattern[:64]!r} exceeded {REGEX_STEP_LIMIT} steps")
    except (_regex.RegexSyntaxError, _regex.MatchTooDeep):
        pass
    return SanitizerResult(False)


def _reflect(args, sandbox):
    name = _text(args[0])
    if not name:
        return SanitizerResult(False)
    if name == SENTINEL_CLASS:
        return SanitizerResult(True, f"unsafe reflection loading {name}", (name, SENTINEL_CLASS))
    return SanitizerResult(False, guidance=(name, SENTINEL_CLASS))


RULES = {
    r.sink_builtin: r
    for r in [
        SanitizerRule("CWE-078", "sys.exec", SENTINEL_COMMAND,
                      'command starts with "jazze"', _cmd),
        SanitizerRule("CWE-022", "fs.open", "../",
                      "normalized path escapes the sandbox root", _path),
        SanitizerRule("CWE-089", "sql.query", ";",
                      "statement separator ';' outside any SQL string literal", _sql),
        SanitizerRule("CWE-611", "xml.parse", "<!ENTITY",
                      '<!ENTITY ... SYSTEM "file:..."> declaration', _xml),
        SanitizerRule("CWE-502", "deser.load", SENTINEL_CLASS,
                      'declared class name equals "evil.Sentinel"', _deser),
        SanitizerRule("CWE-918", "net.fetch", SENTINEL_HOST,
                      'URL host equals "sink.invalid"', _ssrf),
        SanitizerRule("CWE-643", "xpath.eval", "' or",
                      "closing quote followed by the word 'or'", _xpath),
        SanitizerRule("CWE-730", "regex.match", "(a+)+$",
                      "regex matching exceeds 100,000 backtracking steps", _redos),
        SanitizerRule("CWE-470", "reflect.load", SENTINEL_CLASS,
                      'loaded class name equals "evil.Sentinel"', _reflect),
    ]
}


def rule_for(builtin: str) -> SanitizerRule:
    return RULES[builtin]


def evaluate_sanitizer(rule: SanitizerRule, args, sandbox: SandboxState = SandboxState()) -> SanitizerResult:
    """Evaluate ``rule`` on a sink invocation's argument snapshot."""
    if not args or all(_text(a) == "" for a in args):
        return SanitizerResult(False)
    return rule.condition(tuple(args), sandbox)
