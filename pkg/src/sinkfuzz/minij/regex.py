"""A small backtracking regex engine that counts its steps.

Supported syntax: literals, ``.``, character classes (``[a-z]``, ``[^...]``),
escapes (``\\d \\w \\s`` and escaped metacharacters), groups, alternation,
the quantifiers ``* + ? {m} {m,} {m,n}`` (with lazy ``?`` suffix), and the
anchors ``^ $``. Matching is whole-string, like ``String.matches`` on the JVM.

The engine is deliberately naive so that catastrophic patterns such as
``(a+)+$`` blow up exactly the way they do on a backtracking VM.
"""

from __future__ import annotations

import sys


class RegexSyntaxError(ValueError):
    pass


class BacktrackLimitExceeded(Exception):
    def __init__(self, steps: int):
        super().__init__(f"backtracking exceeded {steps} steps")
        self.steps = steps


class MatchTooDeep(Exception):
    """The match nested deeper than ``MAX_DEPTH``; not a step-count blowup."""


_CLASS_ESCAPES = {
    "d": lambda c: c.isdigit(),
    "w": lambda c: c.isalnum() or c == "_",
    "s": lambda c: c in " \t\r\n\f\v",
}
_CLASS_ESCAPES["D"] = lambda c: not _CLASS_ESCAPES["d"](c)
_CLASS_ESCAPES["W"] = lambda c: not _CLASS_ESCAPES["w"](c)
_CLASS_ESCAPES["S"] = lambda c: not _CLASS_ESCAPES["s"](c)


# node kinds: ("char", pred) ("seq", [nodes]) ("alt", [nodes])
#             ("rep", node, lo, hi, greedy) ("bol",) ("eol",)

class _Parser:
    def __init__(self, pattern: str):
        self.p = pattern
        self.i = 0

    def parse(self):
        node = self.alt()
        if self.i != len(self.p):
            raise RegexSyntaxError(f"unexpected {self.p[self.i]!r} at {self.i}")
        return node

    def peek(self):
        return self.p[self.i] if self.i < len(self.p) else None

    def alt(self):
        branches = [self.seq()]
        while self.peek() == "|":
            self.i += 1
            branches.append(self.seq())
        return branches[0] if len(branches) == 1 else ("alt", branches)

    def seq(self):
        items = []
        while self.peek() is not None and self.peek() not in "|)":
            atom = self.atom()
            items.append(self.quantified(atom))
        return ("seq", items)

    def quantified(self, atom):
        ch = self.peek()
        if ch is None:
            return atom
        if ch in "*+?":
            self.i += 1
            lo, hi = {"*": (0, None), "+": (1, None), "?": (0, 1)}[ch]
        elif ch == "{" and self._looks_like_counter():
            lo, hi = self._counter()
        else:
            return atom
        if atom[0] in ("bol", "eol"):
            raise RegexSyntaxError("quantifier on anchor")
        greedy = True
        if self.peek() == "?":
            self.i += 1
            greedy = False
        if self.peek() in ("*", "+", "?"):
            raise RegexSyntaxError("nested quantifier")
        return ("rep", atom, lo, hi, greedy)

    def _looks_like_counter(self):
        j = self.p.find("}", self.i)
        if j < 0:
            return False
        body = self.p[self.i + 1:j]
        parts = body.split(",")
        return 1 <= len(parts) <= 2 and parts[0].isdigit() and all(x.isdigit() or x == "" for x in parts)

    def _counter(self):
        j = self.p.index("}", self.i)
        parts = self.p[self.i + 1:j].split(",")
        self.i = j + 1
        lo = int(parts[0])
        if len(parts) == 1:
            hi = lo
        else:
            hi = int(parts[1]) if parts[1] else None
        if hi is not None and hi < lo:
            raise RegexSyntaxError("bad counter range")
        return lo, hi

    def atom(self):
        ch = self.p[self.i]
        self.i += 1
        if ch == "(":
            if self.p.startswith("?:", self.i):
                self.i += 2
            inner = self.alt()
            if self.peek() != ")":
                raise RegexSyntaxError("missing )")
            self.i += 1
            return inner
        if ch in "*+?{":
            if ch == "{" and not self._looks_like_counter_at(self.i - 1):
                return ("char", lambda c: c == "{")
            raise RegexSyntaxError(f"nothing to repeat at {self.i - 1}")
        if ch == ")":
            raise RegexSyntaxError("unbalanced )")
        if ch == ".":
            return ("char", lambda c: c != "\n")
        if ch == "^":
            return ("bol",)
        if ch == "$":
            return ("eol",)
        if ch == "[":
            return ("char", self._class())
        if ch == "\\":
            return ("char", self._escape())
        return ("char", lambda c, ch=ch: c == ch)

    def _looks_like_counter_at(self, pos):
        saved = self.i
        self.i = pos
        try:
            return self._looks_like_counter()
        finally:
            self.i = saved

    def _escape(self):
        if self.i >= len(self.p):
            raise RegexSyntaxError("trailing backslash")
        ch = self.p[self.i]
        self.i += 1
        if ch in _CLASS_ESCAPES:
            return _CLASS_ESCAPES[ch]
        lit = {"n": "\n", "t": "\t", "r": "\r"}.get(ch, ch)
        return lambda c, lit=lit: c == lit

    def _class(self):
        negate = False
        if self.peek() == "^":
            negate = True
            self.i += 1
        preds = []
        first = True
        while True:
            ch = self.peek()
            if ch is None:
                raise RegexSyntaxError("unterminated character class")
            if ch == "]" and not first:
                self.i += 1
                break
            first = False
            self.i += 1
            if ch == "\\":
                preds.append(self._escape())
                continue
            if self.peek() == "-" and self.i + 1 < len(self.p) and self.p[self.i + 1] != "]":
                hi = self.p[self.i + 1]
                self.i += 2
                if hi < ch:
                    raise RegexSyntaxError("bad class range")
                preds.append(lambda c, lo=ch, hi=hi: lo <= c <= hi)
            else:
                preds.append(lambda c, ch=ch: c == ch)

        def pred(c):
            hit = any(p(c) for p in preds)
            return hit != negate

        return pred


def compile_pattern(pattern: str):
    return _Parser(pattern).parse()


# nested match calls allowed before giving up, like a JVM regex stack overflow
MAX_DEPTH = 1500


class _Matcher:
    def __init__(self, text: str, limit: int):
        self.text = text
        self.limit = limit
        self.steps = 0
        self.depth = 0

    def tick(self):
        self.steps += 1
        if self.steps > self.limit:
            raise BacktrackLimitExceeded(self.limit)

    def m(self, node, i, k):
        self.depth += 1
        if self.depth > MAX_DEPTH:
            raise MatchTooDeep()
        try:
            return self._m(node, i, k)
        finally:
            self.depth -= 1

    def _m(self, node, i, k):
        self.tick()
        kind = node[0]
        if kind == "char":
            if i < len(self.text) and node[1](self.text[i]):
                return k(i + 1)
            return False
        if kind == "seq":
            return self.seq(node[1], 0, i, k)
        if kind == "alt":
            for branch in node[1]:
                if self.m(branch, i, k):
                    return True
            return False
        if kind == "rep":
            return self.rep(node, 0, i, k)
        if kind == "bol":
            return i == 0 and k(i)
        if kind == "eol":
            return i == len(self.text) and k(i)
        raise AssertionError(kind)

    def seq(self, items, idx, i, k):
        if idx == len(items):
            return k(i)
        return self.m(items[idx], i, lambda j: self.seq(items, idx + 1, j, k))

    def rep(self, node, count, i, k):
        _, inner, lo, hi, greedy = node
        self.tick()
        can_more = hi is None or count < hi

        def more():
            # an iteration that consumes nothing cannot make progress
            return can_more and self.m(
                inner, i, lambda j: (j != i or count < lo) and self.rep(node, count + 1, j, k)
            )

        if greedy:
            if more():
                return True
            return count >= lo and k(i)
        if count >= lo and k(i):
            return True
        return more()


_MIN_RECURSION = 12000


def match(pattern: str, text: str, limit: int = 100_000):
    """Whole-string match of ``text`` against ``pattern``.

    Returns ``(matched, steps)``. Raises :class:`RegexSyntaxError` for bad
    patterns and :class:`BacktrackLimitExceeded` once more than ``limit``
    steps were needed; :class:`MatchTooDeep` when the match nests deeper
    than ``MAX_DEPTH``.
    """
    node = compile_pattern(pattern)
    if sys.getrecursionlimit() < _MIN_RECURSION:
        sys.setrecursionlimit(_MIN_RECURSION)
    matcher = _Matcher(text, limit)
    ok = matcher.m(node, 0, lambda j: j == len(text))
    return ok, matcher.steps
