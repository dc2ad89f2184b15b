"""Lexer and recursive-descent parser for MiniJ.

Grammar sketch::

    program  := (global | function)*
    global   := 'global' NAME '=' expr ';'
    function := 'fn' NAME '(' [NAME (',' NAME)*] ')' block
    stmt     := 'let' NAME '=' expr ';'
              | target '=' expr ';'
              | 'if' '(' expr ')' block ['else' (if | block)]
              | 'while' '(' expr ')' block
              | 'return' [expr] ';' | 'break' ';' | 'continue' ';'
              | expr ';'

Identifiers may contain dots so sink builtins read naturally (``sys.exec``).
String literals are byte strings: source text is UTF-8 and each literal is
stored as its UTF-8 bytes, one character per byte.
"""

from __future__ import annotations

import re
from typing import NamedTuple

from . import ast as A
from .catalog import is_builtin, lookup
from .errors import MiniJSyntaxError

KEYWORDS = {
    "fn", "let", "global", "if", "else", "while", "return", "break",
    "continue", "true", "false", "null",
}

# string-valued builtins whose literal arguments count as compared operands
_COMPARING_BUILTINS = {"starts_with", "ends_with", "contains", "has_key", "index_of", "get"}

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>//[^\n]*)
  | (?P<int>0x[0-9a-fA-F]+|[0-9]+)
  | (?P<str>"(?:[^"\\\n]|\\.)*")
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)*)
  | (?P<op>==|!=|<=|>=|&&|\|\||[-+*/%<>!=(){}\[\],;:])
    """,
    re.VERBOSE,
)

_ESCAPES = {"n": "\n", "t": "\t", "r": "\r", "\\": "\\", '"': '"', "0": "\0"}


class Token(NamedTuple):
    kind: str
    text: str
    value: object
    line: int
    col: int


def _unescape(body: str, line: int, col: int) -> str:
    out = []
    i = 0
    while i < len(body):
        ch = body[i]
        if ch != "\\":
            out.append(ch.encode("utf-8").decode("latin-1"))
            i += 1
            continue
        nxt = body[i + 1]
        if nxt == "x":
            digits = body[i + 2:i + 4]
            if len(digits) != 2 or not all(c in "0123456789abcdefABCDEF" for c in digits):
                raise MiniJSyntaxError("bad \\x escape", line, col + i)
            out.append(chr(int(digits, 16)))
            i += 4
        elif nxt in _ESCAPES:
            out.append(_ESCAPES[nxt])
            i += 2
        else:
            raise MiniJSyntaxError(f"unknown escape \\{nxt}", line, col + i)
    return "".join(out)


def tokenize(source: str) -> list:
    tokens = []
    pos = 0
    line = 1
    line_start = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        col = pos - line_start + 1
        if m is None:
            raise MiniJSyntaxError(f"unexpected character {source[pos]!r}", line, col)
        kind = m.lastgroup
        text = m.group()
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind == "int":
            tokens.append(Token("int", text, int(text, 0), line, col))
        elif kind == "str":
            tokens.append(Token("str", text, _unescape(text[1:-1], line, col + 1), line, col))
        elif kind == "name":
            tk = "kw" if text in KEYWORDS else "name"
            tokens.append(Token(tk, text, text, line, col))
        elif kind == "op":
            tokens.append(Token("op", text, text, line, col))
        pos = m.end()
    tokens.append(Token("eof", "", None, line, pos - line_start + 1))
    return tokens


_BINARY_LEVELS = [
    ("||",),
    ("&&",),
    ("==", "!="),
    ("<", "<=", ">", ">="),
    ("+", "-"),
    ("*", "/", "%"),
]


class Parser:
    def __init__(self, source: str):
        self.source = source
        self.lines = source.splitlines()
        self.toks = tokenize(source)
        self.i = 0
        self.next_nid = 0
        self.next_site = 0

    # -- token helpers -------------------------------------------------------
    def peek(self, k: int = 0) -> Token:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def advance(self) -> Token:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def at(self, text: str) -> bool:
        tok = self.peek()
        return tok.kind in ("op", "kw") and tok.text == text

    def expect(self, text: str) -> Token:
        tok = self.peek()
        if tok.kind not in ("op", "kw") or tok.text != text:
            shown = tok.text or "end of input"
            raise MiniJSyntaxError(f"expected {text!r}, got {shown!r}", tok.line, tok.col)
        return self.advance()

    def expect_name(self) -> Token:
        tok = self.peek()
        if tok.kind != "name":
            raise MiniJSyntaxError(f"expected identifier, got {tok.text!r}", tok.line, tok.col)
        return self.advance()

    def nid(self) -> int:
        self.next_nid += 1
        return self.next_nid

    # -- top level -----------------------------------------------------------
    def parse(self):
        functions = {}
        globals_ = []
        while self.peek().kind != "eof":
            tok = self.peek()
            if self.at("fn"):
                fn = self.function()
                if fn.name in functions:
                    raise MiniJSyntaxError(f"duplicate function {fn.name!r}", fn.line, tok.col)
                if is_builtin(fn.name):
                    raise MiniJSyntaxError(f"function {fn.name!r} shadows a builtin", fn.line, tok.col)
                functions[fn.name] = fn
            elif self.at("global"):
                self.advance()
                name = self.expect_name()
                self.expect("=")
                value = self.expr()
                self.expect(";")
                globals_.append(A.GlobalDef(self.nid(), tok.line, name.text, value))
            else:
                raise MiniJSyntaxError(f"expected 'fn' or 'global', got {tok.text!r}", tok.line, tok.col)
        return functions, globals_

    def function(self) -> A.FunctionDef:
        start = self.expect("fn")
        name = self.expect_name()
        nid = self.nid()
        self.expect("(")
        params = []
        if not self.at(")"):
            params.append(self.expect_name().text)
            while self.at(","):
                self.advance()
                params.append(self.expect_name().text)
        self.expect(")")
        body, end_line = self.block()
        text = "\n".join(self.lines[start.line - 1:end_line])
        return A.FunctionDef(nid, start.line, name.text, params, body, end_line, text)

    def block(self):
        self.expect("{")
        body = []
        while not self.at("}"):
            if self.peek().kind == "eof":
                tok = self.peek()
                raise MiniJSyntaxError("unterminated block", tok.line, tok.col)
            body.append(self.statement())
        end = self.expect("}")
        return body, end.line

    # -- statements ----------------------------------------------------------
    def statement(self):
        tok = self.peek()
        if self.at("let"):
            self.advance()
            name = self.expect_name()
            self.expect("=")
            value = self.expr()
            self.expect(";")
            return A.Let(self.nid(), tok.line, name.text, value)
        if self.at("if"):
            return self.if_statement()
        if self.at("while"):
            self.advance()
            nid = self.nid()
            self.expect("(")
            cond = self.expr()
            self.expect(")")
            body, _ = self.block()
            return A.While(nid, tok.line, cond, body)
        if self.at("return"):
            self.advance()
            nid = self.nid()
            value = None if self.at(";") else self.expr()
            self.expect(";")
            return A.Return(nid, tok.line, value)
        if self.at("break"):
            self.advance()
            self.expect(";")
            return A.Break(self.nid(), tok.line)
        if self.at("continue"):
            self.advance()
            self.expect(";")
            return A.Continue(self.nid(), tok.line)
        expr = self.expr()
        if self.at("="):
            eq = self.advance()
            if not isinstance(expr, (A.Name, A.Index)):
                raise MiniJSyntaxError("invalid assignment target", eq.line, eq.col)
            value = self.expr()
            self.expect(";")
            return A.Assign(self.nid(), tok.line, expr, value)
        self.expect(";")
        return A.ExprStmt(self.nid(), tok.line, expr)

    def if_statement(self):
        tok = self.expect("if")
        nid = self.nid()
        self.expect("(")
        cond = self.expr()
        self.expect(")")
        then, _ = self.block()
        orelse = None
        if self.at("else"):
            self.advance()
            if self.at("if"):
                orelse = [self.if_statement()]
            else:
                orelse, _ = self.block()
        return A.If(nid, tok.line, cond, then, orelse)

    # -- expressions ---------------------------------------------------------
    def expr(self, level: int = 0):
        if level == len(_BINARY_LEVELS):
            return self.unary()
        ops = _BINARY_LEVELS[level]
        left = self.expr(level + 1)
        while self.peek().kind == "op" and self.peek().text in ops:
            op = self.advance()
            right = self.expr(level + 1)
            left = A.Binary(self.nid(), op.line, op.text, left, right)
        return left

    def unary(self):
        tok = self.peek()
        if tok.kind == "op" and tok.text in ("!", "-"):
            self.advance()
            operand = self.unary()
            return A.Unary(self.nid(), tok.line, tok.text, operand)
        return self.postfix()

    def postfix(self):
        node = self.primary()
        while True:
            if self.at("["):
                tok = self.advance()
                key = self.expr()
                self.expect("]")
                node = A.Index(self.nid(), tok.line, node, key)
            else:
                return node

    def primary(self):
        tok = self.peek()
        if tok.kind == "int":
            self.advance()
            return A.Num(self.nid(), tok.line, tok.value)
        if tok.kind == "str":
            self.advance()
            return A.Str(self.nid(), tok.line, tok.value)
        if tok.kind == "kw" and tok.text in ("true", "false"):
            self.advance()
            return A.Bool(self.nid(), tok.line, tok.text == "true")
        if tok.kind == "kw" and tok.text == "null":
            self.advance()
            return A.Null(self.nid(), tok.line)
        if tok.kind == "name":
            self.advance()
            if self.at("("):
                return self.call(tok)
            return A.Name(self.nid(), tok.line, tok.text)
        if self.at("("):
            self.advance()
            inner = self.expr()
            self.expect(")")
            return inner
        if self.at("["):
            self.advance()
            items = []
            if not self.at("]"):
                items.append(self.expr())
                while self.at(","):
                    self.advance()
                    items.append(self.expr())
            self.expect("]")
            return A.ListLit(self.nid(), tok.line, items)
        if self.at("{"):
            self.advance()
            pairs = []
            if not self.at("}"):
                pairs.append(self.map_pair())
                while self.at(","):
                    self.advance()
                    pairs.append(self.map_pair())
            self.expect("}")
            return A.MapLit(self.nid(), tok.line, pairs)
        shown = tok.text or "end of input"
        raise MiniJSyntaxError(f"unexpected {shown!r}", tok.line, tok.col)

    def map_pair(self):
        key = self.expr()
        self.expect(":")
        return key, self.expr()

    def call(self, name_tok: Token):
        # the site id is taken when the callee is read so ids follow source order
        site = self.next_site
        self.next_site += 1
        nid = self.nid()
        self.expect("(")
        args = []
        if not self.at(")"):
            args.append(self.expr())
            while self.at(","):
                self.advance()
                args.append(self.expr())
        self.expect(")")
        call = A.Call(nid, name_tok.line, name_tok.text, args, site)
        call.col = name_tok.col
        return call


def _local_names(fn: A.FunctionDef) -> set:
    names = set(fn.params)
    for node in A.walk(fn):
        if isinstance(node, A.Let):
            names.add(node.name)
    return names


def _resolve(functions: dict, globals_: list):
    global_names = {g.name for g in globals_}

    def resolve_in(root, local_names, fn_name):
        for node in A.walk(root):
            if isinstance(node, A.Assign) and isinstance(node.target, A.Name):
                tname = node.target.name
                if tname not in local_names and tname not in global_names:
                    raise MiniJSyntaxError(f"assignment to undeclared name {tname!r}", node.line, 1)
            if isinstance(node, A.Name):
                if node.name in local_names:
                    node.kind = "local"
                elif node.name in global_names:
                    node.kind = "global"
                elif node.name in functions:
                    node.kind = "func"
                else:
                    raise MiniJSyntaxError(f"undefined name {node.name!r}", node.line, 1)
            elif isinstance(node, A.Call):
                info = lookup(node.callee)
                if info is not None:
                    node.kind = "builtin"
                    if not info.min_arity <= len(node.args) <= info.arity:
                        raise MiniJSyntaxError(
                            f"{node.callee} expects {info.arity} argument(s), got {len(node.args)}",
                            node.line, getattr(node, "col", 1),
                        )
                elif node.callee in local_names or node.callee in global_names:
                    node.kind = "indirect"
                elif node.callee in functions:
                    node.kind = "direct"
                else:
                    raise MiniJSyntaxError(
                        f"undefined function {node.callee!r}", node.line, getattr(node, "col", 1)
                    )

    for g in globals_:
        resolve_in(g.value, set(), None)
    for fn in functions.values():
        resolve_in(fn, _local_names(fn), fn.name)


def _collect_literals(functions: dict, globals_: list) -> list:
    literals = []

    def visit(root, fn_name):
        compared = set()
        for node in A.walk(root):
            if isinstance(node, A.Binary) and node.op in ("==", "!="):
                for side in (node.left, node.right):
                    if isinstance(side, A.Str):
                        compared.add(side.nid)
            elif isinstance(node, A.Call) and node.kind == "builtin" and node.callee in _COMPARING_BUILTINS:
                for arg in node.args[1:2]:
                    if isinstance(arg, A.Str):
                        compared.add(arg.nid)
            elif isinstance(node, A.Index) and isinstance(node.key, A.Str):
                compared.add(node.key.nid)
        for node in A.walk(root):
            if isinstance(node, A.Str):
                literals.append(A.Literal(node.value, fn_name, node.line, node.nid in compared))

    for g in globals_:
        visit(g.value, None)
    for fn in functions.values():
        visit(fn, fn.name)
    literals.sort(key=lambda lit: lit.line)
    return literals


def parse_program(source: str, harness: str = "harness", path: str = "<memory>") -> A.TargetProgram:
    """Parse MiniJ ``source`` into a :class:`TargetProgram`.

    Raises :class:`MiniJSyntaxError` with line and column on malformed input,
    on duplicate function names and on references to undefined names. A
    missing harness entry is only reported when the entry is requested.
    """
    parser = Parser(source)
    functions, globals_ = parser.parse()
    _resolve(functions, globals_)
    source_map = {}
    calls = {}
    for fn in functions.values():
        for node in A.walk(fn):
            if isinstance(node, A.Call):
                source_map[node.site] = (fn.name, node.line)
                calls[node.site] = node
    for g in globals_:
        for node in A.walk(g.value):
            if isinstance(node, A.Call):
                source_map[node.site] = ("<global>", node.line)
                calls[node.site] = node
    source_map = dict(sorted(source_map.items()))
    calls = dict(sorted(calls.items()))
    return A.TargetProgram(
        functions=functions,
        harness_entry=harness,
        source_map=source_map,
        literals=_collect_literals(functions, globals_),
        globals=globals_,
        calls=calls,
        source=source,
        path=path,
    )


def load_program(path, harness: str = "harness") -> A.TargetProgram:
    with open(path, encoding="utf-8") as fh:
        return parse_program(fh.read(), harness=harness, path=str(path))
