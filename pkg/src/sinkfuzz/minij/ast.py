"""Syntax tree for MiniJ programs.

Every node carries a program-unique ``nid`` (assigned in parse order) and the
source line it starts on. Call expressions additionally carry a ``site`` id;
site ids are assigned in source order and are what the rest of the toolkit
uses to name call locations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union


@dataclass(eq=False)
class Node:
    nid: int
    line: int


# -- expressions -------------------------------------------------------------

@dataclass(eq=False)
class Num(Node):
    value: int


@dataclass(eq=False)
class Str(Node):
    value: str


@dataclass(eq=False)
class Bool(Node):
    value: bool


@dataclass(eq=False)
class Null(Node):
    pass


@dataclass(eq=False)
class Name(Node):
    name: str
    # "local", "global" or "func"; filled in by the resolver
    kind: str = "local"


@dataclass(eq=False)
class ListLit(Node):
    items: list


@dataclass(eq=False)
class MapLit(Node):
    pairs: list  # list of (key expr, value expr)


@dataclass(eq=False)
class Unary(Node):
    op: str
    operand: "Expr"


@dataclass(eq=False)
class Binary(Node):
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(eq=False)
class Index(Node):
    target: "Expr"
    key: "Expr"


@dataclass(eq=False)
class Call(Node):
    callee: str
    args: list
    site: int
    # "builtin", "direct" (user function) or "indirect" (function value)
    kind: str = "direct"


Expr = Union[Num, Str, Bool, Null, Name, ListLit, MapLit, Unary, Binary, Index, Call]


# -- statements --------------------------------------------------------------

@dataclass(eq=False)
class Let(Node):
    name: str
    value: Expr
    is_global: bool = False


@dataclass(eq=False)
class Assign(Node):
    target: Union[Name, Index]
    value: Expr


@dataclass(eq=False)
class If(Node):
    cond: Expr
    then: list
    orelse: Optional[list] = None


@dataclass(eq=False)
class While(Node):
    cond: Expr
    body: list


@dataclass(eq=False)
class Return(Node):
    value: Optional[Expr] = None


@dataclass(eq=False)
class Break(Node):
    pass


@dataclass(eq=False)
class Continue(Node):
    pass


@dataclass(eq=False)
class ExprStmt(Node):
    expr: Expr


Stmt = Union[Let, Assign, If, While, Return, Break, Continue, ExprStmt]


@dataclass(eq=False)
class FunctionDef(Node):
    name: str
    params: list
    body: list
    end_line: int = 0
    source: str = ""


@dataclass(eq=False)
class GlobalDef(Node):
    name: str
    value: Expr


def children(node):
    """Yield the direct child nodes of ``node`` in source order."""
    if isinstance(node, (Num, Str, Bool, Null, Name, Break, Continue)):
        return
    if isinstance(node, ListLit):
        yield from node.items
    elif isinstance(node, MapLit):
        for k, v in node.pairs:
            yield k
            yield v
    elif isinstance(node, Unary):
        yield node.operand
    elif isinstance(node, Binary):
        yield node.left
        yield node.right
    elif isinstance(node, Index):
        yield node.target
        yield node.key
    elif isinstance(node, Call):
        yield from node.args
    elif isinstance(node, (Let, GlobalDef)):
        yield node.value
    elif isinstance(node, Assign):
        yield node.target
        yield node.value
    elif isinstance(node, If):
        yield node.cond
        yield from node.then
        if node.orelse:
            yield from node.orelse
    elif isinstance(node, While):
        yield node.cond
        yield from node.body
    elif isinstance(node, Return):
        if node.value is not None:
            yield node.value
    elif isinstance(node, ExprStmt):
        yield node.expr
    elif isinstance(node, FunctionDef):
        yield from node.body


def walk(node):
    """Pre-order traversal of ``node`` and all of its descendants."""
    stack = [node]
    while stack:
        cur = stack.pop()
        yield cur
        stack.extend(reversed(list(children(cur))))


@dataclass
class Literal:
    value: str
    function: Optional[str]
    line: int
    # literal is a direct operand of a comparison (==, !=, starts_with, ...)
    compared: bool = False


@dataclass
class TargetProgram:
    functions: dict
    harness_entry: str
    source_map: dict
    literals: list
    globals: list = field(default_factory=list)
    calls: dict = field(default_factory=dict)
    source: str = ""
    path: str = "<memory>"

    def entry(self) -> FunctionDef:
        """Return the harness function, validating its signature."""
        from .errors import MiniJError

        fn = self.functions.get(self.harness_entry)
        if fn is None:
            raise MiniJError(f"missing harness entry {self.harness_entry!r}")
        if len(fn.params) != 1:
            raise MiniJError(
                f"harness {self.harness_entry!r} must take exactly one parameter"
            )
        return fn

    def site_function(self, site: int) -> str:
        return self.source_map[site][0]

    def site_line(self, site: int) -> int:
        return self.source_map[site][1]
