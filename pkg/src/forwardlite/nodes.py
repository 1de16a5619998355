"""Abstract syntax for queries and procedures.

Nodes are immutable dataclasses.  Source positions ride along for error
reporting but are excluded from equality so printed-and-reparsed trees
compare structurally equal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .values import Scalar

Pos = tuple[int, int]


def _pos_field():
    return field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Node:
    pass


# --- expressions -------------------------------------------------------------


@dataclass(frozen=True)
class Lit(Node):
    value: Scalar
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class NamePath(Node):
    """Dotted reference like db2.libraries or l.library_id or just x.

    Which prefix is a variable, source, table or field is settled by the
    resolver, not the grammar.
    """
    parts: tuple[str, ...]
    pos: Optional[Pos] = _pos_field()

    def dotted(self) -> str:
        return ".".join(self.parts)


@dataclass(frozen=True)
class Unary(Node):
    op: str  # '-' | 'not'
    operand: Node
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class Binary(Node):
    op: str  # + - * / || = <> < <= > >= and or
    left: Node
    right: Node
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class IsNull(Node):
    operand: Node
    negated: bool = False
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class InList(Node):
    needle: Node
    items: tuple[Node, ...]
    negated: bool = False
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class InQuery(Node):
    needle: Node
    query: "QueryNode"
    negated: bool = False
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class Exists(Node):
    query: "QueryNode"
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class FuncCall(Node):
    name: str
    args: tuple[Node, ...]
    star: bool = False  # count(*)
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class SubQueryExpr(Node):
    """A parenthesized query in expression position; evaluates to a table."""
    query: "QueryNode"
    pos: Optional[Pos] = _pos_field()


# --- queries ------------------------------------------------------------------


@dataclass(frozen=True)
class SelectItem(Node):
    expr: Optional[Node]          # None for star items
    alias: Optional[str] = None
    star_of: Optional[str] = None  # '' for bare *, alias name for a.*
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class FromItem(Node):
    source: Node                  # NamePath or SubQueryExpr
    alias: str
    join_kind: Optional[str] = None  # None (first/comma) | 'inner' | 'left'
    on: Optional[Node] = None
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class OrderItem(Node):
    expr: Node
    descending: bool = False
    pos: Optional[Pos] = _pos_field()


class QueryNode(Node):
    pass


@dataclass(frozen=True)
class SelectBlock(QueryNode):
    items: tuple[SelectItem, ...]
    from_items: tuple[FromItem, ...] = ()
    where: Optional[Node] = None
    group_by: tuple[Node, ...] = ()
    order_by: tuple[OrderItem, ...] = ()
    limit: Optional[Node] = None
    distinct: bool = False
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class ExprQuery(QueryNode):
    """Expression used as a whole query, e.g. `1 + 1`."""
    expr: Node
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class Union(QueryNode):
    left: QueryNode
    right: QueryNode
    all: bool = False
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class OuterUnion(QueryNode):
    """Heterogeneous concatenation: rows keep their own fields."""
    left: QueryNode
    right: QueryNode
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class WithQuery(QueryNode):
    bindings: tuple[tuple[str, QueryNode], ...]
    body: QueryNode
    pos: Optional[Pos] = _pos_field()


# --- statements -----------------------------------------------------------------


class Statement(Node):
    pass


@dataclass(frozen=True)
class Declare(Statement):
    name: str
    schema_name: Optional[str] = None
    init: Optional[QueryNode] = None
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class Assign(Statement):
    target: NamePath
    query: QueryNode
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class ValuesSource(Node):
    rows: tuple[tuple[Node, ...], ...]
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class Insert(Statement):
    target: NamePath
    columns: Optional[tuple[str, ...]]
    source: Node  # ValuesSource or QueryNode
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class Update(Statement):
    target: NamePath
    alias: Optional[str]
    assignments: tuple[tuple[str, Node], ...]
    where: Optional[Node] = None
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class Delete(Statement):
    target: NamePath
    alias: Optional[str] = None
    where: Optional[Node] = None
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class If(Statement):
    cond: Node
    then_body: tuple[Statement, ...]
    else_body: tuple[Statement, ...] = ()
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class For(Statement):
    var: str
    query: QueryNode
    body: tuple[Statement, ...]
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class Raise(Statement):
    message: Node
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class Block(Statement):
    body: tuple[Statement, ...]
    handler: tuple[Statement, ...] | None = None  # exception when others then
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class CallStmt(Statement):
    name: str
    args: tuple[Node, ...]
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class NextPage(Statement):
    page: Node
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class Return(Statement):
    value: Optional[QueryNode] = None
    pos: Optional[Pos] = _pos_field()


# --- declarations ------------------------------------------------------------------


@dataclass(frozen=True)
class FunctionDecl(Node):
    name: str
    params: tuple[str, ...]
    mutability: str  # 'immutable' | 'mutable'
    body: Block
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class ActionDecl(Node):
    url: str
    function: FunctionDecl | str  # anonymous decl or a named function
    pos: Optional[Pos] = _pos_field()
