"""Name resolution: classifies every dotted reference in a parsed tree.

A reference head resolves, innermost scope first, to a lexical binding
(loop variable, function parameter, declared variable, with-view, page
local), then to a FROM alias, then to a registered source name.  Columns
are always alias-qualified: values carry no schema, so a bare column name
has nothing to resolve against.

Resolution also validates aggregation discipline (grouped queries may only
select keys and aggregates) and function mutability (page queries and
immutable functions may not call mutable functions), so that planning is
total afterwards.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

from .errors import (
    InvalidAggregation,
    MutableFunctionInPage,
    MutationInImmutable,
    UnknownName,
    UnsupportedFeature,
)
from .nodes import (
    ActionDecl,
    Assign,
    Binary,
    Block,
    CallStmt,
    Declare,
    Delete,
    Exists,
    ExprQuery,
    For,
    FromItem,
    FuncCall,
    FunctionDecl,
    If,
    InList,
    InQuery,
    Insert,
    IsNull,
    Lit,
    NamePath,
    NextPage,
    Node,
    OrderItem,
    OuterUnion,
    Pos,
    QueryNode,
    Raise,
    Return,
    SelectBlock,
    SelectItem,
    Statement,
    SubQueryExpr,
    Unary,
    Union,
    Update,
    ValuesSource,
    WithQuery,
)

log = logging.getLogger(__name__)

AGGREGATES = frozenset({"count", "sum", "avg", "min", "max"})


def _pos_field():
    return field(default=None, compare=False, repr=False)


# --- resolved reference nodes (replace NamePath) -------------------------------


@dataclass(frozen=True)
class LocalRef(Node):
    """A lexical binding: loop variable, parameter, declare, with-view,
    page-local view or schema."""
    name: str
    path: tuple[str, ...] = ()
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class AliasRef(Node):
    """A FROM alias of the enclosing (or an outer) select block; empty path
    denotes the whole row tuple."""
    alias: str
    path: tuple[str, ...] = ()
    pos: Optional[Pos] = _pos_field()


@dataclass(frozen=True)
class SourceRef(Node):
    """A path rooted at a registered source, e.g. db2.libraries."""
    source: str
    path: tuple[str, ...] = ()
    pos: Optional[Pos] = _pos_field()


# --- scopes ---------------------------------------------------------------------

KIND_VAR = "var"      # loop vars, params, declares, with-views, page locals
KIND_ALIAS = "alias"  # FROM aliases


class Scope:
    """Chain of name frames plus the fixed source-name set."""

    def __init__(self, sources: Iterable[str], functions: "FunctionTable | None" = None):
        self.sources = frozenset(sources)
        self.functions = functions if functions is not None else FunctionTable()
        self.frames: list[dict[str, str]] = []

    def push(self) -> None:
        self.frames.append({})

    def pop(self) -> None:
        self.frames.pop()

    def bind(self, name: str, kind: str) -> None:
        for fr in self.frames[:-1]:
            if name in fr:
                log.warning("name %r shadows an outer binding", name)
                break
        if name in self.sources:
            log.warning("name %r shadows source %r", name, name)
        self.frames[-1][name] = kind

    def lookup(self, name: str) -> str | None:
        for fr in reversed(self.frames):
            if name in fr:
                return fr[name]
        return None

    def visible_names(self) -> list[str]:
        seen: list[str] = []
        for fr in reversed(self.frames):
            for n in fr:
                if n not in seen:
                    seen.append(n)
        seen.extend(sorted(self.sources))
        return seen


@dataclass(frozen=True)
class FunctionInfo:
    name: str
    arity: int
    mutability: str  # 'immutable' | 'mutable'
    native: bool = False


class FunctionTable:
    """Known callables: natives plus user declarations."""

    def __init__(self) -> None:
        self.infos: dict[str, FunctionInfo] = {}

    def add(self, info: FunctionInfo) -> None:
        self.infos[info.name] = info

    def get(self, name: str) -> FunctionInfo | None:
        return self.infos.get(name)


# --- expression resolution -------------------------------------------------------


class _Resolver:
    def __init__(self, scope: Scope, in_page_query: bool = False,
                 immutable_ctx: str | None = None):
        self.scope = scope
        # page queries and immutable function bodies may not call mutable fns
        self.in_page_query = in_page_query
        self.immutable_ctx = immutable_ctx  # function name, for error text

    # expressions ---------------------------------------------------------

    def expr(self, e: Node) -> Node:
        if isinstance(e, Lit):
            return e
        if isinstance(e, NamePath):
            return self.name_path(e)
        if isinstance(e, Unary):
            return replace(e, operand=self.expr(e.operand))
        if isinstance(e, Binary):
            return replace(e, left=self.expr(e.left), right=self.expr(e.right))
        if isinstance(e, IsNull):
            return replace(e, operand=self.expr(e.operand))
        if isinstance(e, InList):
            return replace(e, needle=self.expr(e.needle),
                           items=tuple(self.expr(x) for x in e.items))
        if isinstance(e, InQuery):
            return replace(e, needle=self.expr(e.needle),
                           query=self.query(e.query))
        if isinstance(e, Exists):
            return replace(e, query=self.query(e.query))
        if isinstance(e, FuncCall):
            return self.func_call(e)
        if isinstance(e, SubQueryExpr):
            return replace(e, query=self.query(e.query))
        if isinstance(e, (LocalRef, AliasRef, SourceRef)):
            return e  # already resolved (idempotent)
        raise TypeError(f"unexpected expression node {type(e).__name__}")

    def name_path(self, np: NamePath) -> Node:
        head, rest = np.parts[0], np.parts[1:]
        kind = self.scope.lookup(head)
        if kind == KIND_VAR:
            return LocalRef(head, rest, pos=np.pos)
        if kind == KIND_ALIAS:
            return AliasRef(head, rest, pos=np.pos)
        if head in self.scope.sources:
            return SourceRef(head, rest, pos=np.pos)
        raise UnknownName(np.dotted(), self.scope.visible_names())

    def func_call(self, e: FuncCall) -> Node:
        if e.name in AGGREGATES:
            if e.star and e.name != "count":
                raise InvalidAggregation(f"{e.name}(*) is not valid")
            if not e.star and len(e.args) != 1:
                raise InvalidAggregation(
                    f"{e.name} takes exactly one argument")
            args = tuple(self.expr(a) for a in e.args)
            return replace(e, args=args)
        info = self.scope.functions.get(e.name)
        if info is not None:
            if info.mutability == "mutable":
                if self.in_page_query:
                    raise MutableFunctionInPage(e.name)
                if self.immutable_ctx is not None:
                    raise MutableFunctionInPage(
                        f"{e.name} (called from immutable {self.immutable_ctx})")
        # unknown names fail at call time with UnknownFunction; extension
        # natives may be registered after resolution
        return replace(e, args=tuple(self.expr(a) for a in e.args))

    # queries --------------------------------------------------------------

    def query(self, q: QueryNode) -> QueryNode:
        if isinstance(q, WithQuery):
            self.scope.push()
            bindings = []
            for name, sub in q.bindings:
                bound = self.query(sub)  # earlier bindings visible to later ones
                self.scope.bind(name, KIND_VAR)
                bindings.append((name, bound))
            body = self.query(q.body)
            self.scope.pop()
            return replace(q, bindings=tuple(bindings), body=body)
        if isinstance(q, (Union, OuterUnion)):
            return replace(q, left=self.query(q.left), right=self.query(q.right))
        if isinstance(q, ExprQuery):
            return replace(q, expr=self.expr(q.expr))
        if isinstance(q, SelectBlock):
            return self.select_block(q)
        raise TypeError(f"unexpected query node {type(q).__name__}")

    def select_block(self, q: SelectBlock) -> SelectBlock:
        self.scope.push()
        from_items = []
        block_aliases: set[str] = set()
        for f in q.from_items:
            if isinstance(f.source, SubQueryExpr):
                src: Node = SubQueryExpr(self.query(f.source.query),
                                         pos=f.source.pos)
            else:
                assert isinstance(f.source, NamePath)
                src = self.name_path(f.source)
                if isinstance(src, AliasRef) and src.alias in block_aliases:
                    raise UnsupportedFeature(
                        "FROM item may not iterate an alias of the same "
                        f"FROM list ({f.source.dotted()})")
            self.scope.bind(f.alias, KIND_ALIAS)
            block_aliases.add(f.alias)
            on = self.expr(f.on) if f.on is not None else None
            if on is not None and f.join_kind == "left" \
                    and _contains_subquery(on):
                raise UnsupportedFeature("subquery in a LEFT JOIN condition")
            from_items.append(replace(f, source=src, on=on))
        where = self.expr(q.where) if q.where is not None else None
        if where is not None and _contains_aggregate(where):
            raise InvalidAggregation("aggregate call in WHERE")
        group_by = tuple(self.expr(g) for g in q.group_by)
        for g in group_by:
            if _contains_subquery(g):
                raise UnsupportedFeature("subquery in a GROUP BY key")
        items = []
        for it in q.items:
            if it.star_of is not None:
                if it.star_of != "" and self.scope.lookup(it.star_of) != KIND_ALIAS:
                    raise UnknownName(it.star_of, self.scope.visible_names())
                items.append(it)
            else:
                items.append(replace(it, expr=self.expr(it.expr),
                                     alias=it.alias or _default_alias(it, len(items))))
        order_by = tuple(replace(o, expr=self.expr(o.expr)) for o in q.order_by)
        limit = self.expr(q.limit) if q.limit is not None else None
        self.scope.pop()
        resolved = replace(q, items=tuple(items), from_items=tuple(from_items),
                           where=where, group_by=group_by, order_by=order_by,
                           limit=limit)
        if resolved.distinct:
            _check_distinct_order(resolved)
        _check_aggregation(resolved)
        return resolved

    # statements --------------------------------------------------------------

    def statements(self, stmts: Iterable[Statement]) -> tuple[Statement, ...]:
        out = []
        for st in stmts:
            out.append(self.statement(st))
        return tuple(out)

    def statement(self, st: Statement) -> Statement:
        if isinstance(st, Declare):
            init = self.query(st.init) if st.init is not None else None
            self.scope.bind(st.name, KIND_VAR)
            return replace(st, init=init)
        if isinstance(st, Assign):
            target = self.name_path(st.target)
            if isinstance(target, AliasRef):
                raise UnknownName(st.target.dotted(),
                                  self.scope.visible_names())
            return replace(st, target=target, query=self.query(st.query))
        if isinstance(st, Insert):
            self._note_mutation(st)
            target = self.name_path(st.target)
            if isinstance(st.source, ValuesSource):
                src: Node = replace(
                    st.source,
                    rows=tuple(tuple(self.expr(x) for x in row)
                               for row in st.source.rows))
            else:
                src = self.query(st.source)  # type: ignore[arg-type]
            return replace(st, target=target, source=src)
        if isinstance(st, Update):
            self._note_mutation(st)
            target = self.name_path(st.target)
            self.scope.push()
            alias = st.alias or (st.target.parts[-1] if len(st.target.parts) else None)
            if alias:
                self.scope.bind(alias, KIND_ALIAS)
            assigns = tuple((n, self.expr(e)) for n, e in st.assignments)
            where = self.expr(st.where) if st.where is not None else None
            self.scope.pop()
            return replace(st, target=target, alias=alias,
                           assignments=assigns, where=where)
        if isinstance(st, Delete):
            self._note_mutation(st)
            target = self.name_path(st.target)
            self.scope.push()
            alias = st.alias or st.target.parts[-1]
            self.scope.bind(alias, KIND_ALIAS)
            where = self.expr(st.where) if st.where is not None else None
            self.scope.pop()
            return replace(st, target=target, alias=alias, where=where)
        if isinstance(st, If):
            cond = self.expr(st.cond)
            self.scope.push()
            then_body = self.statements(st.then_body)
            self.scope.pop()
            self.scope.push()
            else_body = self.statements(st.else_body)
            self.scope.pop()
            return replace(st, cond=cond, then_body=then_body,
                           else_body=else_body)
        if isinstance(st, For):
            q = self.query(st.query)
            self.scope.push()
            self.scope.bind(st.var, KIND_VAR)
            body = self.statements(st.body)
            self.scope.pop()
            return replace(st, query=q, body=body)
        if isinstance(st, Raise):
            return replace(st, message=self.expr(st.message))
        if isinstance(st, Block):
            self.scope.push()
            body = self.statements(st.body)
            self.scope.pop()
            handler = None
            if st.handler is not None:
                self.scope.push()
                handler = self.statements(st.handler)
                self.scope.pop()
            return replace(st, body=body, handler=handler)
        if isinstance(st, CallStmt):
            info = self.scope.functions.get(st.name)
            if info is not None and info.mutability == "mutable" \
                    and self.immutable_ctx is not None:
                raise MutationInImmutable(
                    f"immutable function {self.immutable_ctx!r} calls "
                    f"mutable function {st.name!r}")
            return replace(st, args=tuple(self.expr(a) for a in st.args))
        if isinstance(st, NextPage):
            return replace(st, page=self.expr(st.page))
        if isinstance(st, Return):
            value = self.query(st.value) if st.value is not None else None
            return replace(st, value=value)
        raise TypeError(f"unexpected statement node {type(st).__name__}")

    def _note_mutation(self, st: Statement) -> None:
        if self.immutable_ctx is not None:
            kind = type(st).__name__.lower()
            raise MutationInImmutable(
                f"immutable function {self.immutable_ctx!r} contains "
                f"{kind} statement")


def _default_alias(item: SelectItem, index: int) -> str:
    if isinstance(item.expr, NamePath):
        return item.expr.parts[-1]
    if isinstance(item.expr, (LocalRef, AliasRef, SourceRef)) and item.expr.path:
        return item.expr.path[-1]
    return f"c{index + 1}"


# --- aggregation discipline -------------------------------------------------------


def _check_aggregation(q: SelectBlock) -> None:
    has_agg = any(
        it.expr is not None and _contains_aggregate(it.expr) for it in q.items
    ) or any(_contains_aggregate(o.expr) for o in q.order_by)
    if not q.group_by and not has_agg:
        return
    keys = list(q.group_by)
    for g in keys:
        if _contains_aggregate(g):
            raise InvalidAggregation("aggregate call inside GROUP BY key")
    for it in q.items:
        if it.star_of is not None:
            raise InvalidAggregation("star item in an aggregated query")
        _check_grouped_expr(it.expr, keys)  # type: ignore[arg-type]
    for o in q.order_by:
        _check_grouped_expr(o.expr, keys)


def _check_grouped_expr(e: Node, keys: list[Node]) -> None:
    """Every subtree must bottom out in a group key, an aggregate call, or a
    row-independent expression."""
    if any(_strip_pos(e) == _strip_pos(k) for k in keys):
        return
    if isinstance(e, FuncCall) and e.name in AGGREGATES:
        return  # aggregate args evaluate per input row, any shape allowed
    if isinstance(e, (AliasRef,)):
        raise InvalidAggregation(
            f"column {e.alias + ('.' + '.'.join(e.path) if e.path else '')!r} "
            "is neither grouped nor aggregated")
    if isinstance(e, (Lit, LocalRef, SourceRef)):
        return
    if isinstance(e, Unary):
        _check_grouped_expr(e.operand, keys)
        return
    if isinstance(e, Binary):
        _check_grouped_expr(e.left, keys)
        _check_grouped_expr(e.right, keys)
        return
    if isinstance(e, IsNull):
        _check_grouped_expr(e.operand, keys)
        return
    if isinstance(e, InList):
        _check_grouped_expr(e.needle, keys)
        for x in e.items:
            _check_grouped_expr(x, keys)
        return
    if isinstance(e, FuncCall):
        for a in e.args:
            _check_grouped_expr(a, keys)
        return
    # subqueries and the rest may not reference the block's rows outside keys
    if isinstance(e, (SubQueryExpr, Exists, InQuery)):
        raise InvalidAggregation(
            "subquery in an aggregated select/order expression")
    raise InvalidAggregation(f"unsupported grouped expression {type(e).__name__}")


def _check_distinct_order(q: SelectBlock) -> None:
    """DISTINCT dedupes the projected rows, so every sort key must be one of
    them: a select-list expression, or a column covered by a star item."""
    star_aliases: set[str] = set()
    for it in q.items:
        if it.star_of == "":
            star_aliases.update(f.alias for f in q.from_items)
        elif it.star_of is not None:
            star_aliases.add(it.star_of)
    for o in q.order_by:
        if any(it.star_of is None and it.expr == o.expr for it in q.items):
            continue
        if isinstance(o.expr, AliasRef) and len(o.expr.path) == 1 \
                and o.expr.alias in star_aliases:
            continue
        raise UnsupportedFeature(
            "with DISTINCT, ORDER BY must use select-list expressions")


def _contains_subquery(e: Node) -> bool:
    if isinstance(e, (SubQueryExpr, Exists, InQuery)):
        return True
    if isinstance(e, Unary):
        return _contains_subquery(e.operand)
    if isinstance(e, Binary):
        return _contains_subquery(e.left) or _contains_subquery(e.right)
    if isinstance(e, IsNull):
        return _contains_subquery(e.operand)
    if isinstance(e, InList):
        return _contains_subquery(e.needle) or any(
            _contains_subquery(x) for x in e.items)
    if isinstance(e, FuncCall):
        return any(_contains_subquery(a) for a in e.args)
    return False


def _contains_aggregate(e: Node) -> bool:
    if isinstance(e, FuncCall):
        if e.name in AGGREGATES:
            return True
        return any(_contains_aggregate(a) for a in e.args)
    if isinstance(e, Unary):
        return _contains_aggregate(e.operand)
    if isinstance(e, Binary):
        return _contains_aggregate(e.left) or _contains_aggregate(e.right)
    if isinstance(e, IsNull):
        return _contains_aggregate(e.operand)
    if isinstance(e, InList):
        return _contains_aggregate(e.needle) or any(
            _contains_aggregate(x) for x in e.items)
    # aggregates inside nested subqueries belong to the subquery
    return False


def _strip_pos(e: Node) -> Node:
    # dataclass equality already ignores pos (compare=False)
    return e


# --- public API ---------------------------------------------------------------------


def resolve_query(q: QueryNode, sources: Iterable[str],
                  locals_: Iterable[str] = (),
                  functions: FunctionTable | None = None,
                  page_query: bool = False) -> QueryNode:
    scope = Scope(sources, functions)
    scope.push()
    for name in locals_:
        scope.bind(name, KIND_VAR)
    r = _Resolver(scope, in_page_query=page_query)
    return r.query(q)


def resolve_expression(e: Node, sources: Iterable[str],
                       locals_: Iterable[str] = (),
                       functions: FunctionTable | None = None,
                       page_query: bool = False) -> Node:
    scope = Scope(sources, functions)
    scope.push()
    for name in locals_:
        scope.bind(name, KIND_VAR)
    r = _Resolver(scope, in_page_query=page_query)
    return r.expr(e)


def resolve_statements(stmts: Iterable[Statement], sources: Iterable[str],
                       locals_: Iterable[str] = (),
                       functions: FunctionTable | None = None) -> tuple[Statement, ...]:
    scope = Scope(sources, functions)
    scope.push()
    for name in locals_:
        scope.bind(name, KIND_VAR)
    r = _Resolver(scope)
    return r.statements(tuple(stmts))


def resolve_function(decl: FunctionDecl, sources: Iterable[str],
                     functions: FunctionTable | None = None) -> FunctionDecl:
    """Resolve a function body; immutable functions are statically checked
    for absence of DML and mutable calls."""
    scope = Scope(sources, functions)
    scope.push()
    for p in decl.params:
        scope.bind(p, KIND_VAR)
    immutable_ctx = decl.name if decl.mutability == "immutable" else None
    r = _Resolver(scope, immutable_ctx=immutable_ctx)
    body = r.statement(decl.body)
    assert isinstance(body, Block)
    return replace(decl, body=body)
