"""Query planning: compiles resolved queries into operator trees with
maximal single-source pushdown.

A whole select block whose tables live in one pushdown-capable source and
whose expressions fit the adapter dialect compiles to a single remote-fetch.
Otherwise each source's FROM subset (plus the WHERE/ON conjuncts that touch
only it) is pushed as one fetch with the tables' columns enumerated, and the
remaining operators run in the in-memory engine.  References to anything
outside the pushed subtree become `?` bind parameters evaluated at fetch
time.  Planning never fails on a resolved query: anything the dialect
cannot express simply stays local.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field as dc_field, replace
from typing import Iterator, Optional

from .nodes import (
    Binary,
    Exists,
    ExprQuery,
    FromItem,
    FuncCall,
    InList,
    InQuery,
    IsNull,
    Lit,
    Node,
    OuterUnion,
    QueryNode,
    SelectBlock,
    SubQueryExpr,
    Unary,
    Union,
    WithQuery,
)
from .resolver import AGGREGATES, AliasRef, LocalRef, SourceRef, _contains_aggregate
from .values import COINCIDENTAL, INTENTIONAL, Scalar

DEFAULT_INLIST_THRESHOLD = 100


@dataclass(frozen=True)
class InTable(Node):
    """Membership test of a needle against an applied subquery slot."""
    needle: Node
    slot: str
    negated: bool = False


# --- plan nodes -------------------------------------------------------------


class PlanNode:
    pass


@dataclass(frozen=True)
class Unit(PlanNode):
    """Produces exactly one empty row context."""


@dataclass(frozen=True)
class Scan(PlanNode):
    """Fetch the value at a source path and iterate it as rows."""
    source: str
    path: tuple[str, ...]
    alias: str


@dataclass(frozen=True)
class LocalTable(PlanNode):
    """Iterate a local binding (with-view, variable, parameter) as rows."""
    name: str
    path: tuple[str, ...]
    alias: str


@dataclass(frozen=True)
class AliasTable(PlanNode):
    """Iterate a nested table reached from an enclosing query's alias."""
    alias: str
    path: tuple[str, ...]
    out_alias: str


@dataclass(frozen=True)
class SubPlanFrom(PlanNode):
    """Iterate the result of a nested plan as rows."""
    plan: PlanNode
    alias: str


@dataclass(frozen=True)
class RemoteFetch(PlanNode):
    """One SQL statement pushed down to a source.

    split mode yields row contexts, one entry per pushed alias, by slicing
    the flat result row positionally; flat mode yields the block's final
    tuples directly.
    """
    fetch_id: int
    source: str
    sql: str
    binds: tuple[Node, ...]
    mode: str  # 'split' | 'flat'
    groups: tuple[tuple[str, str, tuple[str, ...]], ...] = ()  # alias, table, cols
    out_names: tuple[str, ...] = ()
    has_where: bool = False
    order_kind: str = COINCIDENTAL


@dataclass(frozen=True)
class Join(PlanNode):
    left: PlanNode
    right: PlanNode
    kind: str  # 'cross' | 'left'
    on: Optional[Node] = None  # only for 'left'
    # (driver_alias, driver_path, fetch_id, remote column SQL): feed the
    # distinct left-side keys to the right-hand fetch as an extra IN filter
    in_push: Optional[tuple[str, tuple[str, ...], int, str]] = None


@dataclass(frozen=True)
class Filter(PlanNode):
    input: PlanNode
    pred: Node


@dataclass(frozen=True)
class Apply(PlanNode):
    """Subquery-apply: evaluate a sub-plan once per row and bind the result
    (mode 'table') or its non-emptiness (mode 'exists') to a slot."""
    input: Optional[PlanNode]  # None inside ScalarPlan chains
    slot: str
    plan: PlanNode
    mode: str  # 'table' | 'exists'


@dataclass(frozen=True)
class Group(PlanNode):
    input: PlanNode
    keys: tuple[tuple[str, Node], ...]
    aggs: tuple[tuple[str, str, Optional[Node]], ...]  # name, fn, arg (None = *)


@dataclass(frozen=True)
class ProjItem:
    name: Optional[str]
    expr: Optional[Node]
    star_of: Optional[str] = None  # '' expands every alias


@dataclass(frozen=True)
class Project(PlanNode):
    input: PlanNode
    items: tuple[ProjItem, ...]


@dataclass(frozen=True)
class Distinct(PlanNode):
    input: PlanNode


@dataclass(frozen=True)
class Sort(PlanNode):
    input: PlanNode
    keys: tuple[tuple[str, bool], ...]  # projected field name, descending


@dataclass(frozen=True)
class Strip(PlanNode):
    input: PlanNode
    fields: tuple[str, ...]


@dataclass(frozen=True)
class ScalarPlan:
    """An expression plus the subquery applies it needs; evaluated against
    a caller-supplied row context."""
    applies: tuple[Apply, ...]
    expr: Node


@dataclass(frozen=True)
class LimitOp(PlanNode):
    input: PlanNode
    count: ScalarPlan


@dataclass(frozen=True)
class UnionOp(PlanNode):
    left: PlanNode
    right: PlanNode
    all: bool


@dataclass(frozen=True)
class OuterUnionOp(PlanNode):
    left: PlanNode
    right: PlanNode


@dataclass(frozen=True)
class Let(PlanNode):
    name: str
    value: PlanNode
    body: PlanNode


@dataclass(frozen=True)
class ExprRoot(PlanNode):
    """A bare expression as a whole query."""
    scalar: ScalarPlan


_CHILD_FIELDS = ("value", "plan", "left", "right", "input", "body")


def walk_plan(p: PlanNode) -> Iterator[PlanNode]:
    yield p
    for f in _CHILD_FIELDS:
        child = getattr(p, f, None)
        if isinstance(child, PlanNode):
            yield from walk_plan(child)
    if isinstance(p, ExprRoot):
        for a in p.scalar.applies:
            yield from walk_plan(a)
    if isinstance(p, LimitOp):
        for a in p.count.applies:
            yield from walk_plan(a)


def plan_to_str(p: PlanNode, indent: int = 0) -> str:
    pad = "  " * indent
    detail = ""
    if isinstance(p, RemoteFetch):
        detail = f"({p.source}) {p.sql!r}"
    elif isinstance(p, Scan):
        detail = f"{p.source}.{'.'.join(p.path)} as {p.alias}"
    elif isinstance(p, LocalTable):
        detail = p.name + "".join("." + s for s in p.path) + f" as {p.alias}"
    elif isinstance(p, AliasTable):
        detail = p.alias + "".join("." + s for s in p.path) + f" as {p.out_alias}"
    elif isinstance(p, Join):
        detail = p.kind + (" +inlist" if p.in_push else "")
    elif isinstance(p, Apply):
        detail = f"{p.slot} ({p.mode})"
    elif isinstance(p, Let):
        detail = p.name
    elif isinstance(p, Sort):
        detail = ", ".join(n + (" desc" if d else "") for n, d in p.keys)
    lines = [f"{pad}{type(p).__name__} {detail}".rstrip()]
    for f in _CHILD_FIELDS:
        child = getattr(p, f, None)
        if isinstance(child, PlanNode):
            lines.append(plan_to_str(child, indent + 1))
    if isinstance(p, ExprRoot):
        for a in p.scalar.applies:
            lines.append(plan_to_str(a, indent + 1))
    return "\n".join(lines)


# --- catalog -----------------------------------------------------------------


class SqlSourceInfo:
    """What the planner needs to know about a pushdown-capable source."""

    def __init__(self, name: str, tables: dict[str, tuple[str, ...]]):
        self.name = name
        self.tables = tables  # table name -> column names in declared order


@dataclass
class PlannerCatalog:
    """Static source facts for planning, built from a source registry."""
    sql_sources: dict[str, SqlSourceInfo] = dc_field(default_factory=dict)
    pushdown: bool = True
    inlist_threshold: int = DEFAULT_INLIST_THRESHOLD

    @classmethod
    def from_registry(cls, registry, pushdown: bool = True,
                      inlist_threshold: int = DEFAULT_INLIST_THRESHOLD
                      ) -> "PlannerCatalog":
        infos = {}
        for name, src in registry.app_sources.items():
            if getattr(src, "supports_pushdown", False):
                infos[name] = SqlSourceInfo(
                    name, {t: tuple(src.columns(t)) for t in src.tables()})
        return cls(infos, pushdown, inlist_threshold)


class _NotPushable(Exception):
    pass


# --- SQL generation ----------------------------------------------------------


class _SqlGen:
    """Generates adapter SQL for one source and collects bind expressions.

    `local_aliases` maps the aliases whose columns may appear as plain
    column references: the pushed FROM group, extended by subquery aliases
    during correlated sub-select generation.  Any construct whose adapter
    result could differ from the in-memory engine's raises _NotPushable.
    """

    def __init__(self, info: SqlSourceInfo, local_aliases: dict[str, str],
                 binds: list[Node], bare_alias: str | None = None,
                 allow_subqueries: bool = True):
        self.info = info
        self.local_aliases = local_aliases
        self.binds = binds
        # alias whose columns render unqualified (UPDATE/DELETE statements)
        self.bare_alias = bare_alias
        self.allow_subqueries = allow_subqueries

    def value(self, e: Node) -> str:
        if isinstance(e, Lit):
            return self.literal(e.value, predicate=False)
        if isinstance(e, AliasRef):
            if e.alias == self.bare_alias:
                if len(e.path) != 1:
                    raise _NotPushable()
                return f'"{e.path[0]}"'
            if e.alias in self.local_aliases:
                if len(e.path) != 1:
                    raise _NotPushable()
                return f'"{e.alias}"."{e.path[0]}"'
            return self.bind(e)
        if isinstance(e, (LocalRef, SourceRef)):
            return self.bind(e)
        if isinstance(e, Unary) and e.op == "-":
            return f"(- {self.value(e.operand)})"
        if isinstance(e, Binary) and e.op in ("+", "-", "*", "/", "||"):
            return f"({self.value(e.left)} {e.op} {self.value(e.right)})"
        if isinstance(e, FuncCall) and e.name in AGGREGATES:
            if e.star:
                return "count(*)"
            return f"{e.name}({self.value(e.args[0])})"
        # comparisons yield 0/1 on the adapter but booleans in the engine,
        # so they are only expressible in predicate position
        raise _NotPushable()

    def predicate(self, e: Node) -> str:
        if isinstance(e, Binary):
            if e.op in ("and", "or"):
                return f"({self.predicate(e.left)} {e.op} {self.predicate(e.right)})"
            if e.op in ("=", "<>", "<", "<=", ">", ">="):
                return f"({self.value(e.left)} {e.op} {self.value(e.right)})"
        if isinstance(e, Unary) and e.op == "not":
            return f"(not {self.predicate(e.operand)})"
        if isinstance(e, IsNull):
            kw = "is not null" if e.negated else "is null"
            return f"({self.value(e.operand)} {kw})"
        if isinstance(e, InList):
            items = ", ".join(self.value(x) for x in e.items)
            kw = "not in" if e.negated else "in"
            return f"({self.value(e.needle)} {kw} ({items}))"
        if isinstance(e, Exists):
            if not self.allow_subqueries:
                raise _NotPushable()
            return f"exists ({self.subquery(e.query, exists=True)})"
        if isinstance(e, InQuery):
            if not self.allow_subqueries:
                raise _NotPushable()
            kw = "not in" if e.negated else "in"
            return f"({self.value(e.needle)} {kw} ({self.subquery(e.query, exists=False)}))"
        if isinstance(e, Lit) and e.value.kind == "boolean":
            return self.literal(e.value, predicate=True)
        # bare value in predicate position: adapter truthiness matches the
        # engine's for every value an adapter table can hold
        return self.value(e)

    def literal(self, s: Scalar, predicate: bool) -> str:
        if s.kind == "null":
            return "null"
        if s.kind == "integer":
            return str(s.value)
        if s.kind == "double":
            return repr(float(s.value))
        if s.kind == "string":
            return "'" + str(s.value).replace("'", "''") + "'"
        if s.kind == "boolean":
            if predicate:
                return "(1 = 1)" if s.value else "(0 = 1)"
            raise _NotPushable()  # adapter would yield 0/1, not a boolean
        raise _NotPushable()  # timestamps, binaries stay local

    def bind(self, e: Node) -> str:
        self.binds.append(e)
        return "?"

    def subquery(self, q: QueryNode, exists: bool) -> str:
        """A correlated sub-select inside the same pushed statement."""
        if not isinstance(q, SelectBlock):
            raise _NotPushable()
        if q.group_by or q.order_by or q.limit is not None or q.distinct:
            raise _NotPushable()
        sub_aliases = dict(self.local_aliases)
        for f in q.from_items:
            if f.join_kind not in (None, "inner"):
                raise _NotPushable()
            if not (isinstance(f.source, SourceRef)
                    and f.source.source == self.info.name
                    and len(f.source.path) == 1
                    and f.source.path[0] in self.info.tables):
                raise _NotPushable()
            sub_aliases[f.alias] = f.source.path[0]
        inner = _SqlGen(self.info, sub_aliases, self.binds)
        conjuncts: list[str] = []
        for f in q.from_items:
            if f.on is not None:
                conjuncts.append(inner.predicate(f.on))
        if q.where is not None:
            conjuncts.append(inner.predicate(q.where))
        if exists:
            # EXISTS ignores the select list; queries cannot have effects
            select_list = "1"
        else:
            if len(q.items) != 1 or q.items[0].star_of is not None:
                raise _NotPushable()
            select_list = inner.value(q.items[0].expr)  # type: ignore[arg-type]
        froms = ", ".join(
            f'"{f.source.path[0]}" "{f.alias}"'  # type: ignore[union-attr]
            for f in q.from_items)
        sql = f"select {select_list} from {froms}"
        if conjuncts:
            sql += " where " + " and ".join(conjuncts)
        return sql


# --- reference availability ----------------------------------------------------


def _refs_ok(e: Node, allowed: set[str], block_aliases: set[str]) -> bool:
    """True when every alias reference is either a pushed column (`allowed`)
    or belongs to an enclosing query, whose row context exists when the
    fetch runs.  Same-block aliases outside the pushed group are produced by
    the local join loop after the fetch, so they disqualify the conjunct."""
    if isinstance(e, AliasRef):
        return e.alias in allowed or e.alias not in block_aliases
    if isinstance(e, (Lit, LocalRef, SourceRef)):
        return True
    if isinstance(e, Unary):
        return _refs_ok(e.operand, allowed, block_aliases)
    if isinstance(e, Binary):
        return (_refs_ok(e.left, allowed, block_aliases)
                and _refs_ok(e.right, allowed, block_aliases))
    if isinstance(e, IsNull):
        return _refs_ok(e.operand, allowed, block_aliases)
    if isinstance(e, InList):
        return (_refs_ok(e.needle, allowed, block_aliases)
                and all(_refs_ok(x, allowed, block_aliases) for x in e.items))
    if isinstance(e, FuncCall):
        return all(_refs_ok(a, allowed, block_aliases) for a in e.args)
    if isinstance(e, (Exists, InQuery)):
        q = e.query
        if not isinstance(q, SelectBlock):
            return False
        sub_allowed = allowed | {f.alias for f in q.from_items}
        ok = all(_refs_ok(f.on, sub_allowed, block_aliases)
                 for f in q.from_items if f.on is not None)
        if q.where is not None:
            ok = ok and _refs_ok(q.where, sub_allowed, block_aliases)
        if isinstance(e, InQuery):
            ok = ok and _refs_ok(e.needle, allowed, block_aliases)
            ok = ok and all(
                _refs_ok(it.expr, sub_allowed, block_aliases)
                for it in q.items if it.expr is not None)
        return ok
    return False


# --- the compiler ---------------------------------------------------------------


_FETCH_IDS = itertools.count(1)


class _Compiler:
    def __init__(self, catalog: PlannerCatalog):
        self.catalog = catalog
        self.counter = itertools.count(1)

    def fresh_fetch_id(self) -> int:
        # process-wide: fetch ids key runtime state shared across plans
        return next(_FETCH_IDS)

    def fresh_slot(self) -> str:
        return f"__q{next(self.counter)}"

    # queries ------------------------------------------------------------

    def query(self, q: QueryNode) -> PlanNode:
        if isinstance(q, WithQuery):
            plan = self.query(q.body)
            for name, sub in reversed(q.bindings):
                plan = Let(name, self.query(sub), plan)
            return plan
        if isinstance(q, Union):
            return UnionOp(self.query(q.left), self.query(q.right), q.all)
        if isinstance(q, OuterUnion):
            return OuterUnionOp(self.query(q.left), self.query(q.right))
        if isinstance(q, ExprQuery):
            return ExprRoot(self.scalar(q.expr))
        if isinstance(q, SelectBlock):
            return self.select_block(q)
        raise TypeError(f"unexpected query node {type(q).__name__}")

    def scalar(self, e: Node) -> ScalarPlan:
        applies: list[Apply] = []
        expr = self._rewrite_subqueries(e, applies)
        return ScalarPlan(tuple(applies), expr)

    def _rewrite_subqueries(self, e: Node, applies: list[Apply]) -> Node:
        if isinstance(e, SubQueryExpr):
            slot = self.fresh_slot()
            applies.append(Apply(None, slot, self.query(e.query), "table"))
            return AliasRef(slot, ())
        if isinstance(e, Exists):
            slot = self.fresh_slot()
            applies.append(Apply(None, slot, self.query(e.query), "exists"))
            return AliasRef(slot, ())
        if isinstance(e, InQuery):
            slot = self.fresh_slot()
            applies.append(Apply(None, slot, self.query(e.query), "table"))
            needle = self._rewrite_subqueries(e.needle, applies)
            return InTable(needle, slot, e.negated)
        if isinstance(e, Unary):
            return replace(e, operand=self._rewrite_subqueries(e.operand, applies))
        if isinstance(e, Binary):
            return replace(e,
                           left=self._rewrite_subqueries(e.left, applies),
                           right=self._rewrite_subqueries(e.right, applies))
        if isinstance(e, IsNull):
            return replace(e, operand=self._rewrite_subqueries(e.operand, applies))
        if isinstance(e, InList):
            return replace(
                e,
                needle=self._rewrite_subqueries(e.needle, applies),
                items=tuple(self._rewrite_subqueries(x, applies) for x in e.items))
        if isinstance(e, FuncCall):
            return replace(e, args=tuple(
                self._rewrite_subqueries(a, applies) for a in e.args))
        return e

    # select blocks -----------------------------------------------------

    def select_block(self, q: SelectBlock) -> PlanNode:
        if self.catalog.pushdown:
            whole = self._try_whole_push(q)
            if whole is not None:
                return whole
        return self._compile_local(q)

    def _source_info_for(self, f: FromItem) -> SqlSourceInfo | None:
        if not isinstance(f.source, SourceRef):
            return None
        info = self.catalog.sql_sources.get(f.source.source)
        if info is None or len(f.source.path) != 1:
            return None
        if f.source.path[0] not in info.tables:
            return None
        return info

    def _try_whole_push(self, q: SelectBlock) -> PlanNode | None:
        if not q.from_items:
            return None
        infos = [self._source_info_for(f) for f in q.from_items]
        if any(i is None for i in infos):
            return None
        if len({i.name for i in infos}) != 1:  # type: ignore[union-attr]
            return None
        info = infos[0]
        assert info is not None
        aliases = {f.alias: f.source.path[0]  # type: ignore[union-attr]
                   for f in q.from_items}
        binds: list[Node] = []
        gen = _SqlGen(info, aliases, binds)
        try:
            sql, out_names, has_where = self._gen_whole(q, gen, aliases)
        except _NotPushable:
            return None
        order_kind = INTENTIONAL if q.order_by else COINCIDENTAL
        return RemoteFetch(self.fresh_fetch_id(), info.name, sql,
                           tuple(binds), "flat", out_names=tuple(out_names),
                           has_where=has_where, order_kind=order_kind)

    def _gen_whole(self, q: SelectBlock, gen: _SqlGen,
                   aliases: dict[str, str]) -> tuple[str, list[str], bool]:
        select_parts: list[str] = []
        out_names: list[str] = []

        def add_name(n: str) -> None:
            if n in out_names:
                raise _NotPushable()
            out_names.append(n)

        for it in q.items:
            if it.star_of is not None:
                for a in ([it.star_of] if it.star_of else list(aliases)):
                    for col in gen.info.tables[aliases[a]]:
                        select_parts.append(f'"{a}"."{col}"')
                        add_name(col)
                continue
            assert it.expr is not None and it.alias is not None
            select_parts.append(gen.value(it.expr))
            add_name(it.alias)

        from_sql = ""
        where_conj: list[str] = []
        for i, f in enumerate(q.from_items):
            table = f.source.path[0]  # type: ignore[union-attr]
            piece = f'"{table}" "{f.alias}"'
            if i == 0:
                from_sql = piece
            elif f.join_kind in (None, "inner"):
                from_sql += ", " + piece
                if f.on is not None:
                    where_conj.append(gen.predicate(f.on))
            elif f.join_kind == "left":
                if f.on is None:
                    raise _NotPushable()
                from_sql += f" left join {piece} on {gen.predicate(f.on)}"
            else:
                raise _NotPushable()
        if q.where is not None:
            where_conj.append(gen.predicate(q.where))

        sql = "select " + ("distinct " if q.distinct else "")
        sql += ", ".join(select_parts) + " from " + from_sql
        if where_conj:
            sql += " where " + " and ".join(where_conj)
        if q.group_by:
            sql += " group by " + ", ".join(gen.value(g) for g in q.group_by)
        if q.order_by:
            sql += " order by " + ", ".join(
                gen.value(o.expr) + (" desc" if o.descending else "")
                for o in q.order_by)
        if q.limit is not None:
            if not isinstance(q.limit, Lit) or q.limit.value.kind != "integer":
                raise _NotPushable()
            sql += f" limit {q.limit.value.value}"
        return sql, out_names, bool(where_conj)

    # local pipeline ---------------------------------------------------

    def _compile_local(self, q: SelectBlock) -> PlanNode:
        conjuncts = _split_conjuncts(q.where)
        block_aliases = {f.alias for f in q.from_items}

        # items before the first left join form inner/cross chains and may
        # be regrouped freely; conjuncts moved across a later left join only
        # ever mention left-side aliases, which its padding never nulls
        first_left = len(q.from_items)
        for i, f in enumerate(q.from_items):
            if f.join_kind == "left":
                first_left = i
                break

        pushed_item_idx: dict[int, int] = {}  # from index -> fetch index
        fetches: list[RemoteFetch] = []
        if self.catalog.pushdown:
            by_source: dict[str, list[int]] = {}
            for i, f in enumerate(q.from_items[:first_left]):
                if f.join_kind not in (None, "inner"):
                    continue
                info = self._source_info_for(f)
                if info is not None:
                    by_source.setdefault(info.name, []).append(i)
            for sname, idxs in by_source.items():
                fetch, conjuncts = self._partial_fetch(
                    q, sname, idxs, conjuncts, block_aliases)
                for i in idxs:
                    pushed_item_idx[i] = len(fetches)
                fetches.append(fetch)

        # fold the FROM list into a join tree; a pushed group's fetch enters
        # at its first member's position, later members are skipped
        plan: PlanNode | None = None
        emitted_fetch: set[int] = set()
        deferred_on: list[Node] = []
        for i, f in enumerate(q.from_items):
            on: Optional[Node] = None
            if i in pushed_item_idx:
                fi = pushed_item_idx[i]
                if fi in emitted_fetch:
                    continue
                emitted_fetch.add(fi)
                node: PlanNode = fetches[fi]
                kind = "cross"
            else:
                node = self._from_leaf(f)
                kind = "left" if f.join_kind == "left" else "cross"
                on = f.on
            if plan is None:
                plan = node
                if on is not None:
                    deferred_on.append(on)
            elif kind == "left":
                plan = Join(plan, node, "left", on)
            else:
                plan = Join(plan, node, "cross", None)
                if on is not None:
                    # inner-join conditions run in the shared filter; they
                    # only see aliases bound before them, so the move is safe
                    deferred_on.append(on)

        if plan is None:
            plan = Unit()

        local_pred = _conjoin(deferred_on + conjuncts)
        applies: list[Apply] = []
        pred_expr = (self._rewrite_subqueries(local_pred, applies)
                     if local_pred is not None else None)
        for a in applies:
            plan = Apply(plan, a.slot, a.plan, a.mode)
        if pred_expr is not None:
            plan = Filter(plan, pred_expr)

        if self.catalog.pushdown:
            plan = _push_inlists(plan, _collect_equalities(plan))

        if q.group_by or _has_aggregates(q):
            return self._finish_grouped(q, plan)
        return self._finish_plain(q, plan)

    def _finish_plain(self, q: SelectBlock, plan: PlanNode) -> PlanNode:
        item_applies: list[Apply] = []
        proj_items: list[ProjItem] = []
        star_aliases: set[str] = set()
        for it in q.items:
            if it.star_of is not None:
                if it.star_of == "":
                    # bare * covers the block's FROM aliases, in order
                    for f in q.from_items:
                        proj_items.append(ProjItem(None, None, f.alias))
                        star_aliases.add(f.alias)
                else:
                    proj_items.append(ProjItem(None, None, it.star_of))
                    star_aliases.add(it.star_of)
            else:
                expr = self._rewrite_subqueries(it.expr, item_applies)
                proj_items.append(ProjItem(it.alias, expr))

        hidden: list[str] = []
        sort_keys: list[tuple[str, bool]] = []
        for k, o in enumerate(q.order_by):
            matched = None
            for it in q.items:
                if it.star_of is None and it.expr == o.expr:
                    matched = it.alias
                    break
            if matched is None and isinstance(o.expr, AliasRef) \
                    and len(o.expr.path) == 1 and o.expr.alias in star_aliases:
                matched = o.expr.path[0]
            if matched is None:
                name = f"__s{k + 1}"
                expr = self._rewrite_subqueries(o.expr, item_applies)
                proj_items.append(ProjItem(name, expr))
                hidden.append(name)
                sort_keys.append((name, o.descending))
            else:
                sort_keys.append((matched, o.descending))

        for a in item_applies:
            plan = Apply(plan, a.slot, a.plan, a.mode)
        plan = Project(plan, tuple(proj_items))
        return self._finish_tail(q, plan, sort_keys, hidden)

    def _finish_tail(self, q: SelectBlock, plan: PlanNode,
                     sort_keys: list[tuple[str, bool]],
                     hidden: list[str]) -> PlanNode:
        if q.distinct:
            assert not hidden, "DISTINCT order keys must come from the select list"
            plan = Distinct(plan)
        if sort_keys:
            plan = Sort(plan, tuple(sort_keys))
        if hidden:
            plan = Strip(plan, tuple(hidden))
        if q.limit is not None:
            plan = LimitOp(plan, self.scalar(q.limit))
        return plan

    def _from_leaf(self, f: FromItem) -> PlanNode:
        if isinstance(f.source, SubQueryExpr):
            return SubPlanFrom(self.query(f.source.query), f.alias)
        if isinstance(f.source, SourceRef):
            return Scan(f.source.source, tuple(f.source.path), f.alias)
        if isinstance(f.source, LocalRef):
            return LocalTable(f.source.name, tuple(f.source.path), f.alias)
        if isinstance(f.source, AliasRef):
            return AliasTable(f.source.alias, tuple(f.source.path), f.alias)
        raise TypeError(f"unsupported FROM source {type(f.source).__name__}")

    def _partial_fetch(self, q: SelectBlock, sname: str, idxs: list[int],
                       conjuncts: list[Node], block_aliases: set[str]
                       ) -> tuple[RemoteFetch, list[Node]]:
        """Push the FROM items `idxs` (tables of source `sname`) as one
        fetch, absorbing every ON/WHERE conjunct that the dialect and
        reference availability allow.  Returns the fetch plus the conjuncts
        left for local evaluation."""
        info = self.catalog.sql_sources[sname]
        aliases = {q.from_items[i].alias: q.from_items[i].source.path[0]  # type: ignore[union-attr]
                   for i in idxs}
        binds: list[Node] = []
        gen = _SqlGen(info, aliases, binds)

        cols: list[str] = []
        groups = []
        for i in idxs:
            f = q.from_items[i]
            table = f.source.path[0]  # type: ignore[union-attr]
            tcols = info.tables[table]
            groups.append((f.alias, table, tcols))
            cols.extend(f'"{f.alias}"."{c}"' for c in tcols)

        candidates = [q.from_items[i].on for i in idxs
                      if q.from_items[i].on is not None]
        candidates.extend(conjuncts)
        where_parts: list[str] = []
        remaining: list[Node] = []
        for c in candidates:
            mark = len(binds)
            try:
                if not _refs_ok(c, set(aliases), block_aliases):
                    raise _NotPushable()
                where_parts.append(gen.predicate(c))
            except _NotPushable:
                del binds[mark:]
                remaining.append(c)

        froms = ", ".join(f'"{t}" "{a}"' for a, t, _ in groups)
        sql = f"select {', '.join(cols)} from {froms}"
        if where_parts:
            sql += " where " + " and ".join(where_parts)
        fetch = RemoteFetch(self.fresh_fetch_id(), sname, sql, tuple(binds),
                            "split", groups=tuple(groups),
                            has_where=bool(where_parts))
        return fetch, remaining

    # grouped blocks -----------------------------------------------------

    def _finish_grouped(self, q: SelectBlock, plan: PlanNode) -> PlanNode:
        keys: list[tuple[str, Node]] = [
            (f"k{i + 1}", g) for i, g in enumerate(q.group_by)]
        aggs: list[tuple[str, str, Optional[Node]]] = []

        def agg_slot(fc: FuncCall) -> Node:
            want = None if fc.star else fc.args[0]
            for name, fn, arg in aggs:
                if fn == fc.name and arg == want:
                    return AliasRef("__group", (name,))
            name = f"a{len(aggs) + 1}"
            aggs.append((name, fc.name, want))
            return AliasRef("__group", (name,))

        def rewrite(e: Node) -> Node:
            for kname, kexpr in keys:
                if e == kexpr:
                    return AliasRef("__group", (kname,))
            if isinstance(e, FuncCall) and e.name in AGGREGATES:
                return agg_slot(e)
            if isinstance(e, Unary):
                return replace(e, operand=rewrite(e.operand))
            if isinstance(e, Binary):
                return replace(e, left=rewrite(e.left), right=rewrite(e.right))
            if isinstance(e, IsNull):
                return replace(e, operand=rewrite(e.operand))
            if isinstance(e, InList):
                return replace(e, needle=rewrite(e.needle),
                               items=tuple(rewrite(x) for x in e.items))
            if isinstance(e, FuncCall):
                return replace(e, args=tuple(rewrite(a) for a in e.args))
            return e

        proj_items: list[ProjItem] = []
        for it in q.items:
            assert it.expr is not None and it.alias is not None
            proj_items.append(ProjItem(it.alias, rewrite(it.expr)))

        hidden: list[str] = []
        sort_keys: list[tuple[str, bool]] = []
        for k, o in enumerate(q.order_by):
            matched = None
            for it, pi in zip(q.items, proj_items):
                if it.expr == o.expr:
                    matched = pi.name
                    break
            if matched is None:
                name = f"__s{k + 1}"
                proj_items.append(ProjItem(name, rewrite(o.expr)))
                hidden.append(name)
                sort_keys.append((name, o.descending))
            else:
                sort_keys.append((matched, o.descending))

        plan = Group(plan, tuple(keys), tuple(aggs))
        plan = Project(plan, tuple(proj_items))
        return self._finish_tail(q, plan, sort_keys, hidden)


# --- conjunct utilities ---------------------------------------------------------


def _split_conjuncts(e: Node | None) -> list[Node]:
    if e is None:
        return []
    if isinstance(e, Binary) and e.op == "and":
        return _split_conjuncts(e.left) + _split_conjuncts(e.right)
    return [e]


def _conjoin(conjuncts: list[Node]) -> Node | None:
    if not conjuncts:
        return None
    out = conjuncts[0]
    for c in conjuncts[1:]:
        out = Binary("and", out, c)
    return out


def _has_aggregates(q: SelectBlock) -> bool:
    return any(it.expr is not None and _contains_aggregate(it.expr)
               for it in q.items)


# --- IN-list feeding ---------------------------------------------------------------


def _collect_equalities(plan: PlanNode):
    """(alias1, path1, alias2, path2) pairs from single-step alias
    equalities inside filters."""
    out = []
    for node in walk_plan(plan):
        if isinstance(node, Filter):
            for c in _split_conjuncts(node.pred):
                if (isinstance(c, Binary) and c.op == "="
                        and isinstance(c.left, AliasRef)
                        and isinstance(c.right, AliasRef)
                        and len(c.left.path) == 1 and len(c.right.path) == 1):
                    out.append((c.left.alias, c.left.path,
                                c.right.alias, c.right.path))
    return out


def _plan_aliases(plan: PlanNode) -> set[str]:
    out: set[str] = set()
    for node in walk_plan(plan):
        if isinstance(node, (Scan, LocalTable, SubPlanFrom)):
            out.add(node.alias)
        elif isinstance(node, AliasTable):
            out.add(node.out_alias)
        elif isinstance(node, RemoteFetch) and node.mode == "split":
            out.update(a for a, _, _ in node.groups)
    return out


def _first_split_fetch(plan: PlanNode) -> RemoteFetch | None:
    for node in walk_plan(plan):
        if isinstance(node, RemoteFetch) and node.mode == "split":
            return node
    return None


def _push_inlists(plan: PlanNode, equalities) -> PlanNode:
    """Where an equality links a join's left side to a fetch on its right,
    mark the join so the engine feeds the distinct left keys into the fetch
    as an extra IN filter.  The equality itself still runs locally, so the
    plan stays exact whatever the key count."""
    if not equalities:
        return plan
    if isinstance(plan, Filter):
        return replace(plan, input=_push_inlists(plan.input, equalities))
    if isinstance(plan, Apply) and plan.input is not None:
        return replace(plan, input=_push_inlists(plan.input, equalities))
    if not isinstance(plan, Join):
        return plan
    plan = replace(plan, left=_push_inlists(plan.left, equalities))
    fetch = _first_split_fetch(plan.right)
    if fetch is None:
        return plan
    left_aliases = _plan_aliases(plan.left)
    fetch_aliases = {a for a, _, _ in fetch.groups}
    for a1, p1, a2, p2 in equalities:
        if a1 in left_aliases and a2 in fetch_aliases:
            return replace(plan, in_push=(a1, p1, fetch.fetch_id,
                                          f'"{a2}"."{p2[0]}"'))
        if a2 in left_aliases and a1 in fetch_aliases:
            return replace(plan, in_push=(a2, p2, fetch.fetch_id,
                                          f'"{a1}"."{p1[0]}"'))
    return plan


# --- public API --------------------------------------------------------------------


plan_aliases = _plan_aliases


def compile_query(q: QueryNode, catalog: PlannerCatalog) -> PlanNode:
    return _Compiler(catalog).query(q)


def compile_scalar(e: Node, catalog: PlannerCatalog) -> ScalarPlan:
    return _Compiler(catalog).scalar(e)
