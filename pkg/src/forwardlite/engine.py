"""Evaluation of plans, expressions, and procedural statements.

Scalar semantics track what a SQL adapter produces for the same
expression, so pushing work down never changes a result: three-valued
logic, truncating integer division, null propagation on arithmetic, and
rank-ordered comparison across kinds.  Everything evaluates against an
Environment holding the live sources, the planner catalog, the callable
functions, and a stack of local frames.

Writes go through ``execute_dml``: memory sources get a value-level
delta, adapter tables get parameterized SQL, and every write appends an
Effect so callers can defer, replay, or feed view maintenance from the
log.  Local variables mutate silently; they are private to the run.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

from . import delta as deltas
from .delta import Delta, apply_delta
from .errors import (
    EvalError,
    ForwardError,
    PlsqlRaise,
    UnknownFunction,
    UnresolvableTarget,
    WriteInReadOnlyMode,
)
from .nodes import (
    Assign,
    Binary,
    Block,
    CallStmt,
    Declare,
    Delete,
    For,
    FuncCall,
    FunctionDecl,
    If,
    InList,
    Insert,
    IsNull,
    Lit,
    NextPage,
    Node,
    QueryNode,
    Raise,
    Return,
    Statement,
    Unary,
    Update,
    ValuesSource,
)
from .planner import (
    AliasTable,
    Apply,
    Distinct,
    ExprRoot,
    Filter,
    Group,
    InTable,
    Join,
    Let,
    LimitOp,
    LocalTable,
    OuterUnionOp,
    PlanNode,
    PlannerCatalog,
    Project,
    RemoteFetch,
    ScalarPlan,
    Scan,
    Sort,
    Strip,
    SubPlanFrom,
    Unit,
    UnionOp,
    _NotPushable,
    _SqlGen,
    compile_query,
    compile_scalar,
    plan_aliases,
)
from .resolver import AGGREGATES, AliasRef, LocalRef, SourceRef
from .sources import MemorySource, Source, SqlSource, to_sqlite_param
from .values import (
    INTENTIONAL,
    NULL,
    Scalar,
    Table,
    Tuple,
    Value,
    boolean,
    canonical_key,
    canonical_scalar_text,
    double,
    equals,
    integer,
    is_null,
    navigate,
    set_at,
    string,
    to_canonical_json,
    unwrap_row,
    wrap_row,
)

log = logging.getLogger(__name__)

READ_ONLY = "read-only"
READ_WRITE = "read-write"

Ctx = dict[str, Value]

_NUMERIC = ("integer", "double")


# --- effects ------------------------------------------------------------------


@dataclass(frozen=True)
class Effect:
    """One executed write: a precise delta for memory sources, or a
    stale-table marker when the write went through a SQL adapter."""
    source: str
    delta: Optional[Delta] = None
    table: Optional[str] = None


EffectLog = list


# --- functions ------------------------------------------------------------------


@dataclass(frozen=True)
class NativeFunction:
    name: str
    arity: Optional[int]  # None accepts any argument count
    fn: Callable[[list, "Environment"], Value]
    mutability: str = "immutable"


def _element(args: list, env: "Environment") -> Value:
    """Sole row of a table, unwrapped to its value when single-column."""
    v = args[0]
    if is_null(v):
        return NULL
    if not isinstance(v, Table):
        raise EvalError(f"element() expects a table, got {_describe(v)}")
    if len(v.rows) == 0:
        return NULL
    if len(v.rows) > 1:
        raise EvalError(f"element() of a table with {len(v.rows)} rows")
    row = v.rows[0]
    if len(row.fields) == 1:
        return row.fields[0][1]
    return row


def default_functions() -> dict:
    return {"element": NativeFunction("element", 1, _element)}


# --- environment ------------------------------------------------------------------


class Environment:
    """Everything one evaluation run needs.

    Child environments (function calls) share sources, functions, and the
    effect log but get their own frame stack; ``control`` is shared so a
    next_page issued inside a callee reaches the action driver.
    """

    def __init__(self, sources: dict[str, Source], catalog: PlannerCatalog,
                 functions: Optional[dict] = None, mode: str = READ_WRITE):
        self.sources = dict(sources)
        self.catalog = catalog
        self.functions = default_functions()
        if functions:
            self.functions.update(functions)
        self.mode = mode
        self.effects: list[Effect] = []
        self.frames: list[dict[str, Value]] = [{}]
        self.control: dict[str, object] = {"next_page": None}
        # fetch_id -> (column sql, keys): join-driven IN prefilters
        self.in_keys: dict[int, tuple[str, tuple[Scalar, ...]]] = {}

    def child(self, frames: Optional[list] = None,
              mode: Optional[str] = None) -> "Environment":
        env = Environment.__new__(Environment)
        env.sources = self.sources
        env.catalog = self.catalog
        env.functions = self.functions
        env.mode = mode if mode is not None else self.mode
        env.effects = self.effects
        env.frames = frames if frames is not None else [{}]
        env.control = self.control
        env.in_keys = self.in_keys
        return env

    def get_local(self, name: str) -> Value:
        for frame in reversed(self.frames):
            if name in frame:
                return frame[name]
        raise EvalError(f"unbound local {name!r}")

    def set_local(self, name: str, value: Value) -> None:
        for frame in reversed(self.frames):
            if name in frame:
                frame[name] = value
                return
        raise EvalError(f"unbound local {name!r}")


# --- scalar semantics ---------------------------------------------------------------

_RANKS = {"boolean": 0, "integer": 0, "double": 0,
          "timestamp": 1, "string": 2, "binary": 3}


def truthy3(v: Value) -> Optional[bool]:
    """Truth of a value: True, False, or None for unknown.  Numbers count
    as their non-zeroness, matching how adapters treat bare predicates."""
    if isinstance(v, Scalar):
        if v.kind == "null":
            return None
        if v.kind == "boolean":
            return bool(v.value)
        if v.kind in _NUMERIC:
            return v.value != 0
    raise EvalError(f"{_describe(v)} is not a truth value")


def eq3(a: Value, b: Value) -> Optional[bool]:
    """Equality with unknown.  Integers and doubles compare numerically;
    any other kind mix is simply unequal; structured values compare by
    model equality."""
    if is_null(a) or is_null(b):
        return None
    if isinstance(a, Scalar) and isinstance(b, Scalar):
        if a.kind in _NUMERIC and b.kind in _NUMERIC:
            return a.value == b.value
        if a.kind != b.kind:
            return False
        return a.value == b.value
    if isinstance(a, Scalar) or isinstance(b, Scalar):
        return False
    return equals(a, b)


def compare_values(a: Value, b: Value) -> int:
    """Total order used by sorting and min/max: nulls first, then numbers,
    timestamps, strings, binaries; structured values last, ordered by
    canonical text."""
    an, bn = is_null(a), is_null(b)
    if an and bn:
        return 0
    if an:
        return -1
    if bn:
        return 1
    ra, rb = _rank(a), _rank(b)
    if ra != rb:
        return -1 if ra < rb else 1
    ka, kb = _order_key(a), _order_key(b)
    if ka < kb:
        return -1
    if ka > kb:
        return 1
    return 0


def _rank(v: Value) -> int:
    if isinstance(v, Scalar):
        return _RANKS.get(v.kind, 4)
    return 5


def _order_key(v: Value):
    if isinstance(v, Scalar):
        if v.kind == "boolean":
            return int(v.value)
        return v.value
    return to_canonical_json(v)


def sql_key(v: Value):
    """Hashable grouping and dedupe key with adapter semantics: integers
    and doubles collide when numerically equal, booleans stay apart from
    numbers, structured values key by canonical form."""
    if isinstance(v, Scalar):
        if v.kind == "null":
            return ("null",)
        if v.kind == "boolean":
            return ("b", bool(v.value))
        if v.kind in _NUMERIC:
            return ("n", v.value)
        if v.kind == "string":
            return ("s", v.value)
        return (v.kind, canonical_scalar_text(v))
    return ("v", canonical_key(v))


def _row_key(row: Tuple):
    # sort by field name only: key tuples of mixed kinds don't compare
    return tuple(sorted(((n, sql_key(v)) for n, v in row.fields),
                        key=lambda p: p[0]))


def _describe(v: Value) -> str:
    if isinstance(v, Scalar):
        return f"a {v.kind} scalar"
    if isinstance(v, Tuple):
        return "a tuple"
    if isinstance(v, Table):
        return "a table"
    return type(v).__name__


# --- expression evaluation ------------------------------------------------------


def eval_expr(e: Node, env: Environment, ctx: Ctx) -> Value:
    if isinstance(e, Lit):
        return e.value
    if isinstance(e, AliasRef):
        try:
            root = ctx[e.alias]
        except KeyError:
            raise EvalError(f"alias {e.alias!r} is not in scope here") from None
        return _nav(root, e.path)
    if isinstance(e, LocalRef):
        return _nav(env.get_local(e.name), e.path)
    if isinstance(e, SourceRef):
        src = env.sources.get(e.source)
        if src is None:
            raise EvalError(f"source {e.source!r} is not available here")
        return src.get_value(tuple(e.path))
    if isinstance(e, Unary):
        if e.op == "-":
            v = eval_expr(e.operand, env, ctx)
            if is_null(v):
                return NULL
            if isinstance(v, Scalar) and v.kind == "integer":
                return integer(-v.value)
            if isinstance(v, Scalar) and v.kind == "double":
                return double(-v.value)
            raise EvalError(f"cannot negate {_describe(v)}")
        if e.op == "not":
            t = truthy3(eval_expr(e.operand, env, ctx))
            return NULL if t is None else boolean(not t)
        raise EvalError(f"unknown unary operator {e.op!r}")
    if isinstance(e, Binary):
        return _binary(e, env, ctx)
    if isinstance(e, IsNull):
        null = is_null(eval_expr(e.operand, env, ctx))
        return boolean(not null if e.negated else null)
    if isinstance(e, InList):
        needle = eval_expr(e.needle, env, ctx)
        return _membership(
            needle, (eval_expr(x, env, ctx) for x in e.items), e.negated)
    if isinstance(e, InTable):
        needle = eval_expr(e.needle, env, ctx)
        tbl = ctx.get(e.slot)
        if not isinstance(tbl, Table):
            raise EvalError("IN subquery did not produce a table")
        if not tbl.rows:
            # empty set: false regardless of the needle, even null
            return boolean(e.negated)
        return _membership(
            needle, (_member_value(r) for r in tbl.rows), e.negated)
    if isinstance(e, FuncCall):
        if e.name in AGGREGATES:
            raise EvalError(f"misplaced aggregate {e.name}()")
        args = [eval_expr(a, env, ctx) for a in e.args]
        return call_function(e.name, args, env)
    raise EvalError(f"cannot evaluate {type(e).__name__} here")


def _nav(root: Value, path) -> Value:
    """Navigate with null propagation: a null anywhere along the path
    yields null rather than an error."""
    cur = root
    for step in path:
        if is_null(cur):
            return NULL
        cur = navigate(cur, (step,))
    return cur


def _binary(e: Binary, env: Environment, ctx: Ctx) -> Value:
    op = e.op
    if op in ("and", "or"):
        la = truthy3(eval_expr(e.left, env, ctx))
        lb = truthy3(eval_expr(e.right, env, ctx))
        if op == "and":
            if la is False or lb is False:
                return boolean(False)
            if la is None or lb is None:
                return NULL
            return boolean(True)
        if la is True or lb is True:
            return boolean(True)
        if la is None or lb is None:
            return NULL
        return boolean(False)
    a = eval_expr(e.left, env, ctx)
    b = eval_expr(e.right, env, ctx)
    if op in ("+", "-", "*", "/"):
        return _arith(op, a, b)
    if op == "||":
        return _concat(a, b)
    if op in ("=", "<>"):
        r = eq3(a, b)
        if r is None:
            return NULL
        return boolean(r != (op == "<>"))
    if op in ("<", "<=", ">", ">="):
        if is_null(a) or is_null(b):
            return NULL
        if not (isinstance(a, Scalar) and isinstance(b, Scalar)):
            raise EvalError(
                f"ordering comparison of {_describe(a)} and {_describe(b)}")
        c = compare_values(a, b)
        return boolean({"<": c < 0, "<=": c <= 0,
                        ">": c > 0, ">=": c >= 0}[op])
    raise EvalError(f"unknown operator {op!r}")


def _arith(op: str, a: Value, b: Value) -> Value:
    if is_null(a) or is_null(b):
        return NULL
    if not (isinstance(a, Scalar) and a.kind in _NUMERIC
            and isinstance(b, Scalar) and b.kind in _NUMERIC):
        raise EvalError(
            f"arithmetic needs numbers, got {_describe(a)} {op} {_describe(b)}")
    x, y = a.value, b.value
    if op == "/":
        if y == 0:
            log.warning("division by zero yields null")
            return NULL
        if a.kind == "integer" and b.kind == "integer":
            q = abs(x) // abs(y)  # truncate toward zero
            return integer(-q if (x < 0) != (y < 0) else q)
        return double(x / y)
    r = {"+": x + y, "-": x - y, "*": x * y}[op]
    if a.kind == "double" or b.kind == "double":
        return double(r)
    return integer(r)


def _concat(a: Value, b: Value) -> Value:
    if is_null(a) or is_null(b):
        return NULL
    return string(_text(a) + _text(b))


def _text(v: Value) -> str:
    if isinstance(v, Scalar):
        if v.kind == "string":
            return v.value
        if v.kind == "integer":
            return str(v.value)
        if v.kind == "double":
            return repr(float(v.value))
    raise EvalError(f"cannot concatenate {_describe(v)}")


def _membership(needle: Value, candidates, negated: bool) -> Value:
    unknown = False
    for cand in candidates:
        r = eq3(needle, cand)
        if r is True:
            return boolean(not negated)
        if r is None:
            unknown = True
    if unknown:
        return NULL
    return boolean(negated)


def _member_value(row: Tuple) -> Value:
    if len(row.fields) != 1:
        raise EvalError("IN subquery must produce a single column")
    return row.fields[0][1]


# --- aggregates ---------------------------------------------------------------


def _aggregate(fn: str, arg: Optional[Node], ctxs: list[Ctx],
               env: Environment) -> Value:
    if fn == "count":
        if arg is None:
            return integer(len(ctxs))
        return integer(sum(
            1 for c in ctxs if not is_null(eval_expr(arg, env, c))))
    vals = [eval_expr(arg, env, c) for c in ctxs]
    vals = [v for v in vals if not is_null(v)]
    if fn in ("min", "max"):
        if not vals:
            return NULL
        best = vals[0]
        for v in vals[1:]:
            c = compare_values(v, best)
            if (c < 0) if fn == "min" else (c > 0):
                best = v
        return best
    for v in vals:
        if not (isinstance(v, Scalar) and v.kind in _NUMERIC):
            raise EvalError(f"{fn}() over {_describe(v)}")
    if fn == "sum":
        if not vals:
            return NULL
        if all(v.kind == "integer" for v in vals):
            return integer(sum(v.value for v in vals))
        return double(sum(float(v.value) for v in vals))
    if fn == "avg":
        if not vals:
            return NULL
        return double(sum(float(v.value) for v in vals) / len(vals))
    raise EvalError(f"unknown aggregate {fn!r}")


# --- plan evaluation ---------------------------------------------------------------


def eval_contexts(plan: PlanNode, env: Environment, ctx: Ctx) -> list[Ctx]:
    """Evaluate a row-context producer.  The incoming context threads
    through so correlated references keep working; every row extends it."""
    if isinstance(plan, Unit):
        return [dict(ctx)]
    if isinstance(plan, Scan):
        src = env.sources.get(plan.source)
        if src is None:
            raise EvalError(f"source {plan.source!r} is not available here")
        what = plan.source + "".join("." + s for s in plan.path)
        return _extend_rows(ctx, plan.alias, src.get_value(tuple(plan.path)), what)
    if isinstance(plan, LocalTable):
        v = _nav(env.get_local(plan.name), plan.path)
        what = plan.name + "".join("." + s for s in plan.path)
        return _extend_rows(ctx, plan.alias, v, what)
    if isinstance(plan, AliasTable):
        try:
            root = ctx[plan.alias]
        except KeyError:
            raise EvalError(f"alias {plan.alias!r} is not in scope here") from None
        what = plan.alias + "".join("." + s for s in plan.path)
        return _extend_rows(ctx, plan.out_alias, _nav(root, plan.path), what)
    if isinstance(plan, SubPlanFrom):
        v = _as_table(evaluate_plan(plan.plan, env, ctx))
        return _extend_rows(ctx, plan.alias, v, "subquery")
    if isinstance(plan, RemoteFetch):
        out = []
        for raw in _run_fetch(plan, env, ctx):
            c = dict(ctx)
            off = 0
            for alias, _table, cols in plan.groups:
                c[alias] = Tuple(tuple(
                    (n, raw[off + i]) for i, n in enumerate(cols)))
                off += len(cols)
            out.append(c)
        return out
    if isinstance(plan, Join):
        return _join(plan, env, ctx)
    if isinstance(plan, Filter):
        return [c for c in eval_contexts(plan.input, env, ctx)
                if truthy3(eval_expr(plan.pred, env, c)) is True]
    if isinstance(plan, Apply):
        if plan.input is None:
            raise EvalError("subquery apply without an input")
        return [{**c, plan.slot: _apply_value(plan, env, c)}
                for c in eval_contexts(plan.input, env, ctx)]
    if isinstance(plan, Group):
        return _group(plan, env, ctx)
    raise EvalError(f"plan node {type(plan).__name__} cannot produce rows")


def _extend_rows(ctx: Ctx, alias: str, v: Value, what: str) -> list[Ctx]:
    if not isinstance(v, Table):
        raise EvalError(f"FROM item {what} is {_describe(v)}, not a table")
    return [{**ctx, alias: row} for row in v.rows]


def _as_table(v: Value) -> Table:
    if isinstance(v, Table):
        return v
    return Table((wrap_row(v),))


_MISSING = object()


def _join(plan: Join, env: Environment, ctx: Ctx) -> list[Ctx]:
    lefts = eval_contexts(plan.left, env, ctx)
    if not lefts:
        return []
    token = _arm_in_push(plan, lefts, env)
    try:
        # comma items never see their left neighbors, so one pass suffices
        rights = eval_contexts(plan.right, env, ctx)
    finally:
        _disarm_in_push(token, env)
    if plan.kind == "cross":
        return [{**l, **r} for l in lefts for r in rights]
    out = []
    pad = {a: NULL for a in plan_aliases(plan.right)}
    for l in lefts:
        matched = False
        for r in rights:
            merged = {**l, **r}
            if plan.on is None or truthy3(eval_expr(plan.on, env, merged)) is True:
                out.append(merged)
                matched = True
        if not matched:
            out.append({**l, **pad})
    return out


def _arm_in_push(plan: Join, lefts: list[Ctx], env: Environment):
    """Feed the distinct left-side join keys to the right-hand fetch as an
    IN prefilter when they are few enough and all plain scalars."""
    if plan.in_push is None:
        return None
    alias, path, fid, col = plan.in_push
    keys: dict = {}
    for l in lefts:
        root = l.get(alias)
        if root is None:
            return None
        v = _nav(root, tuple(path))
        if is_null(v):
            continue  # null never matches the equality anyway
        if not isinstance(v, Scalar):
            return None
        keys.setdefault(sql_key(v), v)
    if not keys or len(keys) > env.catalog.inlist_threshold:
        return None
    prev = env.in_keys.get(fid, _MISSING)
    env.in_keys[fid] = (col, tuple(keys.values()))
    return (fid, prev)


def _disarm_in_push(token, env: Environment) -> None:
    if token is None:
        return
    fid, prev = token
    if prev is _MISSING:
        env.in_keys.pop(fid, None)
    else:
        env.in_keys[fid] = prev


def _apply_value(a: Apply, env: Environment, ctx: Ctx) -> Value:
    v = evaluate_plan(a.plan, env, ctx)
    if a.mode == "exists":
        if not isinstance(v, Table):
            raise EvalError("EXISTS needs a table subquery")
        return boolean(len(v.rows) > 0)
    return v


def group_key(plan: Group, env: Environment,
              c: Ctx) -> tuple[tuple, list[tuple[str, Value]]]:
    kvs = [(kn, eval_expr(ke, env, c)) for kn, ke in plan.keys]
    return tuple(sql_key(v) for _, v in kvs), kvs


def group_row(plan: Group, kvs: list[tuple[str, Value]], members: list[Ctx],
              env: Environment) -> Tuple:
    fields = list(kvs)
    for an, fn, arg in plan.aggs:
        fields.append((an, _aggregate(fn, arg, members, env)))
    return Tuple(tuple(fields))


def _group(plan: Group, env: Environment, ctx: Ctx) -> list[Ctx]:
    members = eval_contexts(plan.input, env, ctx)
    buckets: dict[tuple, list[Ctx]] = {}
    kvals: dict[tuple, list[tuple[str, Value]]] = {}
    for c in members:
        key, kvs = group_key(plan, env, c)
        if key not in buckets:
            buckets[key] = []
            kvals[key] = kvs
        buckets[key].append(c)
    if not buckets and not plan.keys:
        # ungrouped aggregate over nothing still yields one row
        buckets[()] = []
        kvals[()] = []
    return [{**ctx, "__group": group_row(plan, kvals[key], group, env)}
            for key, group in buckets.items()]


def _run_fetch(fetch: RemoteFetch, env: Environment, ctx: Ctx) -> list[list[Scalar]]:
    src = env.sources.get(fetch.source)
    if not isinstance(src, SqlSource):
        raise EvalError(f"source {fetch.source!r} is not available here")
    params = [to_sqlite_param(eval_expr(b, env, ctx)) for b in fetch.binds]
    sql = fetch.sql
    hint = env.in_keys.get(fetch.fetch_id)
    if hint is not None:
        col, keys = hint
        marks = ", ".join("?" for _ in keys)
        sql += (" and " if fetch.has_where else " where ") + f"{col} in ({marks})"
        params.extend(to_sqlite_param(k) for k in keys)
    return src.run_select_raw(sql, tuple(params))


def evaluate_plan(plan: PlanNode, env: Environment,
                  ctx: Optional[Ctx] = None) -> Value:
    """Evaluate a value-producing plan node against a row context."""
    ctx = ctx if ctx is not None else {}
    if isinstance(plan, Project):
        rows = tuple(_project_row(plan.items, env, c)
                     for c in eval_contexts(plan.input, env, ctx))
        return Table(rows)
    if isinstance(plan, Distinct):
        inner = _as_table(evaluate_plan(plan.input, env, ctx))
        seen = set()
        rows = []
        for r in inner.rows:
            k = _row_key(r)
            if k not in seen:
                seen.add(k)
                rows.append(r)
        return Table(tuple(rows))
    if isinstance(plan, Sort):
        inner = _as_table(evaluate_plan(plan.input, env, ctx))
        return Table(sorted_rows(plan.keys, inner.rows), INTENTIONAL)
    if isinstance(plan, Strip):
        inner = _as_table(evaluate_plan(plan.input, env, ctx))
        drop = set(plan.fields)
        rows = tuple(Tuple(tuple((n, v) for n, v in r.fields if n not in drop))
                     for r in inner.rows)
        return Table(rows, inner.order_kind)
    if isinstance(plan, LimitOp):
        inner = _as_table(evaluate_plan(plan.input, env, ctx))
        n = eval_scalar_plan(plan.count, env, ctx)
        if not (isinstance(n, Scalar) and n.kind == "integer"):
            raise EvalError(f"LIMIT needs an integer, got {_describe(n)}")
        if n.value < 0:
            return inner
        return Table(inner.rows[:n.value], inner.order_kind)
    if isinstance(plan, UnionOp):
        return _union(plan, env, ctx)
    if isinstance(plan, OuterUnionOp):
        lt = _as_table(evaluate_plan(plan.left, env, ctx))
        rt = _as_table(evaluate_plan(plan.right, env, ctx))
        return Table(lt.rows + rt.rows)
    if isinstance(plan, Let):
        v = evaluate_plan(plan.value, env, ctx)
        env.frames.append({plan.name: v})
        try:
            return evaluate_plan(plan.body, env, ctx)
        finally:
            env.frames.pop()
    if isinstance(plan, ExprRoot):
        return eval_scalar_plan(plan.scalar, env, ctx)
    if isinstance(plan, RemoteFetch) and plan.mode == "flat":
        rows = tuple(Tuple(tuple(zip(plan.out_names, raw)))
                     for raw in _run_fetch(plan, env, ctx))
        return Table(rows, plan.order_kind)
    raise EvalError(f"plan node {type(plan).__name__} cannot produce a value")


def sorted_rows(keys: tuple[tuple[str, bool], ...],
                rows: Iterable[Tuple]) -> tuple[Tuple, ...]:
    def cmp(r1: Tuple, r2: Tuple) -> int:
        for name, desc in keys:
            c = compare_values(_field_or_null(r1, name),
                               _field_or_null(r2, name))
            if c:
                return -c if desc else c
        return 0

    return tuple(sorted(rows, key=functools.cmp_to_key(cmp)))


def _project_row(items, env: Environment, ctx: Ctx) -> Tuple:
    fields: list[tuple[str, Value]] = []
    for it in items:
        if it.star_of is not None:
            root = ctx.get(it.star_of)
            if root is None:
                raise EvalError(f"alias {it.star_of!r} is not in scope here")
            if is_null(root):
                continue  # padded side of a left join contributes nothing
            if not isinstance(root, Tuple):
                raise EvalError(
                    f"cannot expand {it.star_of}.*: row is {_describe(root)}")
            fields.extend(root.fields)
        else:
            fields.append((it.name, eval_expr(it.expr, env, ctx)))
    try:
        return Tuple(tuple(fields))
    except ValueError as ex:
        raise EvalError(str(ex)) from None


def _field_or_null(row: Tuple, name: str) -> Value:
    v = row.get(name)
    return NULL if v is None else v


def _union(plan: UnionOp, env: Environment, ctx: Ctx) -> Value:
    lt = _as_table(evaluate_plan(plan.left, env, ctx))
    rt = _as_table(evaluate_plan(plan.right, env, ctx))
    return union_tables(lt, rt, plan.all)


def union_tables(lt: Table, rt: Table, all_: bool) -> Table:
    template: Optional[tuple[str, ...]] = None
    out: list[Tuple] = []
    for r in lt.rows + rt.rows:
        if template is None:
            template = r.names()
        vals = tuple(v for _, v in r.fields)
        if len(vals) != len(template):
            raise EvalError(
                f"UNION operands have {len(template)} and {len(vals)} columns")
        out.append(Tuple(tuple(zip(template, vals))))
    if not all_:
        seen = set()
        dedup = []
        for r in out:
            k = tuple(sql_key(v) for _, v in r.fields)
            if k not in seen:
                seen.add(k)
                dedup.append(r)
        out = dedup
    return Table(tuple(out))


def eval_scalar_plan(sp: ScalarPlan, env: Environment, ctx: Ctx) -> Value:
    c = dict(ctx)
    for a in sp.applies:
        c[a.slot] = _apply_value(a, env, c)
    return eval_expr(sp.expr, env, c)


# --- public query entry points ----------------------------------------------------


def evaluate_query(q: QueryNode, env: Environment,
                   ctx: Optional[Ctx] = None) -> Value:
    plan = compile_query(q, env.catalog)
    return evaluate_plan(plan, env, dict(ctx) if ctx else {})


def evaluate_expression(e: Node, env: Environment,
                        ctx: Optional[Ctx] = None) -> Value:
    sp = compile_scalar(e, env.catalog)
    return eval_scalar_plan(sp, env, dict(ctx) if ctx else {})


def _eval_standalone(e: Node, env: Environment) -> Value:
    return evaluate_expression(e, env)


# --- data modification ------------------------------------------------------------


def execute_dml(st: Statement, env: Environment) -> None:
    if env.mode == READ_ONLY:
        raise WriteInReadOnlyMode(
            f"{type(st).__name__.lower()} statement in read-only evaluation")
    target = st.target  # type: ignore[union-attr]
    if isinstance(target, LocalRef):
        _dml_local(st, target, env)
        return
    if isinstance(target, SourceRef):
        src = env.sources.get(target.source)
        if src is None:
            raise UnresolvableTarget(
                f"source {target.source!r} is not available here")
        if isinstance(src, MemorySource):
            _dml_memory(st, target, src, env)
            return
        if isinstance(src, SqlSource):
            _dml_sql(st, target, src, env)
            return
    raise UnresolvableTarget(f"cannot write to {type(target).__name__}")


def _dml_local(st: Statement, target: LocalRef, env: Environment) -> None:
    root = env.get_local(target.name)
    path = tuple(target.path)
    ops = _dml_ops(st, root, path, env, None)
    if ops:
        env.set_local(target.name, apply_delta(root, Delta(tuple(ops))))


def _dml_memory(st: Statement, target: SourceRef, src: MemorySource,
                env: Environment) -> None:
    src.check_writable(tuple(target.path))
    path = tuple(target.path)
    fallback = src.columns_for(path[-1]) if path else None

    def build(cur: Value) -> Delta:
        return Delta(tuple(_dml_ops(st, cur, path, env, fallback)))

    delta = src.update(build)
    if delta:
        env.effects.append(Effect(src.name, delta=delta))


def _dml_ops(st: Statement, root: Value, path: tuple, env: Environment,
             fallback_cols: Optional[list[str]]) -> list:
    if isinstance(st, Insert):
        return _insert_ops(st, root, path, env, fallback_cols)
    if isinstance(st, Update):
        return _update_ops(st, root, path, env)
    if isinstance(st, Delete):
        return _delete_ops(st, root, path, env)
    raise EvalError(f"not a data statement: {type(st).__name__}")


def _insert_ops(st: Insert, root: Value, path: tuple, env: Environment,
                fallback_cols: Optional[list[str]]) -> list:
    rows = _insert_rows(st, env, fallback_cols)
    base = _nav(root, path)
    if not isinstance(base, Table):
        raise UnresolvableTarget(
            f"insert target is {_describe(base)}, not a table")
    start = len(base.rows)
    return [deltas.Insert(path, start + i + 1, row)
            for i, row in enumerate(rows)]


def _insert_rows(st: Insert, env: Environment,
                 fallback_cols: Optional[list[str]]) -> list[Tuple]:
    cols = list(st.columns) if st.columns else None
    if isinstance(st.source, ValuesSource):
        val_rows = [[_eval_standalone(x, env) for x in row]
                    for row in st.source.rows]
        if cols is None:
            if fallback_cols:
                cols = list(fallback_cols)
            elif all(len(r) == 1 for r in val_rows):
                return [wrap_row(r[0]) for r in val_rows]
            else:
                raise EvalError("insert needs a column list here")
        out = []
        for r in val_rows:
            if len(r) != len(cols):
                raise EvalError(
                    f"insert row has {len(r)} values for {len(cols)} columns")
            out.append(Tuple(tuple(zip(cols, r))))
        return out
    tbl = _as_table(evaluate_query(st.source, env))  # type: ignore[arg-type]
    if cols is None:
        return list(tbl.rows)
    out = []
    for r in tbl.rows:
        if len(r.fields) != len(cols):
            raise EvalError(
                f"insert row has {len(r.fields)} values for {len(cols)} columns")
        out.append(Tuple(tuple(zip(cols, (v for _, v in r.fields)))))
    return out


def _update_ops(st: Update, root: Value, path: tuple,
                env: Environment) -> list:
    cur = _nav(root, path)
    assigns = [(n, compile_scalar(e, env.catalog)) for n, e in st.assignments]
    wplan = compile_scalar(st.where, env.catalog) if st.where is not None else None
    if isinstance(cur, Table):
        ops = []
        for i, row in enumerate(cur.rows, 1):
            c = {st.alias: row}
            if wplan is not None and \
                    truthy3(eval_scalar_plan(wplan, env, c)) is not True:
                continue
            # every right-hand side sees the old row
            for fname, sp in assigns:
                ops.append(deltas.Replace(path + (i, fname),
                                          eval_scalar_plan(sp, env, c)))
        return ops
    if st.where is not None:
        raise EvalError("WHERE in an update needs a table target")
    c = {st.alias: cur}
    if isinstance(cur, Tuple):
        return [deltas.Replace(path + (fname,), eval_scalar_plan(sp, env, c))
                for fname, sp in assigns]
    if len(assigns) != 1 or assigns[0][0] != "value":
        raise EvalError("a scalar target updates via: set value = <expr>")
    return [deltas.Replace(path, eval_scalar_plan(assigns[0][1], env, c))]


def _delete_ops(st: Delete, root: Value, path: tuple,
                env: Environment) -> list:
    cur = _nav(root, path)
    if not isinstance(cur, Table):
        raise UnresolvableTarget(
            f"delete target is {_describe(cur)}, not a table")
    wplan = compile_scalar(st.where, env.catalog) if st.where is not None else None
    matched = []
    for i, row in enumerate(cur.rows, 1):
        if wplan is None or \
                truthy3(eval_scalar_plan(wplan, env, {st.alias: row})) is True:
            matched.append(i)
    # descending ordinals so earlier deletes don't shift later ones
    return [deltas.Delete(path, i) for i in reversed(matched)]


# --- adapter-table modification ------------------------------------------------


def _dml_sql(st: Statement, target: SourceRef, src: SqlSource,
             env: Environment) -> None:
    src.check_writable(tuple(target.path))
    if len(target.path) != 1:
        raise UnresolvableTarget("adapter writes address a table directly")
    tbl = target.path[0]
    cols = src.columns(tbl)
    if isinstance(st, Insert):
        _sql_insert(st, src, tbl, cols, env)
    elif isinstance(st, Update):
        _sql_update(st, src, tbl, cols, env)
    elif isinstance(st, Delete):
        _sql_delete(st, src, tbl, cols, env)
    else:
        raise EvalError(f"not a data statement: {type(st).__name__}")
    env.effects.append(Effect(src.name, table=tbl))


def _sql_insert(st: Insert, src: SqlSource, tbl: str, cols: list[str],
                env: Environment) -> None:
    rows = _insert_rows(st, env, cols)
    names = list(st.columns) if st.columns else cols
    params = []
    for r in rows:
        if len(r.fields) != len(names):
            raise EvalError(
                f"insert row has {len(r.fields)} values for {len(names)} columns")
        params.append(tuple(to_sqlite_param(v) for _, v in r.fields))
    collist = ", ".join(f'"{n}"' for n in names)
    marks = ", ".join("?" for _ in names)
    src.run_dml_many(
        f'insert into "{tbl}" ({collist}) values ({marks})', params)


def _sql_update(st: Update, src: SqlSource, tbl: str, cols: list[str],
                env: Environment) -> None:
    if env.catalog.pushdown and _try_push_update(st, src, tbl, env):
        return
    sel_cols = ", ".join(f'"{c}"' for c in cols)
    raw = src.run_select_raw(f'select rowid, {sel_cols} from "{tbl}"', ())
    wplan = compile_scalar(st.where, env.catalog) if st.where is not None else None
    assigns = [(n, compile_scalar(e, env.catalog)) for n, e in st.assignments]
    updates = []
    for r in raw:
        rowid, vals = r[0], r[1:]
        c = {st.alias: Tuple(tuple(zip(cols, vals)))}
        if wplan is not None and \
                truthy3(eval_scalar_plan(wplan, env, c)) is not True:
            continue
        news = tuple(to_sqlite_param(eval_scalar_plan(sp, env, c))
                     for _, sp in assigns)
        updates.append(news + (rowid.value,))
    if updates:
        sets = ", ".join(f'"{n}" = ?' for n, _ in assigns)
        src.run_dml_many(f'update "{tbl}" set {sets} where rowid = ?', updates)


def _try_push_update(st: Update, src: SqlSource, tbl: str,
                     env: Environment) -> bool:
    info = env.catalog.sql_sources.get(src.name)
    if info is None:
        return False
    binds: list[Node] = []
    gen = _SqlGen(info, {}, binds, bare_alias=st.alias, allow_subqueries=False)
    try:
        sets = ", ".join(f'"{n}" = {gen.value(e)}' for n, e in st.assignments)
        where = "" if st.where is None else f" where {gen.predicate(st.where)}"
    except _NotPushable:
        return False
    params = tuple(to_sqlite_param(eval_expr(b, env, {})) for b in binds)
    src.run_dml(f'update "{tbl}" set {sets}{where}', params)
    return True


def _sql_delete(st: Delete, src: SqlSource, tbl: str, cols: list[str],
                env: Environment) -> None:
    if env.catalog.pushdown and _try_push_delete(st, src, tbl, env):
        return
    sel_cols = ", ".join(f'"{c}"' for c in cols)
    raw = src.run_select_raw(f'select rowid, {sel_cols} from "{tbl}"', ())
    wplan = compile_scalar(st.where, env.catalog) if st.where is not None else None
    doomed = []
    for r in raw:
        c = {st.alias: Tuple(tuple(zip(cols, r[1:])))}
        if wplan is None or truthy3(eval_scalar_plan(wplan, env, c)) is True:
            doomed.append(r[0].value)
    for i in range(0, len(doomed), 400):
        chunk = doomed[i:i + 400]
        marks = ", ".join("?" for _ in chunk)
        src.run_dml(f'delete from "{tbl}" where rowid in ({marks})',
                    tuple(chunk))


def _try_push_delete(st: Delete, src: SqlSource, tbl: str,
                     env: Environment) -> bool:
    info = env.catalog.sql_sources.get(src.name)
    if info is None:
        return False
    binds: list[Node] = []
    gen = _SqlGen(info, {}, binds, bare_alias=st.alias, allow_subqueries=False)
    try:
        where = "" if st.where is None else f" where {gen.predicate(st.where)}"
    except _NotPushable:
        return False
    params = tuple(to_sqlite_param(eval_expr(b, env, {})) for b in binds)
    src.run_dml(f'delete from "{tbl}"{where}', params)
    return True


# --- statement execution -----------------------------------------------------------


class _Return(Exception):
    """Control-flow escape for RETURN; deliberately not a ForwardError so
    exception handlers never swallow it."""

    def __init__(self, value: Value):
        self.value = value


def execute_statements(stmts, env: Environment) -> None:
    for st in stmts:
        execute_statement(st, env)


def execute_statement(st: Statement, env: Environment) -> None:
    if isinstance(st, Declare):
        if st.init is not None:
            v = evaluate_query(st.init, env)
        elif st.schema_name is not None:
            v = Table(())
        else:
            v = NULL
        env.frames[-1][st.name] = v
        return
    if isinstance(st, Assign):
        _assign(st.target, evaluate_query(st.query, env), env)
        return
    if isinstance(st, (Insert, Update, Delete)):
        execute_dml(st, env)
        return
    if isinstance(st, If):
        body = st.then_body \
            if truthy3(_eval_standalone(st.cond, env)) is True else st.else_body
        env.frames.append({})
        try:
            execute_statements(body, env)
        finally:
            env.frames.pop()
        return
    if isinstance(st, For):
        tbl = evaluate_query(st.query, env)
        if not isinstance(tbl, Table):
            raise EvalError(f"FOR iterates a table, got {_describe(tbl)}")
        for row in tbl.rows:
            env.frames.append({st.var: unwrap_row(row)})
            try:
                execute_statements(st.body, env)
            finally:
                env.frames.pop()
        return
    if isinstance(st, Raise):
        raise PlsqlRaise(_message_text(_eval_standalone(st.message, env)))
    if isinstance(st, Block):
        env.frames.append({})
        try:
            execute_statements(st.body, env)
        except ForwardError:
            if st.handler is None:
                raise
            env.frames.pop()
            env.frames.append({})
            execute_statements(st.handler, env)
        finally:
            env.frames.pop()
        return
    if isinstance(st, CallStmt):
        args = [_eval_standalone(a, env) for a in st.args]
        call_function(st.name, args, env)
        return
    if isinstance(st, NextPage):
        v = _eval_standalone(st.page, env)
        if not (isinstance(v, Scalar) and v.kind == "string"):
            raise EvalError("next_page needs a page name string")
        env.control["next_page"] = v.value
        return
    if isinstance(st, Return):
        raise _Return(
            evaluate_query(st.value, env) if st.value is not None else NULL)
    raise EvalError(f"cannot execute {type(st).__name__}")


def _message_text(v: Value) -> str:
    if isinstance(v, Scalar):
        return canonical_scalar_text(v)
    return to_canonical_json(v)


def _assign(target, v: Value, env: Environment) -> None:
    if isinstance(target, LocalRef):
        if target.path:
            root = env.get_local(target.name)
            env.set_local(target.name, set_at(root, tuple(target.path), v))
        else:
            env.set_local(target.name, v)
        return
    if isinstance(target, SourceRef):
        if env.mode == READ_ONLY:
            raise WriteInReadOnlyMode(
                "assignment to a source in read-only evaluation")
        src = env.sources.get(target.source)
        if src is None:
            raise UnresolvableTarget(
                f"source {target.source!r} is not available here")
        if isinstance(src, MemorySource):
            src.check_writable(tuple(target.path))
            delta = Delta((deltas.Replace(tuple(target.path), v),))
            src.apply(delta)
            env.effects.append(Effect(src.name, delta=delta))
            return
        raise UnresolvableTarget(
            "cannot assign through a sql adapter; use update")
    raise UnresolvableTarget(f"cannot assign to {type(target).__name__}")


# --- function calls -----------------------------------------------------------------


def call_function(name: str, args: list, env: Environment) -> Value:
    fn = env.functions.get(name)
    if fn is None:
        raise UnknownFunction(f"unknown function {name!r}")
    if isinstance(fn, NativeFunction):
        if fn.arity is not None and len(args) != fn.arity:
            raise EvalError(
                f"{name}() takes {fn.arity} arguments, got {len(args)}")
        return fn.fn(list(args), env)
    if not isinstance(fn, FunctionDecl):
        raise EvalError(f"{name!r} is not callable")
    if len(args) != len(fn.params):
        raise EvalError(
            f"{name}() takes {len(fn.params)} arguments, got {len(args)}")
    # parameters are plain value bindings, so by-value passing comes free:
    # values are immutable and rebinding stays inside the callee's frames
    mode = READ_ONLY if fn.mutability == "immutable" else env.mode
    sub = env.child(frames=[dict(zip(fn.params, args))], mode=mode)
    try:
        execute_statement(fn.body, sub)
    except _Return as r:
        return r.value
    return NULL
