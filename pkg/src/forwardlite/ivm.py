"""Incremental maintenance of query results.

A MaterializedView keeps the evaluated result of a plan together with the
intermediate output of every operator on its maintainable spine.  maintain()
consumes deltas against the base inputs and reuses those snapshots:

* table scans evolve their snapshot by interpreting the delta ops,
* inner joins apply the classic three-term rule (insertions on the left
  joined with the old right side, the old left side joined with insertions
  on the right, and the two insertion sets joined together; symmetrically
  for deletions),
* filters pass row deltas through their predicate,
* group-by re-aggregates only the groups whose keys appear in the input
  delta,
* subquery applies cache their per-row results,
* everything else (sorts, limits, unions, left joins, pushed-down fetches)
  recomputes from its children's snapshots and reconciles by bag diff.

When the supplied deltas do not line up with the snapshots, maintenance
falls back to a full recompute and flags the result as stale.

The module also hosts the generic value differ used by the wire protocol:
diff/apply re-exported from the delta module, plus a key registry so tables
with declared keys are matched row-by-key instead of by equality.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields as dc_fields, is_dataclass
from typing import Callable, Iterable, NamedTuple, Optional

from . import delta as _delta
from .delta import Delete, Delta, EMPTY_DELTA, Insert, Op, Replace, apply_delta
from .engine import (
    Ctx,
    Environment,
    NativeFunction,
    eval_contexts,
    eval_expr,
    eval_scalar_plan,
    evaluate_plan,
    group_key,
    group_row,
    sorted_rows,
    truthy3,
    union_tables,
    _apply_value,
    _as_table,
    _project_row,
    _row_key,
)
from .errors import EvalError, ForwardError, StaleView
from .nodes import FuncCall
from .planner import (
    AliasTable,
    Apply,
    Distinct,
    ExprRoot,
    Filter,
    Group,
    Join,
    Let,
    LimitOp,
    LocalTable,
    OuterUnionOp,
    PlanNode,
    Project,
    RemoteFetch,
    Scan,
    Sort,
    Strip,
    SubPlanFrom,
    Unit,
    UnionOp,
)
from .resolver import LocalRef, SourceRef
from .values import (
    Path,
    Scalar,
    Table,
    Tuple,
    Value,
    canonical_key,
    is_null,
    navigate,
    set_at,
)

log = logging.getLogger(__name__)

# Dependency prefix for local bindings (with-views, variables); real sources
# can never collide with it because "~" is not a valid identifier start.
LOCAL = "~local"

# base_deltas: dep key -> Delta, or None for "changed, shape unknown".
BaseDeltas = dict[tuple, Optional[Delta]]


class Maintained(NamedTuple):
    delta: Delta
    stale: bool


# --- declared keys ----------------------------------------------------------


class KeyRegistry:
    """Declared row identities, looked up by table path with ordinals
    stripped so one declaration covers every instance of a nested table."""

    def __init__(self) -> None:
        self._keys: dict[tuple[str, ...], tuple[str, ...]] = {}

    @staticmethod
    def _norm(path: Iterable) -> tuple[str, ...]:
        return tuple(s for s in path if isinstance(s, str))

    def declare_key(self, table_path: Iterable, key_fields: Iterable[str]) -> None:
        self._keys[self._norm(table_path)] = tuple(key_fields)

    def fields_for(self, path: Path) -> Optional[tuple[str, ...]]:
        return self._keys.get(self._norm(path))

    def key_fn(self, skip: frozenset[tuple[str, ...]] = frozenset()
               ) -> _delta.KeyFn:
        def kf(path: Path, row: Tuple) -> Optional[object]:
            norm = self._norm(path)
            fields = self._keys.get(norm)
            if fields is None or norm in skip or not isinstance(row, Tuple):
                return None
            key = []
            for f in fields:
                v = row.get(f)
                if v is None or not isinstance(v, Scalar) or is_null(v):
                    return None
                key.append(canonical_key(v))
            return tuple(key)
        return kf

    def collisions(self, v: Value, path: Path = ()) -> set[tuple[str, ...]]:
        """Declared tables in ``v`` whose data holds the same key twice."""
        out: set[tuple[str, ...]] = set()
        if isinstance(v, Table):
            fields = self.fields_for(path)
            if fields is not None:
                kf = self.key_fn()
                seen: set = set()
                for row in v.rows:
                    k = kf(path, row)
                    if k is None:
                        continue
                    if k in seen:
                        out.add(self._norm(path))
                        break
                    seen.add(k)
            for i, row in enumerate(v.rows):
                out |= self.collisions(row, path + (i + 1,))
        elif isinstance(v, Tuple):
            for name, fv in v.fields:
                out |= self.collisions(fv, path + (name,))
        return out


def keys_from_registry(reg) -> KeyRegistry:
    """Auto-declare the primary keys of every SQL table in a source
    registry under (source, table)."""
    keys = KeyRegistry()
    for name, src in reg.app_sources.items():
        pk = getattr(src, "primary_key", None)
        if pk is None:
            continue
        for tbl in src.tables():
            cols = pk(tbl)
            if cols:
                keys.declare_key((name, tbl), cols)
    return keys


def diff(old: Value, new: Value, keys: Optional[KeyRegistry] = None) -> Delta:
    """delta.diff with declared-key matching; tables where the key is
    duplicated in the data fall back to ordinal matching with a warning."""
    if keys is None:
        return _delta.diff(old, new)
    bad = keys.collisions(old) | keys.collisions(new)
    if bad:
        log.warning("duplicate declared keys in %s; using ordinal matching",
                    sorted(".".join(p) for p in bad))
    return _delta.diff(old, new, keys.key_fn(skip=frozenset(bad)))


apply = apply_delta


# --- dependency extraction ---------------------------------------------------

# Matching everything: a subtree calling an unknown function could read any
# source, so it must recompute on every change.
_ANY_DEP = ()


def _collect_deps(obj, out: set, functions: dict, seen_fns: set) -> None:
    if isinstance(obj, Scan):
        out.add((obj.source, *obj.path))
        return
    if isinstance(obj, LocalTable):
        out.add((LOCAL, obj.name, *obj.path))
    elif isinstance(obj, RemoteFetch):
        out.add((obj.source,))
    elif isinstance(obj, SourceRef):
        out.add((obj.source, *obj.path))
    elif isinstance(obj, LocalRef):
        out.add((LOCAL, obj.name, *obj.path))
    elif isinstance(obj, FuncCall):
        if obj.name not in seen_fns:
            seen_fns.add(obj.name)
            fn = functions.get(obj.name)
            if fn is None:
                out.add(_ANY_DEP)
            elif not isinstance(fn, NativeFunction):
                _collect_deps(fn.body, out, functions, seen_fns)
    if is_dataclass(obj):
        for f in dc_fields(obj):
            _collect_deps(getattr(obj, f.name), out, functions, seen_fns)
    elif isinstance(obj, (tuple, list)):
        for item in obj:
            _collect_deps(item, out, functions, seen_fns)


def plan_deps(obj, functions: dict) -> frozenset[tuple]:
    out: set = set()
    _collect_deps(obj, out, functions, set())
    return frozenset(out)


def _affects(changed: Iterable[tuple], deps: frozenset[tuple]) -> bool:
    for k in changed:
        for d in deps:
            n = min(len(k), len(d))
            if k[:n] == d[:n]:
                return True
    return False


# --- bag bookkeeping ---------------------------------------------------------


def _ctx_key(c: Ctx) -> tuple:
    return tuple(sorted((a, canonical_key(v)) for a, v in c.items()))


def _bag_delta(old: list, new: list, keyf: Callable) -> tuple[list, list]:
    """Multiset difference: (entries only in new, entries only in old)."""
    counts: dict = {}
    for x in old:
        counts[keyf(x)] = counts.get(keyf(x), 0) - 1
    for x in new:
        counts[keyf(x)] = counts.get(keyf(x), 0) + 1
    plus, minus = [], []
    take = dict(counts)
    for x in new:
        k = keyf(x)
        if take.get(k, 0) > 0:
            take[k] -= 1
            plus.append(x)
    take = dict(counts)
    for x in old:
        k = keyf(x)
        if take.get(k, 0) < 0:
            take[k] += 1
            minus.append(x)
    return plus, minus


def _bag_apply(old: list, plus: list, minus: list, keyf: Callable) -> list:
    """Remove one occurrence per minus entry, append the plus entries."""
    drop: dict = {}
    for x in minus:
        k = keyf(x)
        drop[k] = drop.get(k, 0) + 1
    out = []
    for x in old:
        k = keyf(x)
        if drop.get(k, 0) > 0:
            drop[k] -= 1
        else:
            out.append(x)
    if any(n > 0 for n in drop.values()):
        raise StaleView("delta removes rows the snapshot does not hold")
    out.extend(plus)
    return out


def _opaque(node: PlanNode) -> bool:
    """Subtrees maintained only by whole-node recomputation."""
    if isinstance(node, AliasTable):
        return True
    return isinstance(node, Join) and (node.kind != "cross"
                                       or node.in_push is not None)


# --- materialized views ------------------------------------------------------


NodeId = tuple[int, ...]


class MaterializedView:
    """A plan plus its current result and per-operator snapshots.

    The view owns the environment it was built against; all reads during
    maintenance go through it, so the caller must keep feeding every change
    to those sources through maintain()'s base deltas.
    """

    def __init__(self, plan: PlanNode, env: Environment,
                 keys: Optional[KeyRegistry] = None,
                 key_fields: Iterable[str] = ()):
        self.plan = plan
        self.env = env
        self.keys = keys
        self.key_fields = tuple(key_fields)
        self.last_stale = False
        self._snaps: dict[NodeId, object] = {}
        self._aux: dict[NodeId, dict] = {}
        self._deps: dict[NodeId, frozenset[tuple]] = {}
        self.state: Value = self._build_val(plan, ())

    # -- shared lookups

    def _dep(self, obj, nid: NodeId) -> frozenset[tuple]:
        d = self._deps.get(nid)
        if d is None:
            d = plan_deps(obj, self.env.functions)
            self._deps[nid] = d
        return d

    def _diff_key_fn(self) -> _delta.KeyFn:
        base = self.keys.key_fn() if self.keys is not None else _delta.no_keys
        rootf = self.key_fields

        def kf(path: Path, row: Tuple) -> Optional[object]:
            if not path and rootf:
                key = []
                for f in rootf:
                    v = row.get(f)
                    if v is None or not isinstance(v, Scalar) or is_null(v):
                        return None
                    key.append(canonical_key(v))
                return tuple(key)
            return base(path, row)
        return kf

    # -- initial build: evaluate bottom-up, recording operator outputs

    def _build_ctx(self, node: PlanNode, nid: NodeId) -> list[Ctx]:
        env = self.env
        if _opaque(node):
            self._dep(node, nid)
            out = eval_contexts(node, env, {})
        elif isinstance(node, Unit):
            out = [{}]
        elif isinstance(node, Scan):
            self._dep(node, nid)
            out = self._leaf_read(node)
        elif isinstance(node, LocalTable):
            self._dep(node, nid)
            out = self._leaf_read(node)
        elif isinstance(node, RemoteFetch):
            self._dep(node, nid)
            out = eval_contexts(node, env, {})
        elif isinstance(node, SubPlanFrom):
            tbl = _as_table(self._build_val(node.plan, nid + (0,)))
            out = [{node.alias: r} for r in tbl.rows]
        elif isinstance(node, Join):
            lefts = self._build_ctx(node.left, nid + (0,))
            rights = self._build_ctx(node.right, nid + (1,))
            out = [{**l, **r} for l in lefts for r in rights]
        elif isinstance(node, Filter):
            ins = self._build_ctx(node.input, nid + (0,))
            self._dep(node.pred, nid + (9,))
            out = self._filter_rows(node, ins)
        elif isinstance(node, Apply):
            if node.input is None:
                raise EvalError("subquery apply without an input")
            ins = self._build_ctx(node.input, nid + (0,))
            self._dep(node.plan, nid + (9,))
            cache: dict = {}
            self._aux[nid] = cache
            out = self._apply_rows(node, ins, cache)
        elif isinstance(node, Group):
            ins = self._build_ctx(node.input, nid + (0,))
            self._dep((tuple(e for _, e in node.keys),
                       tuple(a for a in node.aggs)), nid + (9,))
            cache: dict = {}
            self._aux[nid] = cache
            out = self._group_rows(node, ins, cache, affected=None)
        else:
            raise EvalError(
                f"plan node {type(node).__name__} cannot produce rows")
        self._snaps[nid] = out
        return out

    def _build_val(self, node: PlanNode, nid: NodeId) -> Value:
        env = self.env
        if isinstance(node, Project):
            ins = self._build_ctx(node.input, nid + (0,))
            self._dep(node.items, nid + (9,))
            out: Value = Table(tuple(_project_row(node.items, env, c)
                                     for c in ins))
        elif isinstance(node, Distinct):
            inner = self._build_val(node.input, nid + (0,))
            out = self._distinct(inner)
        elif isinstance(node, Sort):
            inner = self._build_val(node.input, nid + (0,))
            out = Table(sorted_rows(node.keys, _as_table(inner).rows),
                        "intentional")
        elif isinstance(node, Strip):
            inner = self._build_val(node.input, nid + (0,))
            out = self._strip(node, inner)
        elif isinstance(node, LimitOp):
            inner = self._build_val(node.input, nid + (0,))
            self._dep(node.count, nid + (9,))
            out = self._limit(node, inner)
        elif isinstance(node, UnionOp):
            lt = self._build_val(node.left, nid + (0,))
            rt = self._build_val(node.right, nid + (1,))
            out = union_tables(_as_table(lt), _as_table(rt), node.all)
        elif isinstance(node, OuterUnionOp):
            lt = self._build_val(node.left, nid + (0,))
            rt = self._build_val(node.right, nid + (1,))
            out = Table(_as_table(lt).rows + _as_table(rt).rows)
        elif isinstance(node, Let):
            v = self._build_val(node.value, nid + (0,))
            env.frames.append({node.name: v})
            try:
                out = self._build_val(node.body, nid + (1,))
            finally:
                env.frames.pop()
        elif isinstance(node, ExprRoot):
            self._dep(node.scalar, nid + (9,))
            out = eval_scalar_plan(node.scalar, env, {})
        elif isinstance(node, RemoteFetch):
            self._dep(node, nid)
            out = evaluate_plan(node, env, {})
        else:
            raise EvalError(
                f"plan node {type(node).__name__} cannot produce a value")
        self._snaps[nid] = out
        return out

    # -- node-local evaluation helpers shared by build and maintain

    def _leaf_read(self, node) -> list[Ctx]:
        env = self.env
        if isinstance(node, Scan):
            src = env.sources.get(node.source)
            if src is None:
                raise EvalError(f"source {node.source!r} is not available here")
            v = src.get_value(tuple(node.path))
        else:
            v = navigate(env.get_local(node.name), node.path)
        if not isinstance(v, Table):
            raise EvalError(f"FROM item for {node.alias!r} is not a table")
        return [{node.alias: r} for r in v.rows]

    def _filter_rows(self, node: Filter, ins: list[Ctx]) -> list[Ctx]:
        return [c for c in ins
                if truthy3(eval_expr(node.pred, self.env, c)) is True]

    def _apply_rows(self, node: Apply, ins: list[Ctx], cache: dict) -> list[Ctx]:
        out = []
        for c in ins:
            ck = _ctx_key(c)
            if ck not in cache:
                cache[ck] = _apply_value(node, self.env, c)
            out.append({**c, node.slot: cache[ck]})
        return out

    def _group_rows(self, node: Group, ins: list[Ctx], cache: dict,
                    affected: Optional[set]) -> list[Ctx]:
        """Rebuild the group output in first-seen bucket order, re-aggregating
        only buckets in ``affected`` (None = all)."""
        env = self.env
        buckets: dict[tuple, list[Ctx]] = {}
        kvals: dict[tuple, list] = {}
        for c in ins:
            key, kvs = group_key(node, env, c)
            if key not in buckets:
                buckets[key] = []
                kvals[key] = kvs
            buckets[key].append(c)
        if not buckets and not node.keys:
            buckets[()] = []
            kvals[()] = []
        out = []
        for key, members in buckets.items():
            if affected is None or key in affected or key not in cache:
                cache[key] = group_row(node, kvals[key], members, env)
            out.append({"__group": cache[key]})
        for gone in set(cache) - set(buckets):
            del cache[gone]
        return out

    @staticmethod
    def _distinct(inner: Value) -> Table:
        seen = set()
        rows = []
        for r in _as_table(inner).rows:
            k = _row_key(r)
            if k not in seen:
                seen.add(k)
                rows.append(r)
        return Table(tuple(rows))

    @staticmethod
    def _strip(node: Strip, inner: Value) -> Table:
        t = _as_table(inner)
        drop = set(node.fields)
        rows = tuple(Tuple(tuple((n, v) for n, v in r.fields if n not in drop))
                     for r in t.rows)
        return Table(rows, t.order_kind)

    def _limit(self, node: LimitOp, inner: Value) -> Table:
        t = _as_table(inner)
        n = eval_scalar_plan(node.count, self.env, {})
        if not (isinstance(n, Scalar) and n.kind == "integer"):
            raise EvalError("LIMIT needs an integer")
        return t if n.value < 0 else Table(t.rows[:n.value], t.order_kind)

    # -- maintenance

    def maintain(self, base_deltas: BaseDeltas) -> Maintained:
        old_state = self.state
        self.last_stale = False
        try:
            changed = self._inc_val(self.plan, (), base_deltas)
        except StaleView:
            return self._recompute(old_state)
        if not changed:
            return Maintained(EMPTY_DELTA, False)
        self.state = self._snaps[()]
        return Maintained(diff_with(old_state, self.state,
                                    self._diff_key_fn()), False)

    def _recompute(self, old_state: Value) -> Maintained:
        self._snaps.clear()
        self._aux.clear()
        self.state = self._build_val(self.plan, ())
        self.last_stale = True
        return Maintained(diff_with(old_state, self.state,
                                    self._diff_key_fn()), True)

    def _inc_ctx(self, node: PlanNode, nid: NodeId, bd: BaseDeltas) -> bool:
        env = self.env
        if isinstance(node, Unit):
            return False
        if _opaque(node) or isinstance(node, RemoteFetch):
            if not _affects(bd, self._dep(node, nid)):
                return False
            self._snaps[nid] = eval_contexts(node, env, {})
            return True
        if isinstance(node, (Scan, LocalTable)):
            return self._inc_leaf(node, nid, bd)
        if isinstance(node, SubPlanFrom):
            if not self._inc_val(node.plan, nid + (0,), bd):
                return False
            tbl = _as_table(self._snaps[nid + (0,)])
            self._snaps[nid] = [{node.alias: r} for r in tbl.rows]
            return True
        if isinstance(node, Join):
            return self._inc_join(node, nid, bd)
        if isinstance(node, Filter):
            return self._inc_filter(node, nid, bd)
        if isinstance(node, Apply):
            return self._inc_apply(node, nid, bd)
        if isinstance(node, Group):
            return self._inc_group(node, nid, bd)
        raise EvalError(f"plan node {type(node).__name__} cannot produce rows")

    def _inc_leaf(self, node, nid: NodeId, bd: BaseDeltas) -> bool:
        if isinstance(node, Scan):
            root_key: tuple = (node.source,)
        else:
            root_key = (LOCAL, node.name)
        entries = [(k, d) for k, d in bd.items()
                   if k[:len(root_key)] == root_key
                   or root_key[:len(k)] == k]
        if not entries:
            return False
        old: list[Ctx] = self._snaps[nid]
        if any(d is None for _, d in entries):
            self._snaps[nid] = self._leaf_read(node)
            return True
        rows = [c[node.alias] for c in old]
        path = tuple(node.path)
        for k, d in entries:
            strip = len(root_key)
            for op in d.ops:
                full = tuple(k[strip:]) + tuple(op.path)
                rows = _evolve(rows, path, full, op)
        self._snaps[nid] = [{node.alias: r} for r in rows]
        return True

    def _inc_join(self, node: Join, nid: NodeId, bd: BaseDeltas) -> bool:
        l_old: list[Ctx] = self._snaps[nid + (0,)]
        r_old: list[Ctx] = self._snaps[nid + (1,)]
        lch = self._inc_ctx(node.left, nid + (0,), bd)
        rch = self._inc_ctx(node.right, nid + (1,), bd)
        if not lch and not rch:
            return False
        lp, lm = _bag_delta(l_old, self._snaps[nid + (0,)], _ctx_key) \
            if lch else ([], [])
        rp, rm = _bag_delta(r_old, self._snaps[nid + (1,)], _ctx_key) \
            if rch else ([], [])

        signed: dict[tuple, list] = {}

        def emit(sign: int, c: Ctx) -> None:
            k = _ctx_key(c)
            cell = signed.setdefault(k, [0, c])
            cell[0] += sign
            cell[1] = c

        for sign, dl in ((1, lp), (-1, lm)):
            for l in dl:
                for r in r_old:
                    emit(sign, {**l, **r})
        for sign, dr in ((1, rp), (-1, rm)):
            for l in l_old:
                for r in dr:
                    emit(sign, {**l, **r})
        for s1, dl in ((1, lp), (-1, lm)):
            for s2, dr in ((1, rp), (-1, rm)):
                for l in dl:
                    for r in dr:
                        emit(s1 * s2, {**l, **r})

        plus, minus = [], []
        for count, c in signed.values():
            if count > 0:
                plus.extend([c] * count)
            elif count < 0:
                minus.extend([c] * -count)
        self._snaps[nid] = _bag_apply(self._snaps[nid], plus, minus, _ctx_key)
        return bool(plus or minus)

    def _inc_filter(self, node: Filter, nid: NodeId, bd: BaseDeltas) -> bool:
        in_old: list[Ctx] = self._snaps[nid + (0,)]
        ich = self._inc_ctx(node.input, nid + (0,), bd)
        pred_changed = _affects(bd, self._dep(node.pred, nid + (9,)))
        if not ich and not pred_changed:
            return False
        in_new = self._snaps[nid + (0,)]
        if pred_changed:
            self._snaps[nid] = self._filter_rows(node, in_new)
            return True
        plus, minus = _bag_delta(in_old, in_new, _ctx_key)
        fp = self._filter_rows(node, plus)
        fm = self._filter_rows(node, minus)
        if not fp and not fm:
            return False
        self._snaps[nid] = _bag_apply(self._snaps[nid], fp, fm, _ctx_key)
        return True

    def _inc_apply(self, node: Apply, nid: NodeId, bd: BaseDeltas) -> bool:
        in_old: list[Ctx] = self._snaps[nid + (0,)]
        ich = self._inc_ctx(node.input, nid + (0,), bd)
        sub_changed = _affects(bd, self._dep(node.plan, nid + (9,)))
        if not ich and not sub_changed:
            return False
        cache = self._aux[nid]
        if sub_changed:
            cache.clear()
        in_new = self._snaps[nid + (0,)]
        self._snaps[nid] = self._apply_rows(node, in_new, cache)
        return True

    def _inc_group(self, node: Group, nid: NodeId, bd: BaseDeltas) -> bool:
        in_old: list[Ctx] = self._snaps[nid + (0,)]
        ich = self._inc_ctx(node.input, nid + (0,), bd)
        exprs_changed = _affects(bd, self._dep(
            (tuple(e for _, e in node.keys), tuple(a for a in node.aggs)),
            nid + (9,)))
        if not ich and not exprs_changed:
            return False
        in_new = self._snaps[nid + (0,)]
        cache = self._aux[nid]
        if exprs_changed:
            cache.clear()
            affected: Optional[set] = None
        else:
            plus, minus = _bag_delta(in_old, in_new, _ctx_key)
            affected = {group_key(node, self.env, c)[0]
                        for c in plus + minus}
        self._snaps[nid] = self._group_rows(node, in_new, cache, affected)
        return True

    def _inc_val(self, node: PlanNode, nid: NodeId, bd: BaseDeltas) -> bool:
        env = self.env
        if isinstance(node, Project):
            in_old: list[Ctx] = self._snaps[nid + (0,)]
            ich = self._inc_ctx(node.input, nid + (0,), bd)
            items_changed = _affects(bd, self._dep(node.items, nid + (9,)))
            if not ich and not items_changed:
                return False
            in_new = self._snaps[nid + (0,)]
            old_out: Table = self._snaps[nid]
            if items_changed:
                rows = tuple(_project_row(node.items, env, c) for c in in_new)
            else:
                plus, minus = _bag_delta(in_old, in_new, _ctx_key)
                pr = [_project_row(node.items, env, c) for c in plus]
                mr = [_project_row(node.items, env, c) for c in minus]
                rows = tuple(_bag_apply(list(old_out.rows), pr, mr,
                                        canonical_key))
            self._snaps[nid] = Table(rows)
            return True
        if isinstance(node, Distinct):
            if not self._inc_val(node.input, nid + (0,), bd):
                return False
            self._snaps[nid] = self._distinct(self._snaps[nid + (0,)])
            return True
        if isinstance(node, Sort):
            if not self._inc_val(node.input, nid + (0,), bd):
                return False
            t = _as_table(self._snaps[nid + (0,)])
            self._snaps[nid] = Table(sorted_rows(node.keys, t.rows),
                                     "intentional")
            return True
        if isinstance(node, Strip):
            if not self._inc_val(node.input, nid + (0,), bd):
                return False
            self._snaps[nid] = self._strip(node, self._snaps[nid + (0,)])
            return True
        if isinstance(node, LimitOp):
            ich = self._inc_val(node.input, nid + (0,), bd)
            cch = _affects(bd, self._dep(node.count, nid + (9,)))
            if not ich and not cch:
                return False
            self._snaps[nid] = self._limit(node, self._snaps[nid + (0,)])
            return True
        if isinstance(node, UnionOp):
            lch = self._inc_val(node.left, nid + (0,), bd)
            rch = self._inc_val(node.right, nid + (1,), bd)
            if not lch and not rch:
                return False
            self._snaps[nid] = union_tables(
                _as_table(self._snaps[nid + (0,)]),
                _as_table(self._snaps[nid + (1,)]), node.all)
            return True
        if isinstance(node, OuterUnionOp):
            lch = self._inc_val(node.left, nid + (0,), bd)
            rch = self._inc_val(node.right, nid + (1,), bd)
            if not lch and not rch:
                return False
            self._snaps[nid] = Table(
                _as_table(self._snaps[nid + (0,)]).rows
                + _as_table(self._snaps[nid + (1,)]).rows)
            return True
        if isinstance(node, Let):
            vch = self._inc_val(node.value, nid + (0,), bd)
            bd_body = dict(bd)
            if vch:
                bd_body[(LOCAL, node.name)] = None
            env.frames.append({node.name: self._snaps[nid + (0,)]})
            try:
                bch = self._inc_val(node.body, nid + (1,), bd_body)
            finally:
                env.frames.pop()
            if not bch:
                return False
            self._snaps[nid] = self._snaps[nid + (1,)]
            return True
        if isinstance(node, ExprRoot):
            if not _affects(bd, self._dep(node.scalar, nid + (9,))):
                return False
            self._snaps[nid] = eval_scalar_plan(node.scalar, env, {})
            return True
        if isinstance(node, RemoteFetch):
            if not _affects(bd, self._dep(node, nid)):
                return False
            self._snaps[nid] = evaluate_plan(node, env, {})
            return True
        raise EvalError(
            f"plan node {type(node).__name__} cannot produce a value")


def diff_with(old: Value, new: Value, key_fn: _delta.KeyFn) -> Delta:
    return _delta.diff(old, new, key_fn)


def _evolve(rows: list[Tuple], path: tuple, full: tuple, op: Op) -> list[Tuple]:
    """Apply one base delta op to the row list of a leaf table at ``path``.

    ``full`` is the op's path relative to the dependency root.  Ops beside
    the table are ignored; ops above it must be covering replaces.
    """
    plen = len(path)
    if full[:plen] == path:
        rel = full[plen:]
        if not rel:
            if isinstance(op, Replace):
                v = op.value
                if not isinstance(v, Table):
                    raise StaleView("table replaced by a non-table")
                return list(v.rows)
            if isinstance(op, Insert):
                if not 1 <= op.ordinal <= len(rows) + 1:
                    raise StaleView(f"insert ordinal {op.ordinal} out of range")
                return rows[:op.ordinal - 1] + [op.row] + rows[op.ordinal - 1:]
            if not 1 <= op.ordinal <= len(rows):
                raise StaleView(f"delete ordinal {op.ordinal} out of range")
            return rows[:op.ordinal - 1] + rows[op.ordinal:]
        ordinal = rel[0]
        if not isinstance(ordinal, int) or not 1 <= ordinal <= len(rows):
            raise StaleView(f"row step {ordinal!r} out of range")
        row = rows[ordinal - 1]
        try:
            if isinstance(op, Replace):
                new_row = set_at(row, rel[1:], op.value)
            elif isinstance(op, Insert):
                new_row = apply_delta(row, Delta((Insert(rel[1:], op.ordinal,
                                                         op.row),)))
            else:
                new_row = apply_delta(row, Delta((Delete(rel[1:],
                                                         op.ordinal),)))
        except ForwardError as e:
            raise StaleView(str(e)) from None
        out = list(rows)
        out[ordinal - 1] = new_row
        if not isinstance(new_row, Tuple):
            raise StaleView("row update produced a non-tuple")
        return out
    if path[:len(full)] == full and isinstance(op, Replace):
        v = navigate(op.value, path[len(full):])
        if not isinstance(v, Table):
            raise StaleView("covering replace does not hold a table here")
        return list(v.rows)
    return rows


def materialize(plan: PlanNode, env: Environment,
                keys: Optional[KeyRegistry] = None,
                key_fields: Iterable[str] = ()) -> MaterializedView:
    return MaterializedView(plan, env, keys, key_fields)


def maintain(view: MaterializedView, base_deltas: BaseDeltas) -> Maintained:
    return view.maintain(base_deltas)
