"""Incremental maintenance against the recompute oracle.

Every case ends with the same assertion: after feeding base deltas to
maintain(), the view state must equal a from-scratch re-evaluation of
its plan over the updated sources.
"""

import random

import pytest

from forwardlite.delta import Delete, Delta, Insert, Replace, apply_delta
from forwardlite.engine import Environment, evaluate_plan
from forwardlite.ivm import KeyRegistry, MaterializedView, diff, maintain
from forwardlite.parser import parse_query
from forwardlite.planner import PlannerCatalog, compile_query
from forwardlite.resolver import resolve_query
from forwardlite.sources import MemorySource
from forwardlite.values import equals, from_py, integer, to_py, wrap_row

BASE = {
    "r": [{"k": 1, "a": "x"}, {"k": 2, "a": "y"}],
    "s": [{"k": 1, "b": 10}, {"k": 3, "b": 30}],
}


def build_env(data=None):
    m = MemorySource("m", from_py(data if data is not None else BASE))
    env = Environment({"m": m}, PlannerCatalog(sql_sources={}))
    return env, m


def compile_q(text):
    node = resolve_query(parse_query(text), ("m",))
    return compile_query(node, PlannerCatalog(sql_sources={}))


def insert_row(table, row):
    def build(v):
        t = v.get(table)
        return Delta((Insert((table,), len(t.rows) + 1,
                             wrap_row(from_py(row))),))
    return build


class TestJoinRule:
    """Insert into one join input produces exactly the insert that the
    delta-join of the change with the other input predicts."""

    def test_insert_left_joins_with_matching_right(self):
        env, m = build_env()
        plan = compile_q("select r.k as k, r.a as a, s.b as b "
                         "from m.r r, m.s s where r.k = s.k")
        view = MaterializedView(plan, env)
        assert to_py(view.state) == [{"k": 1, "a": "x", "b": 10}]

        d = m.update(insert_row("r", {"k": 3, "a": "z"}))
        res = maintain(view, {("m",): d})
        assert not res.stale
        assert len(res.delta.ops) == 1
        op = res.delta.ops[0]
        assert isinstance(op, Insert)
        assert to_py(op.row) == {"k": 3, "a": "z", "b": 30}
        assert equals(view.state, evaluate_plan(plan, env))

    def test_insert_with_no_match_yields_empty_delta(self):
        env, m = build_env()
        plan = compile_q("select r.k as k, s.b as b "
                         "from m.r r, m.s s where r.k = s.k")
        view = MaterializedView(plan, env)
        d = m.update(insert_row("r", {"k": 99, "a": "q"}))
        res = maintain(view, {("m",): d})
        assert res.delta.ops == () and not res.stale

    def test_delete_left_removes_joined_row(self):
        env, m = build_env()
        plan = compile_q("select r.k as k, s.b as b "
                         "from m.r r, m.s s where r.k = s.k")
        view = MaterializedView(plan, env)
        d = m.update(lambda v: Delta((Delete(("r",), 1),)))
        res = maintain(view, {("m",): d})
        assert not res.stale
        assert to_py(view.state) == []
        assert equals(view.state, evaluate_plan(plan, env))


class TestOperators:
    def test_filter_drops_nonmatching_insert(self):
        env, m = build_env()
        plan = compile_q("select r.a as a from m.r r where r.k = 1")
        view = MaterializedView(plan, env)
        d = m.update(insert_row("r", {"k": 3, "a": "z"}))
        res = maintain(view, {("m",): d})
        assert res.delta.ops == () and not res.stale
        assert equals(view.state, evaluate_plan(plan, env))

    def test_group_by_recomputes_affected_key(self):
        env, m = build_env()
        plan = compile_q("select r.k as k, count(*) as n from m.r r "
                         "group by r.k order by r.k")
        view = MaterializedView(plan, env)
        d = m.update(lambda v: Delta((Replace(("r", 2, "k"), integer(1)),)))
        res = maintain(view, {("m",): d})
        assert not res.stale
        assert to_py(view.state) == [{"k": 1, "n": 2}]
        assert equals(view.state, evaluate_plan(plan, env))

    def test_sort_keeps_order_on_insert(self):
        env, m = build_env()
        plan = compile_q("select r.k as k from m.r r order by r.k desc")
        view = MaterializedView(plan, env)
        d = m.update(insert_row("r", {"k": 5, "a": "w"}))
        maintain(view, {("m",): d})
        assert [r.get("k").value for r in view.state.rows] == [5, 2, 1]

    def test_union_merges_deltas(self):
        env, m = build_env()
        plan = compile_q("select r.k as k from m.r r union "
                         "select s.k as k from m.s s")
        view = MaterializedView(plan, env)
        d = m.update(insert_row("s", {"k": 7, "b": 70}))
        res = maintain(view, {("m",): d})
        assert not res.stale
        assert equals(view.state, evaluate_plan(plan, env))

    def test_correlated_subquery_view(self):
        env, m = build_env()
        plan = compile_q(
            "select r.k as k, element(select s.b from m.s s "
            "where s.k = r.k) as b from m.r r order by r.k")
        view = MaterializedView(plan, env)
        d = m.update(insert_row("s", {"k": 2, "b": 20}))
        maintain(view, {("m",): d})
        assert to_py(view.state) == [{"k": 1, "b": 10}, {"k": 2, "b": 20}]
        assert equals(view.state, evaluate_plan(plan, env))


class TestStaleness:
    def test_bad_delta_falls_back_to_recompute(self):
        env, m = build_env()
        plan = compile_q("select r.a as a from m.r r")
        view = MaterializedView(plan, env)
        res = maintain(view, {("m",): Delta((Delete(("r",), 99),))})
        assert res.stale
        assert equals(view.state, evaluate_plan(plan, env))

    def test_none_delta_recomputes_and_diffs(self):
        """Sql-style writes report only the table touched, not what
        changed; the view recomputes and derives its delta by diffing."""
        env, m = build_env()
        plan = compile_q("select r.a as a from m.r r")
        view = MaterializedView(plan, env)
        m.update(insert_row("r", {"k": 8, "a": "n"}))
        res = maintain(view, {("m",): None})
        assert len(res.delta.ops) == 1
        assert isinstance(res.delta.ops[0], Insert)
        assert equals(view.state, evaluate_plan(plan, env))

    def test_unrelated_source_delta_is_ignored(self):
        env, m = build_env()
        plan = compile_q("select r.a as a from m.r r")
        view = MaterializedView(plan, env)
        res = maintain(view, {("other",): None})
        assert not res.stale and res.delta.ops == ()


class TestKeyedDiff:
    def test_key_identity_survives_reorder(self):
        keys = KeyRegistry()
        keys.declare_key(("db", "t"), ["id"])
        old = from_py({"db": {"t": [{"id": 1, "n": "a"}, {"id": 2, "n": "b"}]}})
        new = from_py({"db": {"t": [{"id": 2, "n": "b2"}, {"id": 1, "n": "a"}]}})
        d = diff(old, new, keys)
        assert equals(apply_delta(old, d), new)
        replaced = [op for op in d.ops if isinstance(op, Replace)]
        assert any(op.path[-1] == "n" for op in replaced)

    def test_duplicate_keys_fall_back_to_ordinals(self):
        keys = KeyRegistry()
        keys.declare_key(("db", "t"), ["id"])
        dup = from_py({"db": {"t": [{"id": 1, "n": "a"}, {"id": 1, "n": "b"}]}})
        new = from_py({"db": {"t": [{"id": 1, "n": "b"}]}})
        d = diff(dup, new, keys)
        assert equals(apply_delta(dup, d), new)


VIEWS = [
    "select r.k as k, r.a as a from m.r r",
    "select r.a as a from m.r r where r.k >= 2",
    "select r.k as k, r.a as a, s.b as b from m.r r, m.s s where r.k = s.k",
    "select r.k as k, count(*) as n from m.r r group by r.k order by r.k",
    "select r.k as k from m.r r union select s.k as k from m.s s",
    "select r.k as k from m.r r order by r.k desc limit 3",
    "select r.k as k, element(select s.b from m.s s where s.k = r.k) as b "
    "from m.r r",
]


def random_op(rng, m):
    root = m.snapshot()
    table = rng.choice(["r", "s"])
    t = root.get(table)
    n = len(t.rows)
    kind = rng.choice(["insert", "delete", "replace"])
    if kind == "insert" or n == 0:
        row = {"k": rng.randint(1, 5), "a": f"v{rng.randint(0, 9)}"}
        if table == "s":
            row = {"k": rng.randint(1, 5), "b": rng.randint(0, 99)}
        return Delta((Insert((table,), rng.randint(1, n + 1),
                             wrap_row(from_py(row))),))
    if kind == "delete":
        return Delta((Delete((table,), rng.randint(1, n)),))
    field = "a" if table == "r" else "b"
    value = from_py(f"w{rng.randint(0, 9)}" if table == "r"
                    else rng.randint(0, 99))
    return Delta((Replace((table, rng.randint(1, n), field), value),))


class TestRandomizedStreams:
    @pytest.mark.parametrize("seed", range(8))
    def test_maintained_equals_recompute(self, seed):
        rng = random.Random(seed)
        text = rng.choice(VIEWS)
        env, m = build_env()
        plan = compile_q(text)
        view = MaterializedView(plan, env)
        for _ in range(25):
            d = m.update(lambda v, rng=rng: random_op(rng, m))
            maintain(view, {("m",): d})
            fresh = evaluate_plan(plan, env)
            assert equals(view.state, fresh), (
                text, to_py(view.state), to_py(fresh))
