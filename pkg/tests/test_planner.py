"""Plan shapes: what runs on the remote engine vs. the local evaluator."""

import pytest

from helpers import LIBRARIES_SQL, demo_env, demo_registry, run_q

from forwardlite.engine import Environment, evaluate_plan
from forwardlite.parser import parse_query
from forwardlite.planner import (
    Apply,
    PlannerCatalog,
    RemoteFetch,
    Scan,
    Sort,
    compile_query,
    plan_to_str,
    walk_plan,
)
from forwardlite.resolver import resolve_query
from forwardlite.sources import SourceRegistry, SourceSpec
from forwardlite.values import equals, to_py

CROSS = """select b.title, i.copy_id from db1.books b, db2.inventory i
           where b.isbn = i.isbn and i.is_available order by i.copy_id"""

LIBRARIES = """
select l.library_id, l.library_name, l.lat, l.lng,
       element(select n.comment from session.notes n
               where n.library_ref = l.library_id) as note
from db2.libraries l
where exists (select i.copy_id from db2.inventory i
              where i.library_ref = l.library_id
                and i.isbn = url.isbn and i.is_available)
order by l.library_id
"""


def plan_for(text, reg, pushdown=True):
    catalog = PlannerCatalog.from_registry(reg, pushdown=pushdown)
    node = resolve_query(parse_query(text), reg.source_names())
    return compile_query(node, catalog), catalog


def fetches(plan):
    return [n for n in walk_plan(plan) if isinstance(n, RemoteFetch)]


class TestPushdownShapes:
    def test_single_source_query_is_one_fetch(self):
        _, reg = demo_env()
        plan, _ = plan_for(
            "select i.isbn, count(*) as n from db2.inventory i "
            "group by i.isbn order by i.isbn", reg)
        fs = fetches(plan)
        assert len(fs) == 1 and fs[0].source == "db2"
        assert "group by" in fs[0].sql.lower()

    def test_cross_source_join_fetches_each_side_once(self):
        _, reg = demo_env()
        plan, _ = plan_for(CROSS, reg)
        assert sorted(f.source for f in fetches(plan)) == ["db1", "db2"]

    def test_correlated_exists_same_source_pushed_down(self):
        """The exists subquery shares its source with the outer block, so
        the whole filter travels inside the one remote query."""
        _, reg = demo_env()
        plan, _ = plan_for(LIBRARIES, reg)
        fs = fetches(plan)
        assert [f.source for f in fs] == ["db2"]
        assert "exists" in fs[0].sql.lower()

    def test_cross_source_subquery_runs_locally(self):
        _, reg = demo_env()
        plan, _ = plan_for(LIBRARIES, reg)
        applies = [n for n in walk_plan(plan) if isinstance(n, Apply)]
        assert applies, "session.notes lookup must be a local apply"
        assert any(isinstance(n, Sort) for n in walk_plan(plan))

    def test_session_only_query_has_no_fetches(self):
        _, reg = demo_env()
        plan, _ = plan_for("select n.comment from session.notes n", reg)
        assert fetches(plan) == []

    def test_pushdown_off_uses_scans(self):
        _, reg = demo_env()
        plan, _ = plan_for(CROSS, reg, pushdown=False)
        assert fetches(plan) == []
        scans = [n for n in walk_plan(plan) if isinstance(n, Scan)]
        assert len(scans) >= 2

    def test_plan_to_str_mentions_fetch(self):
        _, reg = demo_env()
        plan, _ = plan_for(CROSS, reg)
        s = plan_to_str(plan)
        assert "RemoteFetch" in s and "db1" in s and "db2" in s


class TestPushdownParity:
    """Same rows either way; only the execution site moves."""

    QUERIES = [
        CROSS,
        LIBRARIES,
        "select count(*) as c from db2.inventory i where i.is_available",
        "select i.isbn, count(*) as n from db2.inventory i "
        "group by i.isbn order by i.isbn",
        "select l.library_name from db2.libraries l "
        "order by l.lat desc limit 2",
        "select b.title from db1.books b where b.isbn = url.isbn",
        "select b.title as t from db1.books b union "
        "select l.library_name as t from db2.libraries l",
    ]

    @pytest.mark.parametrize("text", QUERIES)
    def test_results_agree(self, text):
        envs = []
        for pushdown in (True, False):
            reg = demo_registry()
            sources = dict(reg.app_sources)
            sources["session"] = reg.make_session_source()
            sources["url"] = SourceRegistry.make_url_source(
                {"isbn": "0131873253"})
            catalog = PlannerCatalog.from_registry(reg, pushdown=pushdown)
            envs.append((Environment(sources, catalog), reg))
        node = resolve_query(parse_query(text), envs[0][1].source_names())
        values = [evaluate_plan(compile_query(node, env.catalog), env)
                  for env, _ in envs]
        assert equals(values[0], values[1]), text


class TestParameterBinding:
    def test_outer_values_bind_as_parameters(self):
        """Correlation with a non-sql name (url.isbn) becomes a bound
        parameter, not a literal spliced into the SQL text."""
        _, reg = demo_env()
        plan, _ = plan_for(
            "select i.copy_id from db2.inventory i where i.isbn = url.isbn "
            "order by i.copy_id", reg)
        f, = fetches(plan)
        assert "?" in f.sql
        assert "0131873253" not in f.sql

    def test_bound_query_evaluates(self):
        env, reg = demo_env()
        v = run_q("select i.library_ref from db2.inventory i "
                  "where i.isbn = url.isbn and i.is_available "
                  "order by i.library_ref", env, reg.source_names())
        assert [r.get("library_ref").value for r in v.rows] == [1, 3]


class TestIsolationFromSqlDialect:
    def test_boolean_column_truthiness(self):
        """SQLite stores booleans as 0/1; bare column predicates must
        still behave as booleans after fetch."""
        reg = SourceRegistry()
        reg.register(SourceSpec("db", "sql", {"init_sql": """
            create table t (id integer, flag integer);
            insert into t values (1, 1), (2, 0), (3, 1);
        """}))
        catalog = PlannerCatalog.from_registry(reg)
        env = Environment(dict(reg.app_sources), catalog)
        node = resolve_query(
            parse_query("select t.id from db.t t where t.flag order by t.id"),
            reg.source_names())
        v = evaluate_plan(compile_query(node, catalog), env)
        assert [r.get("id").value for r in v.rows] == [1, 3]
