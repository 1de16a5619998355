"""Name resolution: aliases, locals, sources, and static mutability checks."""

import pytest

from forwardlite.errors import (
    InvalidAggregation,
    MutableFunctionInPage,
    MutationInImmutable,
    UnknownName,
)
from forwardlite.parser import parse_expression, parse_program, parse_query
from forwardlite.resolver import (
    AliasRef,
    FunctionInfo,
    FunctionTable,
    LocalRef,
    SourceRef,
    resolve_expression,
    resolve_function,
    resolve_query,
)

SOURCES = ["db1", "db2", "session", "url"]


def rq(text, locals_=(), page_query=False, functions=None):
    return resolve_query(parse_query(text), SOURCES, locals_=locals_,
                         functions=functions, page_query=page_query)


def first_item(q):
    return q.items[0].expr


class TestNameKinds:
    def test_alias_beats_source(self):
        q = rq("select db1.a from db1.t db1")
        assert first_item(q) == AliasRef("db1", ("a",), pos=None)

    def test_source_table_reference(self):
        q = rq("select b.title from db1.books b")
        assert q.from_items[0].source == SourceRef("db1", ("books",),
                                                   pos=None)

    def test_local_binding(self):
        e = resolve_expression(parse_expression("x.field"), SOURCES,
                               locals_=["x"])
        assert e == LocalRef("x", ("field",), pos=None)

    def test_free_head_is_unknown(self):
        with pytest.raises(UnknownName, match="nope"):
            rq("select nope.a from db1.t t")

    def test_unknown_from_source(self):
        with pytest.raises(UnknownName):
            rq("select t.a from nosuch.t t")

    def test_with_view_shadows_source(self):
        q = rq("with db2 as (select t.a from db1.t t) select v.a from db2 v")
        assert q.body.from_items[0].source == LocalRef("db2", pos=None)

    def test_inner_query_sees_outer_alias(self):
        q = rq("select (select count(*) from db1.u y where y.k = x.k) as n "
               "from db1.t x")
        sub = first_item(q).query
        cmp = sub.where
        assert cmp.right == AliasRef("x", ("k",), pos=None)

    def test_bare_alias_is_whole_row(self):
        q = rq("select element(select u.v from db1.t u where u.k = x.k) as v "
               "from db1.t x")
        assert first_item(q).args[0].query is not None


class TestFunctions:
    def table(self):
        t = FunctionTable()
        t.add(FunctionInfo("pure", 1, "immutable"))
        t.add(FunctionInfo("bump", 1, "mutable"))
        return t

    def test_known_function_resolves(self):
        e = resolve_expression(parse_expression("pure(1)"), SOURCES,
                               functions=self.table())
        assert e.name == "pure"

    def test_unknown_function_passes_resolution(self):
        resolve_expression(parse_expression("mystery(1)"), SOURCES,
                           functions=self.table())

    def test_mutable_function_rejected_in_page_query(self):
        with pytest.raises(MutableFunctionInPage):
            resolve_query(parse_query("select bump(1)"), SOURCES,
                          functions=self.table(), page_query=True)

    def test_immutable_function_allowed_in_page_query(self):
        resolve_query(parse_query("select pure(1)"), SOURCES,
                      functions=self.table(), page_query=True)

    def test_immutable_body_may_not_write(self):
        decl, = parse_program(
            "create function f() immutable as begin "
            "insert into db1.t values (1); end;")
        with pytest.raises(MutationInImmutable):
            resolve_function(decl, SOURCES)

    def test_immutable_body_may_not_call_mutable(self):
        decl, = parse_program(
            "create function f() immutable as begin call bump(1); end;")
        with pytest.raises(MutationInImmutable):
            resolve_function(decl, SOURCES, functions=self.table())

    def test_mutable_body_resolves(self):
        decl, = parse_program(
            "create function f(a) mutable as begin "
            "insert into session.notes(x) values (a); end;")
        out = resolve_function(decl, SOURCES)
        ins = out.body.body[0]
        assert ins.target == SourceRef("session", ("notes",), pos=None)

    def test_params_resolve_as_locals(self):
        decl, = parse_program(
            "create function f(a) immutable as begin return a + 1; end;")
        out = resolve_function(decl, SOURCES)
        ret = out.body.body[0]
        assert ret.value.expr.left == LocalRef("a", pos=None)


class TestAggregation:
    def test_aggregate_requires_group_or_whole(self):
        rq("select count(*) from db1.t t")
        rq("select t.a, count(*) from db1.t t group by t.a")

    def test_nonaggregated_item_outside_group_rejected(self):
        with pytest.raises(InvalidAggregation):
            rq("select t.a, count(*) from db1.t t")

    def test_item_must_be_grouped(self):
        with pytest.raises(InvalidAggregation):
            rq("select t.b from db1.t t group by t.a")


class TestOrderByScope:
    def test_order_by_resolves_in_from_scope(self):
        q = rq("select l.library_id as lid from db2.libraries l "
               "order by l.library_id")
        assert q.order_by[0].expr == AliasRef("l", ("library_id",), pos=None)

    def test_order_by_does_not_see_output_names(self):
        with pytest.raises(UnknownName):
            rq("select l.library_id as lid from db2.libraries l "
               "order by lid")


class TestErrorDetail:
    def test_unknown_name_lists_candidates(self):
        with pytest.raises(UnknownName) as exc:
            rq("select mystery.a from db1.t t")
        msg = str(exc.value)
        assert "mystery" in msg and "db1" in msg and "session" in msg
