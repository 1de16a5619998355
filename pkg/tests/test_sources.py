"""Source registry, reserved names, permissions, per-session isolation."""

import pytest

from forwardlite.errors import (
    ConnectionFailed,
    DuplicateSource,
    EvalError,
    ReadOnlySource,
)
from forwardlite.sources import (
    RESERVED_SOURCES,
    MemorySource,
    SourceRegistry,
    SourceSpec,
    SqlSource,
    load_registry,
)
from forwardlite.values import (
    Table,
    Tuple,
    from_py,
    to_py,
)
from forwardlite.delta import Delta, Insert
from forwardlite.values import integer, wrap_row


class TestRegistry:
    def test_register_and_names(self):
        reg = SourceRegistry()
        reg.register(SourceSpec("db", "memory", {"initial": {"t": []}}))
        assert "db" in reg.app_sources
        assert set(RESERVED_SOURCES) <= reg.source_names()

    def test_duplicate_rejected(self):
        reg = SourceRegistry()
        reg.register(SourceSpec("db", "memory"))
        with pytest.raises(DuplicateSource):
            reg.register(SourceSpec("db", "memory"))

    @pytest.mark.parametrize("name", ["url", "http_headers", "request"])
    def test_reserved_names_rejected(self, name):
        with pytest.raises(DuplicateSource, match="reserved"):
            SourceRegistry().register(SourceSpec(name, "memory"))

    def test_unknown_kind_rejected(self):
        with pytest.raises(DuplicateSource, match="kind"):
            SourceRegistry().register(SourceSpec("x", "graph"))

    def test_session_must_be_memory(self):
        with pytest.raises(DuplicateSource):
            SourceRegistry().register(SourceSpec("session", "sql"))

    def test_session_spec_only_sets_template(self):
        reg = SourceRegistry()
        reg.register(SourceSpec("session", "memory",
                                {"initial": {"notes": []}}))
        assert "session" not in reg.app_sources

    def test_schema_tables_start_empty(self):
        reg = SourceRegistry()
        reg.register(SourceSpec("m", "memory",
                                {"initial": {"x": 1},
                                 "schema": {"t": ["a", "b"]}}))
        v = reg.app_sources["m"].snapshot()
        assert to_py(v) == {"x": 1, "t": []}
        assert isinstance(v.get("t"), Table)


class TestMemorySource:
    def test_update_is_delta_based(self):
        src = MemorySource("m", from_py({"t": []}))
        delta = src.update(lambda v: Delta(
            (Insert(("t",), 1, wrap_row(integer(5))),)))
        assert to_py(src.get_value(("t",))) == [5]
        assert len(delta.ops) == 1

    def test_read_only_flag(self):
        src = MemorySource("m", from_py({"t": []}), read_only=True)
        with pytest.raises(ReadOnlySource):
            src.check_writable(("t",))

    def test_navigation(self):
        src = MemorySource("m", from_py({"a": {"b": [10, 20]}}))
        assert to_py(src.get_value(("a", "b", 2))) == 20

    def test_insert_column_order_from_schema(self):
        src = MemorySource("m", from_py({"t": []}),
                           schema={"t": ["x", "y"]})
        assert src.columns_for("t") == ["x", "y"]
        assert src.columns_for("u") is None


class TestSqlSource:
    def test_introspection(self):
        src = SqlSource("db", ":memory:",
                        "create table t (a integer primary key, b text);")
        assert src.tables() == ["t"]
        assert src.columns("t") == ["a", "b"]
        assert src.primary_key("t") == ["a"]

    def test_fetch_table_values(self):
        src = SqlSource("db", ":memory:", """
            create table t (a integer, b text, c real);
            insert into t values (1, 'x', 1.5), (2, null, 2.0);
        """)
        assert to_py(src.fetch_table("t")) == [
            {"a": 1, "b": "x", "c": 1.5},
            {"a": 2, "b": None, "c": 2.0},
        ]

    def test_unknown_table(self):
        src = SqlSource("db", ":memory:", "create table t (a integer);")
        with pytest.raises(EvalError, match="no table"):
            src.columns("missing")

    def test_whole_tables_only(self):
        src = SqlSource("db", ":memory:", "create table t (a integer);")
        with pytest.raises(EvalError):
            src.get_value(("t", 1))

    def test_bad_init_sql(self):
        with pytest.raises(ConnectionFailed):
            SqlSource("db", ":memory:", "create syntax error;")

    def test_read_only_flag(self):
        src = SqlSource("db", ":memory:", "create table t (a integer);",
                        read_only=True)
        with pytest.raises(ReadOnlySource):
            src.check_writable(("t",))


class TestPerScopeSources:
    def test_session_sources_are_isolated(self):
        reg = SourceRegistry()
        reg.register(SourceSpec("session", "memory",
                                {"initial": {"notes": []},
                                 "schema": {"notes": ["a"]}}))
        s1, s2 = reg.make_session_source(), reg.make_session_source()
        s1.update(lambda v: Delta(
            (Insert(("notes",), 1, wrap_row(integer(1))),)))
        assert to_py(s1.get_value(("notes",))) == [1]
        assert to_py(s2.get_value(("notes",))) == []

    def test_url_source(self):
        src = SourceRegistry.make_url_source({"isbn": "111", "q": "x"})
        assert src.read_only
        assert to_py(src.snapshot()) == {"isbn": "111", "q": "x"}

    def test_header_names_are_lowered(self):
        src = SourceRegistry.make_headers_source(
            {"User-Agent": "test", "X-Thing": "1"})
        assert to_py(src.snapshot()) == {"user_agent": "test", "x_thing": "1"}


class TestConfigLoading:
    def test_load_registry(self):
        reg = load_registry({"sources": [
            {"name": "db", "kind": "sql",
             "options": {"init_sql": "create table t (a integer);"}},
            {"name": "m", "kind": "memory",
             "options": {"initial": {"x": 1}},
             "permissions": "read-only"},
            {"name": "session", "kind": "memory",
             "options": {"schema": {"notes": ["a"]}},
             "lifetime": "session"},
        ]})
        assert isinstance(reg.app_sources["db"], SqlSource)
        assert reg.app_sources["m"].read_only
        assert reg.session_schema == {"notes": ["a"]}

    def test_empty_config(self):
        reg = load_registry({})
        assert reg.app_sources == {}
        assert isinstance(reg.make_session_source().snapshot(), Tuple)
