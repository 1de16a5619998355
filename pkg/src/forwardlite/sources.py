"""Data sources and their registry.

A source owns a subtree of the unified application state.  Memory sources
hold an immutable value behind a lock; sql-adapter sources wrap a sqlite
connection and are introspected at registration (table names, columns,
primary keys).  The reserved transient sources — session, url,
http_headers, request — are created per scope by the runtime rather than
registered; a config entry named `session` only customizes the session
source's initial value.
"""

from __future__ import annotations

import json
import sqlite3
import threading
from dataclasses import dataclass, field as dc_field
from typing import Callable

from .delta import Delta, apply_delta
from .errors import (
    ConnectionFailed,
    DuplicateSource,
    EvalError,
    ReadOnlySource,
)
from .values import (
    Path,
    Scalar,
    Table,
    Tuple,
    Value,
    binary,
    double,
    from_py,
    integer,
    navigate,
    string,
    NULL,
)

RESERVED_SOURCES = ("session", "url", "http_headers", "request")
READ_ONLY_RESERVED = ("url", "http_headers")


@dataclass(frozen=True)
class SourceSpec:
    name: str
    kind: str                     # 'memory' | 'sql'
    options: dict = dc_field(default_factory=dict)
    permissions: str = "read-write"   # 'read-write' | 'read-only'
    lifetime: str = "application"     # application | session | request | page


class Source:
    """Live source instance; see MemorySource and SqlSource."""

    name: str
    read_only: bool
    supports_pushdown: bool = False
    supports_dml: bool = True

    def get_value(self, path: Path) -> Value:
        raise NotImplementedError

    def check_writable(self, path: Path) -> None:
        if self.read_only:
            raise ReadOnlySource(f"source {self.name!r} is read-only")


class MemorySource(Source):
    """Holds one immutable value; mutation swaps the root under a lock."""

    supports_pushdown = False
    supports_dml = True

    def __init__(self, name: str, initial: Value | None = None,
                 read_only: bool = False,
                 schema: dict[str, list[str]] | None = None):
        self.name = name
        self.read_only = read_only
        self._value: Value = initial if initial is not None else Tuple(())
        self._lock = threading.RLock()
        # declared column order per table, for inserts without column lists
        self.schema = dict(schema) if schema else {}

    def columns_for(self, table: str) -> list[str] | None:
        return self.schema.get(table)

    def snapshot(self) -> Value:
        with self._lock:
            return self._value

    def get_value(self, path: Path) -> Value:
        with self._lock:
            return navigate(self._value, path)

    def apply(self, delta: Delta) -> None:
        with self._lock:
            self._value = apply_delta(self._value, delta)

    def update(self, fn: Callable[[Value], Delta]) -> Delta:
        """Compute a delta from the current value and apply it, atomically
        with respect to other writers."""
        with self._lock:
            delta = fn(self._value)
            self._value = apply_delta(self._value, delta)
            return delta

    def replace_root(self, value: Value) -> None:
        with self._lock:
            self._value = value


class SqlSource(Source):
    """sqlite-backed source.  One connection, serialized by a lock; tables
    and columns are introspected once at connect time."""

    supports_pushdown = True
    supports_dml = True

    def __init__(self, name: str, database: str, init_sql: str | None = None,
                 read_only: bool = False):
        self.name = name
        self.read_only = read_only
        self.database = database
        self._lock = threading.RLock()
        try:
            self._conn = sqlite3.connect(database, check_same_thread=False)
            if init_sql:
                self._conn.executescript(init_sql)
                self._conn.commit()
        except sqlite3.Error as e:
            raise ConnectionFailed(f"source {name!r} ({database}): {e}") from None
        self._columns: dict[str, list[str]] = {}
        self._pks: dict[str, list[str]] = {}
        self._introspect()

    def _introspect(self) -> None:
        with self._lock:
            cur = self._conn.execute(
                "select name from sqlite_master where type = 'table' "
                "and name not like 'sqlite_%'")
            tables = [r[0] for r in cur.fetchall()]
            for t in tables:
                info = self._conn.execute(f'pragma table_info("{t}")').fetchall()
                self._columns[t] = [row[1] for row in info]
                pk = sorted((row[5], row[1]) for row in info if row[5] > 0)
                self._pks[t] = [name for _, name in pk]

    def tables(self) -> list[str]:
        return sorted(self._columns)

    def columns(self, table: str) -> list[str]:
        if table not in self._columns:
            raise EvalError(f"source {self.name!r} has no table {table!r}")
        return list(self._columns[table])

    def primary_key(self, table: str) -> list[str]:
        return list(self._pks.get(table, []))

    def get_value(self, path: Path) -> Value:
        if len(path) != 1 or not isinstance(path[0], str):
            raise EvalError(
                f"source {self.name!r} exposes whole tables only; "
                f"got path {list(path)!r}")
        return self.fetch_table(path[0])

    def fetch_table(self, table: str) -> Table:
        cols = self.columns(table)
        col_list = ", ".join(f'"{c}"' for c in cols)
        rows = self.run_select(f'select {col_list} from "{table}"', ())
        return rows

    def run_select(self, sql: str, params: tuple) -> Table:
        with self._lock:
            cur = self._conn.execute(sql, params)
            names = [d[0] for d in cur.description]
            out = []
            for raw in cur.fetchall():
                out.append(Tuple(tuple(
                    (n, _from_sqlite(v)) for n, v in zip(names, raw))))
        return Table(tuple(out))

    def run_select_raw(self, sql: str, params: tuple) -> list[list]:
        """Run a select and return positional rows of Scalar values.

        Unlike run_select this never builds tuples from column names, so
        result sets with duplicate names stay intact.
        """
        with self._lock:
            cur = self._conn.execute(sql, params)
            return [[_from_sqlite(v) for v in raw] for raw in cur.fetchall()]

    def run_dml(self, sql: str, params: tuple) -> int:
        with self._lock:
            cur = self._conn.execute(sql, params)
            self._conn.commit()
            return cur.rowcount

    def run_dml_many(self, sql: str, param_rows: list[tuple]) -> int:
        with self._lock:
            cur = self._conn.executemany(sql, param_rows)
            self._conn.commit()
            return cur.rowcount


def _from_sqlite(v: object) -> Scalar:
    if v is None:
        return NULL
    if isinstance(v, int):
        return integer(v)
    if isinstance(v, float):
        return double(v)
    if isinstance(v, str):
        return string(v)
    if isinstance(v, bytes):
        return binary(v)
    raise EvalError(f"unsupported sqlite value {type(v).__name__}")


def to_sqlite_param(v: Value) -> object:
    """Convert a scalar to a sqlite bind parameter."""
    if not isinstance(v, Scalar):
        raise EvalError("only scalar values can be bound into pushed SQL")
    if v.kind in ("null", "integer", "double", "string"):
        return v.value
    if v.kind == "boolean":
        return 1 if v.value else 0
    if v.kind == "binary":
        return v.value
    if v.kind == "timestamp":
        return v.value  # epoch milliseconds
    raise EvalError(f"cannot bind scalar kind {v.kind!r}")


# --- registry -----------------------------------------------------------------


class SourceRegistry:
    """Application-lifetime sources plus templates for the per-scope ones."""

    def __init__(self) -> None:
        self.specs: dict[str, SourceSpec] = {}
        self.app_sources: dict[str, Source] = {}
        self.session_template: Value = Tuple(())
        self.session_schema: dict[str, list[str]] = {}

    def register(self, spec: SourceSpec) -> "SourceRegistry":
        if spec.name in ("url", "http_headers", "request"):
            raise DuplicateSource(f"source name {spec.name!r} is reserved")
        if spec.name in self.specs:
            raise DuplicateSource(f"source {spec.name!r} already registered")
        if spec.name == "session":
            if spec.kind != "memory":
                raise DuplicateSource("the session source must be a memory source")
            self.specs[spec.name] = spec
            self.session_template = _initial_value(spec)
            self.session_schema = dict(spec.options.get("schema") or {})
            return self
        if spec.kind == "memory":
            src: Source = MemorySource(
                spec.name, _initial_value(spec),
                read_only=(spec.permissions == "read-only"),
                schema=spec.options.get("schema"))
        elif spec.kind == "sql":
            src = SqlSource(
                spec.name,
                spec.options.get("database", ":memory:"),
                spec.options.get("init_sql"),
                read_only=(spec.permissions == "read-only"))
        else:
            raise DuplicateSource(f"unknown source kind {spec.kind!r}")
        self.specs[spec.name] = spec
        self.app_sources[spec.name] = src
        return self

    def source_names(self) -> frozenset[str]:
        return frozenset(self.app_sources) | frozenset(RESERVED_SOURCES)

    def make_session_source(self) -> MemorySource:
        return MemorySource("session", self.session_template,
                            schema=self.session_schema)

    @staticmethod
    def make_url_source(params: dict[str, str]) -> MemorySource:
        fields = tuple((k, string(v)) for k, v in params.items())
        return MemorySource("url", Tuple(fields), read_only=True)

    @staticmethod
    def make_headers_source(headers: dict[str, str]) -> MemorySource:
        fields = tuple((k.lower().replace("-", "_"), string(v))
                       for k, v in headers.items())
        return MemorySource("http_headers", Tuple(fields), read_only=True)


def _initial_value(spec: SourceSpec) -> Value:
    init = spec.options.get("initial")
    root = Tuple(()) if init is None else from_py(init)
    schema = spec.options.get("schema") or {}
    if schema and isinstance(root, Tuple):
        # tables declared in the schema start out empty unless initialized
        present = {name for name, _ in root.fields}
        extra = tuple((t, Table(())) for t in schema if t not in present)
        if extra:
            root = Tuple(root.fields + extra)
    return root


def load_registry(config: dict) -> SourceRegistry:
    """Build a registry from the application's source configuration:
    {"sources": [{"name":..., "kind":"memory"|"sql", "options":{...},
    "permissions":...}]}."""
    reg = SourceRegistry()
    for entry in config.get("sources", []):
        reg.register(SourceSpec(
            name=entry["name"],
            kind=entry["kind"],
            options=entry.get("options", {}),
            permissions=entry.get("permissions", "read-write"),
            lifetime=entry.get("lifetime", "application"),
        ))
    return reg


def load_registry_file(path: str) -> SourceRegistry:
    with open(path, "r", encoding="utf-8") as f:
        return load_registry(json.load(f))
