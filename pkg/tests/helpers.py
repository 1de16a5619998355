"""Shared fixtures: the demo schema, tiny query runners, value strategies."""

from __future__ import annotations

import random
from pathlib import Path

import hypothesis.strategies as st

from forwardlite.engine import Environment, evaluate_plan
from forwardlite.parser import parse_query
from forwardlite.planner import PlannerCatalog, compile_query
from forwardlite.resolver import resolve_query
from forwardlite.sources import SourceRegistry, SourceSpec

REPO = Path(__file__).resolve().parent.parent
DEMO_DIR = REPO / "demo"

BOOKS_SQL = """
create table books (book_id integer primary key, title text, isbn text);
insert into books values (7, 'Database Management Systems', '0131873253');
insert into books values (8, 'Transaction Processing', '1558601902');
"""

LIBRARIES_SQL = """
create table libraries (library_id integer primary key, library_name text,
                        lat real, lng real);
create table inventory (library_ref integer, isbn text, copy_id integer,
                        is_available integer,
                        primary key (library_ref, isbn, copy_id));
insert into libraries values (1, 'Central Library', 37.77, -122.41);
insert into libraries values (2, 'East Branch', 37.80, -122.25);
insert into libraries values (3, 'South Branch', 37.70, -122.45);
insert into inventory values (1, '0131873253', 1, 1);
insert into inventory values (2, '0131873253', 1, 0);
insert into inventory values (3, '0131873253', 1, 1);
insert into inventory values (2, '1558601902', 1, 1);
"""

NOTES_SCHEMA = {"notes": ["book_ref", "library_ref", "comment"]}


def demo_registry() -> SourceRegistry:
    reg = SourceRegistry()
    reg.register(SourceSpec("db1", "sql",
                            {"database": ":memory:", "init_sql": BOOKS_SQL}))
    reg.register(SourceSpec("db2", "sql",
                            {"database": ":memory:",
                             "init_sql": LIBRARIES_SQL}))
    reg.register(SourceSpec("session", "memory",
                            {"initial": {"notes": []},
                             "schema": NOTES_SCHEMA}))
    return reg


def demo_env(reg: SourceRegistry | None = None, isbn: str = "0131873253",
             mode: str = "read-write"):
    reg = reg or demo_registry()
    sources = dict(reg.app_sources)
    sources["session"] = reg.make_session_source()
    sources["url"] = reg.make_url_source({"isbn": isbn})
    env = Environment(sources, PlannerCatalog.from_registry(reg), mode=mode)
    return env, reg


def run_q(text: str, env: Environment, source_names, locals_=()):
    rq = resolve_query(parse_query(text), source_names, locals_=locals_)
    return evaluate_plan(compile_query(rq, env.catalog), env)


MAP_PAGE = (DEMO_DIR / "pages" / "map.html").read_text(encoding="utf-8")


# --- random JSON-expressible values ---------------------------------------------

_KEYS = "abcdefgh"


def random_json(rng: random.Random, depth: int = 5, width: int = 6):
    """Plain-random JSON value, depth and width bounded."""
    kinds = ["null", "bool", "int", "float", "str"]
    if depth > 0:
        kinds += ["list", "dict", "list", "dict"]
    k = rng.choice(kinds)
    if k == "null":
        return None
    if k == "bool":
        return rng.random() < 0.5
    if k == "int":
        return rng.randint(-10**9, 10**9)
    if k == "float":
        return rng.choice([0.0, -1.5, 3.25, 37.77, 1e10, -2.5e-3,
                           rng.uniform(-1e6, 1e6)])
    if k == "str":
        return "".join(rng.choice("abc xyz'\"\\éπ\n") for _ in
                       range(rng.randint(0, 10)))
    n = rng.randint(0, width)
    if k == "list":
        return [random_json(rng, depth - 1, width) for _ in range(n)]
    names = rng.sample(_KEYS, min(n, len(_KEYS)))
    return {name: random_json(rng, depth - 1, width) for name in names}


# hypothesis strategies for the same space; field names avoid the reserved
# $type/$value envelope and the wrapper sentinel
json_scalars = st.one_of(
    st.none(),
    st.booleans(),
    st.integers(min_value=-10**12, max_value=10**12),
    st.floats(allow_nan=False, allow_infinity=False),
    st.text(max_size=12),
)


def json_values(depth: int = 4):
    if depth <= 0:
        return json_scalars
    sub = json_values(depth - 1)
    return st.one_of(
        json_scalars,
        st.lists(sub, max_size=5),
        st.dictionaries(st.text(alphabet=_KEYS + "_", min_size=1, max_size=6),
                        sub, max_size=5),
    )
