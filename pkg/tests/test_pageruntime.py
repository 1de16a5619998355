"""Page evaluation: instance trees, carry, locality, request views.

Uses the demo map page end to end, plus small synthetic pages for the
compile-time rules.
"""

import pytest

from helpers import MAP_PAGE, NOTES_SCHEMA, demo_registry

from forwardlite.engine import READ_ONLY, Environment
from forwardlite.errors import PageEvalError, WriteToDerived
from forwardlite.ivm import keys_from_registry
from forwardlite.pagespec import parse_page
from forwardlite.pageruntime import (
    apply_user_input,
    build_request_view,
    compile_page,
    evaluate_page,
    event_descriptors,
    page_delta,
)
from forwardlite.planner import PlannerCatalog
from forwardlite.sources import SourceRegistry
from forwardlite.values import from_py, integer, navigate, string, to_py

ZOOM = ("children", "_2", "then", 1, "children", "_3", "zoom")
MARKERS = ("children", "_2", "then", 1, "children", "_3", "markers")


class Fixture:
    """One registry and session shared by successive evaluations, the way
    a live session holds them across request cycles."""

    def __init__(self, isbn="0131873253"):
        self.reg = demo_registry()
        self.catalog = PlannerCatalog.from_registry(self.reg)
        self.session = self.reg.make_session_source()
        self.url = SourceRegistry.make_url_source({"isbn": isbn})
        self.keys = keys_from_registry(self.reg)
        pf = parse_page(MAP_PAGE, "map", filename="map.html")
        names = set(self.reg.app_sources) | {"session", "url", "http_headers"}
        self.cp = compile_page(pf, names, catalog=self.catalog)

    def env(self):
        return Environment(
            {**self.reg.app_sources, "session": self.session,
             "url": self.url},
            self.catalog, mode=READ_ONLY)

    def fresh(self):
        return evaluate_page(self.cp, self.env(), keys=self.keys)

    def next(self, prior, base_deltas=None):
        return evaluate_page(self.cp, self.env(), prior=prior,
                             base_deltas=base_deltas or {}, keys=self.keys)


def compile_src(src, sources=("db1", "db2")):
    reg = demo_registry()
    pf = parse_page(src, "p", filename="p.html")
    names = set(sources) | {"session", "url", "http_headers"}
    return compile_page(pf, names, catalog=PlannerCatalog.from_registry(reg))


class TestInstanceTree:
    def test_shape_of_demo_page(self):
        fx = Fixture()
        st = fx.fresh()
        assert to_py(navigate(st.root, ("children", "_1"))) == \
            "Database Management Systems"
        then = navigate(st.root, ("children", "_2", "then"))
        assert len(then.rows) == 1
        assert to_py(navigate(st.root, ZOOM)) == 12
        markers = navigate(st.root, MARKERS)
        assert [to_py(navigate(markers, (i, "label")))
                for i in (1, 2)] == ["Central Library", "South Branch"]

    def test_else_branch_on_unknown_isbn(self):
        fx = Fixture(isbn="no-such")
        st = fx.fresh()
        els = navigate(st.root, ("children", "_2", "else"))
        assert len(els.rows) == 1
        assert len(navigate(st.root, ("children", "_2", "then")).rows) == 0
        tid = to_py(navigate(els, (1, "template")))
        assert "No copies available" in fx.cp.templates[tid]

    def test_instances_share_deduped_templates(self):
        fx = Fixture()
        st = fx.fresh()
        markers = navigate(st.root, MARKERS)
        infos = [navigate(markers, (i, "infowindow", "template"))
                 for i in (1, 2)]
        assert to_py(infos[0]) == to_py(infos[1])
        assert to_py(infos[0]) in fx.cp.templates

    def test_classification_marks_bind_slots_base(self):
        fx = Fixture()
        st = fx.fresh()
        assert st.classification[ZOOM] == "base"
        assert st.classification.get(MARKERS + (1, "lat")) != "base"

    def test_unit_annotation_present(self):
        fx = Fixture()
        st = fx.fresh()
        unit_paths = [p for p, c in st.annotations.items()
                      if c == "demo.map.Markers"]
        assert unit_paths == [("children", "_2", "then", 1,
                               "children", "_3")]


class TestEvents:
    def test_event_ids_are_instance_qualified(self):
        fx = Fixture()
        st = fx.fresh()
        save = sorted(q for q in st.events if q.startswith("e1@"))
        assert len(save) == 2
        assert all("@children/_2/then/1/children/_3/markers/" in q
                   for q in save)

    def test_event_descriptors_from_compiled_page(self):
        fx = Fixture()
        desc = event_descriptors(fx.cp)
        assert desc["e1"] == {"dom": "click", "method": "ajax",
                              "url": "/save_note"}
        assert desc["e2"]["url"] == "/delete_note"

    def test_request_view_scopes(self):
        fx = Fixture()
        st = fx.fresh()
        ev = sorted(q for q in st.events if q.startswith("e1@"))[0]
        rv = build_request_view(st, ev)
        assert set(rv.entries) == {"book", "libraries", "l", "comment"}
        assert rv.entries["l"].writable is False
        assert rv.entries["comment"].writable is True
        assert to_py(rv.entries["l"].value)["library_id"] == 1

    def test_unknown_event_rejected(self):
        from forwardlite.errors import UnknownEvent
        fx = Fixture()
        st = fx.fresh()
        with pytest.raises(UnknownEvent):
            build_request_view(st, "e9@children/_2")


class TestBaseValueCarry:
    def test_input_survives_unrelated_reevaluation(self):
        fx = Fixture()
        st = fx.fresh()
        st = apply_user_input(st, ZOOM, integer(9))
        st2 = fx.next(st)
        assert to_py(navigate(st2.root, ZOOM)) == 9
        assert page_delta(st, st2).ops == ()

    def test_write_to_derived_rejected(self):
        fx = Fixture()
        st = fx.fresh()
        with pytest.raises(WriteToDerived):
            apply_user_input(st, MARKERS + (1, "lat"), integer(1))

    def test_uncommitted_input_survives_base_change(self):
        fx = Fixture()
        st = fx.fresh()
        comment = MARKERS + (1, "infowindow", "children", "_5",
                             "then", 1, "children", "_6")
        assert st.classification.get(comment) == "base"
        st = apply_user_input(st, comment, string("half-typed"))
        fx.session.replace_root(from_py({"notes": [
            {"book_ref": 7, "library_ref": 3, "comment": "done"}]}))
        st2 = fx.next(st, {("session",): None})
        assert to_py(navigate(st2.root, comment)) == "half-typed"


class TestLocality:
    def test_branch_flip_confined_to_one_infowindow(self):
        fx = Fixture()
        st = fx.fresh()
        fx.session.replace_root(from_py({"notes": [
            {"book_ref": 7, "library_ref": 1, "comment": "great"}]}))
        st2 = fx.next(st, {("session",): None})
        window = MARKERS + (1, "infowindow")
        d = page_delta(st, st2)
        assert d.ops
        for op in d.ops:
            assert op.path[:len(window)] == window

    def test_new_row_is_single_insert(self):
        fx = Fixture()
        st = fx.fresh()
        fx.reg.app_sources["db2"].run_dml(
            "update inventory set is_available = 1 where library_ref = 2",
            ())
        st2 = fx.next(st, {("db2", "inventory"): None})
        d = page_delta(st, st2)
        inserts = [op for op in d.ops if type(op).__name__ == "Insert"]
        assert len(inserts) == 1
        assert inserts[0].path == MARKERS and inserts[0].ordinal == 2
        markers = navigate(st2.root, MARKERS)
        assert [to_py(navigate(markers, (i, "label"))) for i in (1, 2, 3)] \
            == ["Central Library", "East Branch", "South Branch"]

    def test_iteration_identity_preserves_inputs_on_insert(self):
        fx = Fixture()
        st = fx.fresh()
        south = MARKERS + (2, "infowindow", "children", "_5",
                           "then", 1, "children", "_6")
        st = apply_user_input(st, south, string("mine"))
        fx.reg.app_sources["db2"].run_dml(
            "update inventory set is_available = 1 where library_ref = 2",
            ())
        st2 = fx.next(st, {("db2", "inventory"): None})
        moved = MARKERS + (3, "infowindow", "children", "_5",
                           "then", 1, "children", "_6")
        assert to_py(navigate(st2.root, moved)) == "mine"


class TestCompileRules:
    def test_double_bind_rejected(self):
        with pytest.raises(PageEvalError, match="already bound"):
            compile_src("<div><% define q string %>"
                        "<input <% bind q %>><input <% bind q %>>"
                        "</div>")

    def test_bind_across_iteration_boundary_rejected(self):
        with pytest.raises(PageEvalError, match="iteration boundary"):
            compile_src(
                "<div><% define q string %>"
                "<% for b in (select x.book_id from db1.books x) %>"
                "<input <% bind q %>>"
                "<% end %></div>")

    def test_bind_without_define_synthesizes_one(self):
        cp = compile_src("<input <% bind q init 'x' %>>")
        desc = event_descriptors(cp)
        assert desc == {}

    def test_mutable_function_rejected_in_page_query(self):
        from forwardlite.resolver import FunctionInfo, FunctionTable

        reg = demo_registry()
        ft = FunctionTable()
        ft.add(FunctionInfo("bump", 0, "mutable"))
        pf = parse_page("<p><%= bump() %></p>", "p", filename="p.html")
        names = set(reg.app_sources) | {"session", "url", "http_headers"}
        with pytest.raises(PageEvalError, match="bump"):
            compile_page(pf, names, functions=ft,
                         catalog=PlannerCatalog.from_registry(reg))


class TestViewMaintenance:
    def test_page_views_are_materialized(self):
        fx = Fixture()
        st = fx.fresh()
        assert st.mviews, "with-views should be materialized"

    def test_incremental_update_equals_fresh_eval(self):
        fx = Fixture()
        st = fx.fresh()
        fx.session.replace_root(from_py({"notes": [
            {"book_ref": 7, "library_ref": 1, "comment": "note"}]}))
        incremental = fx.next(st, {("session",): None})
        clean = fx.fresh()
        assert to_py(navigate(incremental.root, MARKERS)) == \
            to_py(navigate(clean.root, MARKERS))
