"""The wire protocol over real HTTP, application loading, sessions."""

import json
import re
import threading
import time

import pytest

from http.client import HTTPConnection

from helpers import DEMO_DIR

from forwardlite.delta import apply_delta, delta_from_py
from forwardlite.errors import AppLoadError
from forwardlite.server import (
    AppServer,
    DeltaMsg,
    ErrorMsg,
    InitPage,
    NavigateMsg,
    SessionStore,
    load_application,
    make_http_server,
)
from forwardlite.values import from_py, to_canonical_json


@pytest.fixture(scope="module")
def served():
    app = load_application(str(DEMO_DIR))
    httpd = make_http_server(app, 0)
    port = httpd.server_address[1]
    t = threading.Thread(target=httpd.serve_forever, daemon=True)
    t.start()
    yield port
    httpd.shutdown()


class Client:
    def __init__(self, port):
        self.port = port
        self.cookie = None

    def get(self, path):
        c = HTTPConnection("127.0.0.1", self.port)
        headers = {"Cookie": self.cookie} if self.cookie else {}
        c.request("GET", path, headers=headers)
        r = c.getresponse()
        body = r.read().decode()
        sc = r.getheader("Set-Cookie")
        if sc:
            self.cookie = sc.split(";")[0]
        return r.status, body

    def post_event(self, event_id, version, inputs=()):
        c = HTTPConnection("127.0.0.1", self.port)
        headers = {"Content-Type": "application/json"}
        if self.cookie:
            headers["Cookie"] = self.cookie
        c.request("POST", "/__fw/event", json.dumps(
            {"event_id": event_id, "state_version": version,
             "inputs": list(inputs)}), headers)
        r = c.getresponse()
        return r.status, json.loads(r.read().decode())


def init_payload(html):
    m = re.search(r'<script type="application/x-fw-init">(.*?)</script>',
                  html, re.S)
    return json.loads(m.group(1))


def canon(obj):
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False,
                      sort_keys=True)


def find_save_event(init):
    """Locate the comment bind and save event purely from wire data, the
    way the browser runtime does: data-fw-* attributes in templates plus
    instance paths."""
    state = init["state"]
    markers_parent = state["children"]["_2"]["then"][0]["children"]["_3"]
    infow = markers_parent["markers"][0]["infowindow"]
    if_slot = next(k for k, v in infow["children"].items()
                   if isinstance(v, dict) and "then" in v)
    then_inst = infow["children"][if_slot]["then"][0]
    tmpl = init["templates"][then_inst["template"]]
    bind_slot = re.search(r'data-fw-bind="(_\d+)"', tmpl).group(1)
    eid = re.search(r'data-fw-event="(e\d+)"', tmpl).group(1)
    inst_path = ["children", "_2", "then", 1, "children", "_3",
                 "markers", 1, "infowindow", "children", if_slot,
                 "then", 1]
    qualified = eid + "@" + "/".join(str(s) for s in inst_path)
    return qualified, inst_path + ["children", bind_slot], if_slot


class TestInitPage:
    def test_full_load(self, served):
        a = Client(served)
        status, html = a.get("/libraries?isbn=0131873253")
        assert status == 200 and a.cookie
        init = init_payload(html)
        assert init["page"] == "map"
        assert init["state_version"] == 1
        assert init["event_table"]["e1"] == {
            "dom": "click", "method": "ajax", "url": "/save_note"}
        assert init["event_table"]["e2"]["url"] == "/delete_note"
        markers = init["state"]["children"]["_2"]["then"][0] \
            ["children"]["_3"]["markers"]
        assert [m["label"] for m in markers] == \
            ["Central Library", "South Branch"]

    def test_annotations_partition_the_tree(self, served):
        a = Client(served)
        _, html = a.get("/libraries?isbn=0131873253")
        init = init_payload(html)
        ann = {tuple(e["path"]): e["class"]
               for e in init["unit_annotations"]}
        assert ann[()] == "html"
        assert ann[("children", "_2", "then", 1, "children", "_3")] == \
            "demo.map.Markers"

    def test_state_json_is_canonical(self, served):
        a = Client(served)
        _, html = a.get("/libraries?isbn=0131873253")
        init = init_payload(html)
        assert to_canonical_json(from_py(init["state"])) == \
            canon(init["state"])

    def test_templates_are_deduped(self, served):
        a = Client(served)
        _, html = a.get("/libraries?isbn=0131873253")
        init = init_payload(html)
        markers = init["state"]["children"]["_2"]["then"][0] \
            ["children"]["_3"]["markers"]
        tids = {m["infowindow"]["template"] for m in markers}
        assert len(tids) == 1
        assert tids <= set(init["templates"])


class TestEventCycle:
    def test_save_delta_reconstructs_fresh_state(self, served):
        a = Client(served)
        _, html = a.get("/libraries?isbn=0131873253")
        init = init_payload(html)
        eid, comment_path, if_slot = find_save_event(init)

        status, msg = a.post_event(eid, 1, [
            {"path": comment_path, "value": "great read"}])
        assert status == 200
        assert msg["new_state_version"] == 2
        assert {o["op"] for o in msg["delta"]["ops"]} == \
            {"delete", "insert"}

        root = apply_delta(from_py(init["state"]),
                           delta_from_py(msg["delta"]))
        _, html3 = a.get("/libraries?isbn=0131873253")
        init3 = init_payload(html3)
        assert init3["state_version"] == 3
        assert to_canonical_json(root) == canon(init3["state"])

        m1 = init3["state"]["children"]["_2"]["then"][0]["children"] \
            ["_3"]["markers"][0]
        else_inst = m1["infowindow"]["children"][if_slot]["else"][0]
        assert any("great read" in str(v)
                   for v in else_inst["children"].values())

    def test_stale_version_409(self, served):
        a = Client(served)
        _, html = a.get("/libraries?isbn=0131873253")
        eid, _, _ = find_save_event(init_payload(html))
        status, _ = a.post_event(eid, 99)
        assert status == 409

    def test_write_to_derived_400(self, served):
        a = Client(served)
        _, html = a.get("/libraries?isbn=0131873253")
        eid, _, _ = find_save_event(init_payload(html))
        status, _ = a.post_event(eid, 1, [
            {"path": ["children", "_1"], "value": "nope"}])
        assert status == 400

    def test_unknown_event_404(self, served):
        a = Client(served)
        a.get("/libraries?isbn=0131873253")
        status, _ = a.post_event("e9@children/_1", 1, [])
        assert status == 404

    def test_no_session_404(self, served):
        a = Client(served)
        status, _ = a.post_event("e1@children/_1", 1, [])
        assert status == 404


class TestRouting:
    def test_unknown_path_404(self, served):
        a = Client(served)
        status, _ = a.get("/no-such-thing")
        assert status == 404

    def test_index_page(self, served):
        a = Client(served)
        status, html = a.get("/")
        assert status == 200
        init = init_payload(html)
        joined = "".join(init["templates"].values())
        assert "Library availability" in joined
        assert init["event_table"] == {}

    def test_page_reachable_by_name(self, served):
        a = Client(served)
        status, html = a.get("/map?isbn=1558601902")
        assert status == 200
        assert init_payload(html)["page"] == "map"

    def test_get_discards_prior_page_state(self, served):
        a = Client(served)
        _, h1 = a.get("/libraries?isbn=0131873253")
        v1 = init_payload(h1)["state_version"]
        _, h2 = a.get("/libraries?isbn=1558601902")
        init2 = init_payload(h2)
        assert init2["state_version"] == v1 + 1
        markers = init2["state"]["children"]["_2"]["then"][0] \
            ["children"]["_3"]["markers"]
        assert [m["label"] for m in markers] == ["East Branch"]


class TestSessions:
    def test_isolation(self, served):
        a, b = Client(served), Client(served)
        _, ha = a.get("/libraries?isbn=0131873253")
        init_a = init_payload(ha)
        eid, comment_path, if_slot = find_save_event(init_a)
        a.post_event(eid, 1, [{"path": comment_path, "value": "mine"}])

        _, hb = b.get("/libraries?isbn=0131873253")
        init_b = init_payload(hb)
        assert init_b["state_version"] == 1
        mb = init_b["state"]["children"]["_2"]["then"][0]["children"] \
            ["_3"]["markers"][0]
        assert len(mb["infowindow"]["children"][if_slot]["then"]) == 1

    def test_idle_sessions_expire(self):
        app = load_application(str(DEMO_DIR))
        store = SessionStore(app.registry, idle_minutes=0.0)
        s = store.create()
        time.sleep(0.01)
        assert store.get(s.token) is None

    def test_sessions_survive_within_idle_window(self):
        app = load_application(str(DEMO_DIR))
        store = SessionStore(app.registry, idle_minutes=10.0)
        s = store.create()
        assert store.get(s.token) is s


class TestNavigationEvents:
    def build(self, tmp_path):
        (tmp_path / "app.json").write_text(json.dumps({
            "index": "home",
            "sources": [
                {"name": "db1", "kind": "sql", "options": {"init_sql":
                    "create table books (book_id integer primary key, "
                    "title text, isbn text);"
                    "insert into books values (7, 'DBMS', '0131873253');"}},
                {"name": "session", "kind": "memory",
                 "options": {"schema": {"notes": ["x"]}},
                 "lifetime": "session"},
            ]}), encoding="utf-8")
        (tmp_path / "pages").mkdir()
        (tmp_path / "pages" / "home.html").write_text(
            "<% with b as (element(select k.isbn as isbn from db1.books k "
            "where k.book_id = 7)) %>"
            "<a <% event click get /go with isbn = b %>>open</a>",
            encoding="utf-8")
        (tmp_path / "actions").mkdir()
        (tmp_path / "actions" / "a.sql").write_text(
            "define action /go as begin next_page('home'); end;",
            encoding="utf-8")
        return AppServer(load_application(str(tmp_path)))

    def test_navigation_event_returns_url(self, tmp_path):
        core = self.build(tmp_path)
        msg, session = core.handle_get("/")
        assert isinstance(msg, InitPage)
        eid = next(iter(session.state.events))
        out = core.handle_event(session.token, eid, 1, [])
        assert isinstance(out, NavigateMsg)
        assert out.url == "/go?isbn=0131873253"
        assert out.to_wire() == {"navigate": "/go?isbn=0131873253"}

    def test_navigation_discards_page_state(self, tmp_path):
        core = self.build(tmp_path)
        _, session = core.handle_get("/")
        eid = next(iter(session.state.events))
        core.handle_event(session.token, eid, 1, [])
        assert session.state is None and session.page is None

    def test_follow_up_get_runs_routed_action(self, tmp_path):
        core = self.build(tmp_path)
        msg, session = core.handle_get("/")
        eid = next(iter(session.state.events))
        nav = core.handle_event(session.token, eid, 1, [])
        msg2, _ = core.handle_get(nav.url, session.token)
        assert isinstance(msg2, InitPage) and msg2.page == "home"
        assert msg2.state_version == 2


class TestAjaxNavigation:
    def test_ajax_action_naming_other_page_navigates(self, tmp_path):
        (tmp_path / "app.json").write_text(json.dumps({
            "index": "one",
            "sources": [{"name": "session", "kind": "memory",
                         "options": {}, "lifetime": "session"}]}),
            encoding="utf-8")
        (tmp_path / "pages").mkdir()
        (tmp_path / "pages" / "one.html").write_text(
            "<button <% event click ajax /jump %>>go</button>",
            encoding="utf-8")
        (tmp_path / "pages" / "two.html").write_text("<p>landed</p>",
                                                     encoding="utf-8")
        (tmp_path / "actions").mkdir()
        (tmp_path / "actions" / "a.sql").write_text(
            "define action /jump as begin next_page('two'); end;",
            encoding="utf-8")
        core = AppServer(load_application(str(tmp_path)))
        _, session = core.handle_get("/")
        eid = next(iter(session.state.events))
        out = core.handle_event(session.token, eid, 1, [])
        assert isinstance(out, NavigateMsg) and out.url == "/two"
        assert session.state is None

    def test_failed_action_500(self, tmp_path):
        (tmp_path / "app.json").write_text(json.dumps({
            "index": "one",
            "sources": [{"name": "session", "kind": "memory",
                         "options": {}, "lifetime": "session"}]}),
            encoding="utf-8")
        (tmp_path / "pages").mkdir()
        (tmp_path / "pages" / "one.html").write_text(
            "<button <% event click ajax /die %>>go</button>",
            encoding="utf-8")
        (tmp_path / "actions").mkdir()
        (tmp_path / "actions" / "a.sql").write_text(
            "define action /die as begin raise 'dead'; end;",
            encoding="utf-8")
        core = AppServer(load_application(str(tmp_path)))
        _, session = core.handle_get("/")
        eid = next(iter(session.state.events))
        out = core.handle_event(session.token, eid, 1, [])
        assert isinstance(out, ErrorMsg) and out.code == 500
        assert "dead" in out.message


class TestLoadErrors:
    def write_min(self, tmp_path, page="<p>hi</p>"):
        (tmp_path / "app.json").write_text(json.dumps({
            "index": "p",
            "sources": [{"name": "session", "kind": "memory",
                         "options": {}, "lifetime": "session"}]}),
            encoding="utf-8")
        (tmp_path / "pages").mkdir()
        (tmp_path / "pages" / "p.html").write_text(page, encoding="utf-8")

    def test_missing_config(self, tmp_path):
        with pytest.raises(AppLoadError, match="app.json"):
            load_application(str(tmp_path))

    def test_config_without_sources(self, tmp_path):
        (tmp_path / "app.json").write_text("{}", encoding="utf-8")
        with pytest.raises(AppLoadError, match="no sources"):
            load_application(str(tmp_path))

    def test_missing_pages_dir(self, tmp_path):
        (tmp_path / "app.json").write_text(
            json.dumps({"sources": []}), encoding="utf-8")
        with pytest.raises(AppLoadError, match="pages"):
            load_application(str(tmp_path))

    def test_no_pages(self, tmp_path):
        (tmp_path / "app.json").write_text(
            json.dumps({"sources": []}), encoding="utf-8")
        (tmp_path / "pages").mkdir()
        with pytest.raises(AppLoadError, match="no pages"):
            load_application(str(tmp_path))

    def test_page_syntax_error_carries_position(self, tmp_path):
        self.write_min(tmp_path, page="\n<p><% bogus %></p>")
        with pytest.raises(AppLoadError, match=r"p\.html:2:4"):
            load_application(str(tmp_path))

    def test_unknown_unit_class_aborts(self, tmp_path):
        self.write_min(tmp_path,
                       page="<% unit demo.missing.Widget %>{}<% end %>")
        with pytest.raises(AppLoadError, match="demo.missing.Widget"):
            load_application(str(tmp_path))

    def test_bad_action_sql_aborts(self, tmp_path):
        self.write_min(tmp_path)
        (tmp_path / "actions").mkdir()
        (tmp_path / "actions" / "a.sql").write_text(
            "define action /x as begin delete from; end;",
            encoding="utf-8")
        with pytest.raises(AppLoadError, match=r"a\.sql"):
            load_application(str(tmp_path))

    def test_loads_demo_app(self):
        app = load_application(str(DEMO_DIR))
        assert set(app.pages) == {"index", "map"}
        assert app.config["index"] == "index"
