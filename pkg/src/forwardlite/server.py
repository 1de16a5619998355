"""HTTP front end: sessions, the wire protocol, and application loading.

A GET renders a full page: the routed action runs (if the URL names
one), the target page is evaluated fresh, and the response is an HTML
shell with the page's initial state embedded as JSON.  Everything after
that travels over POST `/__fw/event`: the client sends buffered inputs
plus the fired event id, and receives either a state delta or a
navigation order.

Page state versions count up per session.  A delta only applies on top
of the exact version it was computed against; a client that finds
itself behind refetches the page.  Sessions ride a `fw_session` cookie
and expire after a configurable idle period.
"""

from __future__ import annotations

import json
import secrets
import threading
import time
from dataclasses import dataclass, field as dc_field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path as FsPath
from typing import Optional
from urllib.parse import parse_qs, urlencode

from .actions import (
    NAVIGATION_METHODS,
    ActionTable,
    Application,
    Scheduler,
    install_program,
    invocation_for_event,
    invocation_for_url,
    run_cycle,
)
from .delta import delta_to_py
from .engine import READ_ONLY, Environment
from .errors import (
    AppLoadError,
    ForwardError,
    NoSuchAction,
    UnknownEvent,
    WriteToDerived,
)
from .ivm import keys_from_registry
from .pageruntime import (
    PageState,
    apply_user_input,
    compile_page,
    evaluate_page,
    event_descriptors,
)
from .pagespec import parse_page
from .parser import parse_program
from .planner import PlannerCatalog
from .resolver import FunctionTable
from .sources import SourceRegistry, load_registry
from .values import from_py, to_canonical_json, to_py

DEFAULT_IDLE_MINUTES = 30


# --- wire messages -----------------------------------------------------------------


@dataclass(frozen=True)
class InitPage:
    page: str
    state_json: str
    templates: dict
    unit_annotations: list
    event_table: dict
    state_version: int

    def to_wire(self) -> dict:
        return {"page": self.page, "state": json.loads(self.state_json),
                "templates": self.templates,
                "unit_annotations": self.unit_annotations,
                "event_table": self.event_table,
                "state_version": self.state_version}


@dataclass(frozen=True)
class DeltaMsg:
    delta_json: dict
    new_state_version: int

    def to_wire(self) -> dict:
        return {"delta": self.delta_json,
                "new_state_version": self.new_state_version}


@dataclass(frozen=True)
class NavigateMsg:
    url: str

    def to_wire(self) -> dict:
        return {"navigate": self.url}


@dataclass(frozen=True)
class ErrorMsg:
    code: int
    message: str

    def to_wire(self) -> dict:
        return {"error": {"code": self.code, "message": self.message}}


# --- sessions --------------------------------------------------------------------


@dataclass
class SessionRecord:
    """One browser's slice of the application."""

    token: str
    source: object  # the session memory source
    page: Optional[str] = None
    state: Optional[PageState] = None
    version: int = 0
    version_state: Optional[PageState] = None  # state at the last version bump
    page_sources: dict = dc_field(default_factory=dict)
    last_seen: float = 0.0
    lock: threading.RLock = dc_field(default_factory=threading.RLock)

    def action_sources(self) -> dict:
        return {"session": self.page_sources["session"],
                "http_headers": self.page_sources["http_headers"]}


class SessionStore:
    def __init__(self, registry: SourceRegistry, idle_minutes: float):
        self._registry = registry
        self._idle = idle_minutes * 60.0
        self._lock = threading.Lock()
        self._sessions: dict[str, SessionRecord] = {}

    def get(self, token: Optional[str]) -> Optional[SessionRecord]:
        with self._lock:
            self._purge()
            s = self._sessions.get(token) if token else None
            if s is not None:
                s.last_seen = time.monotonic()
            return s

    def create(self) -> SessionRecord:
        with self._lock:
            token = secrets.token_urlsafe(16)
            src = self._registry.make_session_source()
            s = SessionRecord(token, src, last_seen=time.monotonic())
            s.page_sources = {**self._registry.app_sources, "session": src,
                              "url": SourceRegistry.make_url_source({}),
                              "http_headers":
                                  SourceRegistry.make_headers_source({})}
            self._sessions[token] = s
            return s

    def _purge(self) -> None:
        cutoff = time.monotonic() - self._idle
        dead = [t for t, s in self._sessions.items() if s.last_seen < cutoff]
        for t in dead:
            del self._sessions[t]


# --- the server core ---------------------------------------------------------------


def _annotations_wire(state: PageState) -> list:
    return [{"path": list(p), "class": c}
            for p, c in sorted(state.annotations.items(),
                               key=lambda pc: pc[0])]


class AppServer:
    """Protocol logic, independent of the HTTP plumbing around it."""

    def __init__(self, app: Application, idle_minutes: Optional[float] = None):
        self.app = app
        if idle_minutes is None:
            idle_minutes = app.config.get("session_idle_minutes",
                                          DEFAULT_IDLE_MINUTES)
        self.sessions = SessionStore(app.registry, idle_minutes)
        self.scheduler = Scheduler()

    # -- GET: full page loads ---------------------------------------------

    def handle_get(self, url: str, token: Optional[str] = None,
                   headers: Optional[dict] = None):
        """Run the routed cycle and build a full page answer.

        Returns (message, session): an InitPage on success, an ErrorMsg
        otherwise; the session is created on first contact.  A GET is a
        full navigation, so any previous page state is discarded and the
        target page evaluates from scratch.
        """
        session = self.sessions.get(token)
        if session is None:
            session = self.sessions.create()
        path, _, query = url.partition("?")
        params = {k: v[-1] for k, v in
                  parse_qs(query, keep_blank_values=True).items()}
        is_action = True
        target = None
        try:
            self.app.actions.route(path)
        except NoSuchAction:
            is_action = False
            name = path.strip("/")
            if name in self.app.pages:
                target = name
            elif path == "/" and self.app.config.get("index") in self.app.pages:
                target = self.app.config["index"]
            else:
                return ErrorMsg(404, f"nothing is served at {path!r}"), session

        def full_cycle():
            with session.lock:
                session.page_sources["url"] = \
                    SourceRegistry.make_url_source(params)
                session.page_sources["http_headers"] = \
                    SourceRegistry.make_headers_source(headers or {})
                session.state = None
                session.version_state = None
                session.page = None
            page = target
            if is_action:
                inv = invocation_for_url(self.app, url)
                outcome = run_cycle(inv, session, self.app)
                if outcome.status == "failed":
                    return ErrorMsg(500, outcome.error)
                page = outcome.page
                if page is None or page not in self.app.pages:
                    return ErrorMsg(500, f"action {path!r} selected no page")
            return self._render_full(session, page)

        return self.scheduler.run(session.token, "get", full_cycle), session

    def _render_full(self, session: SessionRecord, target: str) -> InitPage:
        cp = self.app.pages[target]
        with session.lock:
            env = Environment(session.page_sources, self.app.catalog,
                              functions=self.app.functions, mode=READ_ONLY)
            state = evaluate_page(cp, env, keys=self.app.keys)
            session.page = target
            session.state = state
            session.version += 1
            session.version_state = state
            return InitPage(target, state_json=self._state_json(state),
                            templates=dict(cp.templates),
                            unit_annotations=_annotations_wire(state),
                            event_table=event_descriptors(cp),
                            state_version=session.version)

    @staticmethod
    def _state_json(state: PageState) -> str:
        return to_canonical_json(state.root)

    # -- POST /__fw/event: inputs plus one event ----------------------------

    def handle_event(self, token: Optional[str], event_id: str,
                     state_version: int, inputs: list):
        session = self.sessions.get(token)
        if session is None:
            return ErrorMsg(404, "unknown or expired session")
        with session.lock:
            if session.state is None or state_version != session.version:
                return ErrorMsg(409, "page state has moved on; reload")
            try:
                for item in inputs:
                    session.state = apply_user_input(
                        session.state, tuple(item["path"]),
                        from_py(item["value"]))
            except WriteToDerived as e:
                return ErrorMsg(400, str(e))
            except ForwardError as e:
                return ErrorMsg(400, str(e))
            try:
                inv = invocation_for_event(self.app, session.state, event_id,
                                           session.page_sources)
            except (UnknownEvent, NoSuchAction) as e:
                return ErrorMsg(404, str(e))
            if inv.method in NAVIGATION_METHODS:
                url = inv.url
                extra = {n: _scalar_text(e.value)
                         for n, e in inv.entries.items()
                         if n in {a for a, _ in
                                  session.state.events[event_id].args}}
                if extra:
                    sep = "&" if "?" in url else "?"
                    url = url + sep + urlencode(extra)
                session.state = None
                session.version_state = None
                session.page = None
                return NavigateMsg(url)
        outcome = self.scheduler.run(
            session.token, inv.method,
            lambda: run_cycle(inv, session, self.app))
        if outcome.status == "failed":
            return ErrorMsg(500, outcome.error)
        if outcome.navigated:
            return NavigateMsg("/" + outcome.page)
        return DeltaMsg(delta_to_py(outcome.delta), outcome.version)


def _scalar_text(v) -> str:
    obj = to_py(v)
    if obj is None:
        return ""
    if isinstance(obj, bool):
        return "true" if obj else "false"
    return str(obj)


# --- application loading --------------------------------------------------------------


def load_application(app_dir: str, config_path: Optional[str] = None) -> Application:
    """Compile a whole application directory, failing fast and precisely.

    Layout: `app.json` (sources and settings), `pages/*.html`,
    `actions/*.sql`.  Any compile error aborts with its file:line:col.
    """
    root = FsPath(app_dir)
    cfg_file = FsPath(config_path) if config_path else root / "app.json"
    if not cfg_file.is_file():
        raise AppLoadError(f"missing application config {cfg_file}")
    try:
        config = json.loads(cfg_file.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise AppLoadError(f"cannot read {cfg_file}: {e}") from None
    if "sources" not in config:
        raise AppLoadError(f"{cfg_file} declares no sources")
    try:
        registry = load_registry(config)
    except ForwardError as e:
        raise AppLoadError(str(e)) from None
    catalog = PlannerCatalog.from_registry(registry)

    functions: dict = {}
    ftable = FunctionTable()
    actions = ActionTable()
    action_names = set(registry.app_sources) | {"session", "url",
                                                "http_headers", "request"}
    for f in sorted((root / "actions").glob("*.sql")) if (root / "actions").is_dir() else []:
        try:
            decls = parse_program(f.read_text(encoding="utf-8"), str(f))
            install_program(decls, action_names, functions, ftable, actions)
        except ForwardError as e:
            raise AppLoadError(str(e)) from None

    pages: dict = {}
    page_names = set(registry.app_sources) | {"session", "url", "http_headers"}
    pages_dir = root / "pages"
    if not pages_dir.is_dir():
        raise AppLoadError(f"missing pages directory {pages_dir}")
    for f in sorted(pages_dir.glob("*.html")):
        try:
            pf = parse_page(f.read_text(encoding="utf-8"), f.stem,
                            filename=str(f))
            pages[f.stem] = compile_page(pf, page_names, functions=ftable,
                                         catalog=catalog)
        except ForwardError as e:
            raise AppLoadError(str(e)) from None
    if not pages:
        raise AppLoadError(f"no pages found under {pages_dir}")

    return Application(registry=registry, catalog=catalog,
                       functions=functions, function_table=ftable,
                       actions=actions, pages=pages,
                       keys=keys_from_registry(registry), config=config,
                       base_dir=str(root))


# --- plain HTTP on top -------------------------------------------------------------


_SHELL = """<!doctype html>
<html>
<head>
<meta charset="utf-8">
<title>%(title)s</title>
</head>
<body>
<div id="fw-root"></div>
<script type="application/x-fw-init">%(init)s</script>
%(client)s
</body>
</html>
"""


def _script_safe(payload: dict) -> str:
    # keep the embedded JSON from terminating its script element early
    return json.dumps(payload, ensure_ascii=False,
                      separators=(",", ":")).replace("<", "\\u003c")


class _Handler(BaseHTTPRequestHandler):
    server_version = "forwardlite"
    core: AppServer = None  # type: ignore[assignment]
    client_js: Optional[str] = None

    def log_message(self, fmt, *args):  # quiet by default
        pass

    def _token(self) -> Optional[str]:
        cookie = self.headers.get("Cookie", "")
        for part in cookie.split(";"):
            name, _, value = part.strip().partition("=")
            if name == "fw_session" and value:
                return value
        return None

    def _send(self, status: int, body: bytes, ctype: str,
              session=None) -> None:
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        if session is not None and session.token != self._token():
            self.send_header("Set-Cookie",
                             f"fw_session={session.token}; Path=/; HttpOnly")
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path == "/__fw/client.js":
            if self.client_js is None:
                self._send(404, b"no client bundle", "text/plain")
            else:
                self._send(200, self.client_js.encode("utf-8"),
                           "application/javascript")
            return
        msg, session = self.core.handle_get(self.path, self._token(),
                                            dict(self.headers.items()))
        if isinstance(msg, ErrorMsg):
            self._send(msg.code, json.dumps(msg.to_wire()).encode("utf-8"),
                       "application/json", session)
            return
        if isinstance(msg, NavigateMsg):
            self.send_response(302)
            self.send_header("Location", msg.url)
            self.end_headers()
            return
        client = ('<script src="/__fw/client.js"></script>'
                  if self.client_js is not None else "")
        html = _SHELL % {"title": msg.page,
                         "init": _script_safe(msg.to_wire()),
                         "client": client}
        self._send(200, html.encode("utf-8"), "text/html; charset=utf-8",
                   session)

    def do_POST(self):
        if self.path != "/__fw/event":
            self._send(404, b"not found", "text/plain")
            return
        length = int(self.headers.get("Content-Length", "0"))
        try:
            body = json.loads(self.rfile.read(length) or b"{}")
        except json.JSONDecodeError:
            self._send(400, b'{"error":{"code":400,"message":"bad json"}}',
                       "application/json")
            return
        msg = self.core.handle_event(
            body.get("session") or self._token(),
            body.get("event_id", ""),
            body.get("state_version", -1),
            body.get("inputs", []))
        status = msg.code if isinstance(msg, ErrorMsg) else 200
        self._send(status, json.dumps(msg.to_wire(),
                                      ensure_ascii=False).encode("utf-8"),
                   "application/json")


def make_http_server(app: Application, port: int,
                     host: str = "127.0.0.1") -> ThreadingHTTPServer:
    """Bind a ready-to-run HTTP server; `serve_forever` is the caller's."""
    core = AppServer(app)
    handler = type("BoundHandler", (_Handler,), {"core": core})
    client = app.config.get("client_js")
    if client:
        p = FsPath(app.base_dir) / client
        if p.is_file():
            handler.client_js = p.read_text(encoding="utf-8")
    return ThreadingHTTPServer((host, port), handler)
