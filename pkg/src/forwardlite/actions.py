"""Action dispatch and the request/response cycle.

An event on a page names an action by URL.  Firing it freezes a request
tree (the views and inputs the event could see, plus any `with` arguments
evaluated on the spot) and runs the action body against that snapshot.
Application sources take writes immediately; writes to the request tree
stay private to the invocation and are replayed onto the page state in a
single batch when the body completes.  The current page is then
re-evaluated read-only and the difference between the old and new state
is what travels back to the client.

Concurrency is per session: `ajax` actions may overlap freely (each sees
its own request snapshot, none sees another's pending writes), while a
`sync_refresh` action waits for everything in flight and holds back new
work until it finishes.  When overlapping actions write the same slot,
the one that completes last wins; user input counts as completing the
moment it arrives.
"""

from __future__ import annotations

import dataclasses
import threading
import urllib.parse
from dataclasses import dataclass, field as dc_field
from typing import Optional

from .delta import Delta, apply_delta
from .engine import (
    READ_ONLY,
    READ_WRITE,
    Environment,
    call_function,
    evaluate_plan,
)
from .errors import (
    DuplicateAction,
    ForwardError,
    NoSuchAction,
    ReadOnlySource,
)
from .ivm import KeyRegistry
from .nodes import ActionDecl, FunctionDecl
from .pageruntime import (
    PageState,
    RequestEntry,
    build_request_view,
    evaluate_page,
    page_delta,
)
from .planner import PlannerCatalog
from .resolver import FunctionTable
from .sources import MemorySource, Source, SourceRegistry
from .values import Tuple, Value

Path = tuple

REQUEST_SOURCE = "request"

#: event methods that run in place and answer with a page delta
AJAX_METHODS = ("ajax", "sync_refresh")

#: event methods that leave the page entirely
NAVIGATION_METHODS = ("get", "post", "put", "delete")


# --- routing ------------------------------------------------------------------------


class ActionTable:
    """URL to action body, literal path matching only."""

    def __init__(self) -> None:
        self._actions: dict[str, str] = {}

    def add(self, decl: ActionDecl, functions: dict) -> str:
        """Register one declaration; returns the name of its function.

        Anonymous bodies are entered into `functions` under a name
        derived from the URL; named forms must already be present.
        """
        if decl.url in self._actions:
            raise DuplicateAction(f"action {decl.url!r} declared twice")
        if isinstance(decl.function, FunctionDecl):
            functions[decl.function.name] = decl.function
            name = decl.function.name
        else:
            name = decl.function
            if name not in functions:
                raise NoSuchAction(
                    f"action {decl.url!r} refers to unknown function {name!r}")
        self._actions[decl.url] = name
        return name

    def urls(self) -> tuple[str, ...]:
        return tuple(self._actions)

    def route(self, url: str) -> tuple[str, dict[str, str]]:
        """Split a URL into (function name, query parameters).

        The path part must match a registered action exactly; anything
        after '?' becomes the request's `url` source.
        """
        path, _, query = url.partition("?")
        name = self._actions.get(path)
        if name is None:
            raise NoSuchAction(f"no action is registered at {path!r}")
        params = {k: v[-1] for k, v in
                  urllib.parse.parse_qs(query, keep_blank_values=True).items()}
        return name, params


def install_program(decls, source_names, functions: dict,
                    function_table: FunctionTable,
                    actions: ActionTable) -> None:
    """Resolve a parsed program and enter it into the application tables.

    Signatures are registered before any body resolves, so functions may
    call each other regardless of declaration order.
    """
    from .resolver import FunctionInfo, resolve_function

    bodies = []
    for d in decls:
        fd = d.function if isinstance(d, ActionDecl) else d
        if isinstance(fd, FunctionDecl):
            function_table.add(
                FunctionInfo(fd.name, len(fd.params), fd.mutability))
            bodies.append(fd)
    resolved = {}
    for fd in bodies:
        r = resolve_function(fd, source_names, function_table)
        functions[r.name] = r
        resolved[r.name] = r
    for d in decls:
        if isinstance(d, ActionDecl):
            if isinstance(d.function, FunctionDecl):
                d = dataclasses.replace(d, function=resolved[d.function.name])
            actions.add(d, functions)


# --- the request source ---------------------------------------------------------------


class RequestSource(MemorySource):
    """The request tree one invocation reads and writes.

    Views and event arguments are read-only.  Bound inputs accept
    writes, which land here at once (the body reads its own writes
    back) but reach the real page state only on completion.
    """

    def __init__(self, root: Value, writable: frozenset):
        super().__init__(REQUEST_SOURCE, root)
        self._writable = writable

    def check_writable(self, path: Path) -> None:
        if not path:
            raise ReadOnlySource("cannot replace the request tree wholesale")
        if path[0] not in self._writable:
            raise ReadOnlySource(
                f"request.{path[0]} is read-only in this action")


# --- invocations --------------------------------------------------------------------


@dataclass(frozen=True)
class ActionInvocation:
    """Everything one action run needs, frozen at firing time."""

    url: str
    method: str
    function: str
    params: dict  # query-string parameters, become the url source
    request_root: Value
    entries: dict  # name -> RequestEntry
    page: Optional[str]  # page the event fired on, None for navigation


@dataclass
class ActionResult:
    """What the body produced, before it touches the session."""

    invocation: ActionInvocation
    status: str  # 'completed' | 'failed'
    error: Optional[str]
    next_page: Optional[str]
    effects: list

    def deferred_writes(self) -> list:
        return [e for e in self.effects if e.source == REQUEST_SOURCE]

    def uas_effects(self) -> list:
        return [e for e in self.effects if e.source != REQUEST_SOURCE]


@dataclass
class CycleOutcome:
    status: str  # 'completed' | 'failed'
    error: Optional[str]
    page: Optional[str]
    navigated: bool  # true when the client must leave the current page
    delta: Optional[Delta]
    version: int
    state: Optional[PageState]


def invocation_for_event(app, state: PageState, event_id: str,
                         page_sources: dict) -> ActionInvocation:
    """Freeze the request for a fired event.

    `with` arguments are evaluated now, under the same names the event's
    position could see, and join the request read-only.
    """
    view = build_request_view(state, event_id)
    ev = view.event
    fn, params = app.actions.route(ev.url)
    entries = dict(view.entries)
    if ev.args:
        env = Environment(page_sources, app.catalog,
                          functions=app.functions, mode=READ_ONLY)
        env.frames[0].update({n: e.value for n, e in entries.items()})
        for name, plan in ev.args:
            entries[name] = RequestEntry(name, evaluate_plan(plan, env), False)
    root = Tuple(tuple((n, e.value) for n, e in entries.items()))
    return ActionInvocation(ev.url, ev.method, fn, params, root, entries,
                            state.page)


def invocation_for_url(app, url: str) -> ActionInvocation:
    """A navigation request: no page state, an empty request tree."""
    fn, params = app.actions.route(url)
    return ActionInvocation(url, "get", fn, params, Tuple(()), {}, None)


# --- running one cycle -----------------------------------------------------------------


def execute_action(inv: ActionInvocation, app,
                   session_sources: dict) -> ActionResult:
    """Run the body against the frozen request and the live sources.

    No session lock is held here; concurrent invocations only meet at
    the application sources, never through the request tree.
    """
    sources: dict[str, Source] = dict(app.registry.app_sources)
    sources.update(session_sources)
    sources["url"] = SourceRegistry.make_url_source(inv.params)
    sources[REQUEST_SOURCE] = RequestSource(
        inv.request_root,
        frozenset(n for n, e in inv.entries.items() if e.writable))
    env = Environment(sources, app.catalog, functions=app.functions,
                      mode=READ_WRITE)
    try:
        call_function(inv.function, [], env)
    except ForwardError as e:
        return ActionResult(inv, "failed", str(e), None, env.effects)
    return ActionResult(inv, "completed", None,
                        env.control.get("next_page"), env.effects)


def _rebase_deferred(result: ActionResult) -> list:
    """Map request-tree writes onto their page-state slots.

    Writes to inputs that never got a slot on the page (a define the
    markup does not bind) have nowhere to land and are dropped.
    """
    ops = []
    for eff in result.deferred_writes():
        if eff.delta is None:
            continue
        for op in eff.delta.ops:
            entry = result.invocation.entries.get(op.path[0])
            if entry is None or entry.slot is None:
                continue
            ops.append(dataclasses.replace(
                op, path=entry.slot + tuple(op.path[1:])))
    return ops


def base_deltas_from(effects: list) -> dict:
    """Describe an action's source writes for incremental page evaluation.

    Memory writes carry their precise deltas; writes through a sql
    adapter only mark the table stale.
    """
    bd: dict = {}
    for eff in effects:
        if eff.table is not None:
            bd[(eff.source, eff.table)] = None
        elif eff.delta is not None:
            key = (eff.source,)
            prior = bd.get(key)
            ops = (prior.ops if prior is not None else ()) + eff.delta.ops
            bd[key] = Delta(ops)
    return bd


def complete_cycle(result: ActionResult, session, app) -> CycleOutcome:
    """Apply a finished body to its session: replay, re-evaluate, diff.

    Runs under the session lock, so completions (and arriving user
    input, which takes the same lock) serialize; whoever gets here last
    wins any conflicting slot.  A failed body changes nothing page-side;
    whatever it already wrote to application sources stands.
    """
    with session.lock:
        if result.status == "failed":
            return CycleOutcome("failed", result.error, session.page, False,
                                None, session.version, session.state)
        next_page = result.next_page or session.page
        if next_page != session.page:
            session.state = None
            session.version_state = None
            return CycleOutcome("completed", None, next_page, True, None,
                                session.version, None)
        ops = _rebase_deferred(result)
        if ops:
            session.state = dataclasses.replace(
                session.state,
                root=apply_delta(session.state.root, Delta(tuple(ops))))
        env = Environment(session.page_sources, app.catalog,
                          functions=app.functions, mode=READ_ONLY)
        new_state = evaluate_page(app.pages[session.page], env,
                                  prior=session.state,
                                  base_deltas=base_deltas_from(
                                      result.uas_effects()),
                                  keys=app.keys)
        assert not env.effects, "page evaluation must not write"
        base = session.version_state
        session.state = new_state
        session.version += 1
        session.version_state = new_state
        delta = page_delta(base, new_state) if base is not None else None
        return CycleOutcome("completed", None, session.page, False, delta,
                            session.version, new_state)


def run_cycle(inv: ActionInvocation, session, app) -> CycleOutcome:
    """One whole request cycle: body, replay, page, delta."""
    result = execute_action(inv, app, session.action_sources())
    return complete_cycle(result, session, app)


# --- conflict policy -------------------------------------------------------------------


def resolve_conflicts(batches: list) -> dict:
    """Merge page-state write batches deterministically.

    Each batch is (completed_at, [(path, value), ...]); later completion
    wins per path, ties by submission order.  User input is a batch that
    completed when it arrived.
    """
    merged: dict = {}
    for _, (at, writes) in sorted(enumerate(batches),
                                  key=lambda p: (p[1][0], p[0])):
        for path, value in writes:
            merged[tuple(path)] = value
    return merged


# --- scheduling ------------------------------------------------------------------------


class SessionGate:
    """Concurrency gate for one session's actions.

    `ajax` runs overlap; a draining method (`sync_refresh`, or any full
    navigation) waits until the session is quiet and keeps it quiet
    until it finishes.
    """

    def __init__(self) -> None:
        self._cond = threading.Condition()
        self._running = 0
        self._draining = False

    def begin(self, method: str) -> None:
        with self._cond:
            if method == "ajax":
                while self._draining:
                    self._cond.wait()
                self._running += 1
                return
            while self._draining:
                self._cond.wait()
            self._draining = True
            while self._running:
                self._cond.wait()
            self._running = 1

    def end(self, method: str) -> None:
        with self._cond:
            self._running -= 1
            if method != "ajax":
                self._draining = False
            self._cond.notify_all()


class Scheduler:
    """Per-session gates; sessions never wait on each other."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._gates: dict[str, SessionGate] = {}

    def gate(self, session_id: str) -> SessionGate:
        with self._lock:
            g = self._gates.get(session_id)
            if g is None:
                g = self._gates[session_id] = SessionGate()
            return g

    def run(self, session_id: str, method: str, fn):
        """Run `fn` under the session's gate and hand back its result."""
        g = self.gate(session_id)
        g.begin(method)
        try:
            return fn()
        finally:
            g.end(method)


# --- the application bundle ------------------------------------------------------------


@dataclass
class Application:
    """Everything a running app consists of, ready to serve."""

    registry: SourceRegistry
    catalog: PlannerCatalog
    functions: dict  # name -> FunctionDecl | NativeFunction
    function_table: FunctionTable
    actions: ActionTable
    pages: dict  # name -> CompiledPage
    keys: KeyRegistry = dc_field(default_factory=KeyRegistry)
    config: dict = dc_field(default_factory=dict)
    base_dir: str = "."
