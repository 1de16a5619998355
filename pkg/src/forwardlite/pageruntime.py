"""Compiling and evaluating pages against the unified application state.

compile_page resolves every directive query in its lexical scope and
flattens each markup body into a template string with numbered
placeholder slots; the dynamic content of a body lives in a `children`
tuple keyed by those slot names.  evaluate_page instantiates the compiled
page into a value, classifying every data slot as base (init/bind
storage, carried across evaluations of the same instance) or derived
(recomputed every time), and registers one event entry per instantiated
event directive.

An iteration instance in a new evaluation is matched to a prior instance
when the iterated tuples are equal after projecting away the
subquery-valued select fields, ties broken by ordinal.  Subquery-valued
fields are the per-row lookups that round-trip user input back out of
writable sources, so ignoring them keeps an instance (and its unsaved
input) alive across its own saves; a plain column change still
reinstantiates the row.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field as dc_field
from typing import Optional

from . import pagespec as ps
from .delta import Delta
from .engine import Environment, evaluate_plan, truthy3
from .errors import ForwardError, PageEvalError, SyntaxError_, UnknownEvent, WriteToDerived
from .ivm import KeyRegistry, MaterializedView, diff, maintain, materialize
from .nodes import (
    ExprQuery,
    Exists,
    InQuery,
    Node,
    OuterUnion,
    QueryNode,
    SelectBlock,
    SubQueryExpr,
    Union,
    WithQuery,
)
from .planner import PlannerCatalog, compile_query
from .resolver import FunctionTable, LocalRef, resolve_expression, resolve_query
from .values import (
    INTENTIONAL,
    NULL,
    Path,
    Table,
    Tuple,
    Value,
    canonical_key,
    from_py,
    navigate,
    set_at,
    string,
    wrap_row,
)


# --- compiled form ----------------------------------------------------------------


@dataclass
class CBody:
    template: str  # template id; the text lives in CompiledPage.templates
    ops: tuple


@dataclass
class CWith:
    view_id: int
    name: str
    plan: object
    skip: frozenset
    loc: str


@dataclass
class CDefine:
    name: str
    kind: str
    synthesized: bool
    loc: str


@dataclass
class COut:
    slot: str
    plan: object
    loc: str


@dataclass
class CBind:
    slot: str
    name: str
    init: Optional[object]
    loc: str


@dataclass
class CEvent:
    eid: str
    dom: str
    method: str
    url: str
    args: tuple  # (name, plan) pairs
    views: tuple  # visible with-view and iterator names, outermost first
    defines: tuple  # visible define names
    loc: str


@dataclass
class CFor:
    slot: str
    var: str
    plan: object
    skip: frozenset
    body: CBody
    loc: str


@dataclass
class CIf:
    slot: str
    plan: object
    then: CBody
    orelse: CBody
    loc: str


@dataclass
class CUnit:
    slot: str
    class_name: str
    body: object
    loc: str


@dataclass
class CJObj:
    fields: tuple  # (name, node) pairs


@dataclass
class CJArr:
    items: tuple


@dataclass
class CJLit:
    value: Value


@dataclass
class CJOut:
    plan: object
    loc: str


@dataclass
class CJInit:
    plan: object
    loc: str


@dataclass
class CJBind:
    name: str
    init: Optional[object]
    loc: str


@dataclass
class CJFor:
    var: str
    plan: object
    skip: frozenset
    body: object
    loc: str


@dataclass
class CJHtml:
    body: CBody
    loc: str


@dataclass
class CompiledPage:
    name: str
    body: CBody
    filename: str
    templates: dict = dc_field(default_factory=dict)  # id -> markup text


# --- compilation ----------------------------------------------------------------


class _CScope:
    """Lexical names visible at one point of the page, for resolution and
    for recording each event's request recipe."""

    def __init__(self) -> None:
        self.views: list[str] = []
        self.iters: list[str] = []
        self.defines: dict[str, CDefine] = {}
        self.define_depth: dict[str, int] = {}
        self.view_skips: dict[str, frozenset] = {}
        self.iter_depth = 0

    def copy(self) -> "_CScope":
        s = _CScope()
        s.views = list(self.views)
        s.iters = list(self.iters)
        s.defines = dict(self.defines)
        s.define_depth = dict(self.define_depth)
        s.view_skips = dict(self.view_skips)
        s.iter_depth = self.iter_depth
        return s

    def query_locals(self) -> list[str]:
        return self.views + self.iters

    def all_locals(self) -> list[str]:
        return self.views + self.iters + list(self.defines)


def _contains_subquery(e: Node) -> bool:
    if isinstance(e, (SubQueryExpr, Exists, InQuery)):
        return True
    if isinstance(e, Node) and dataclasses.is_dataclass(e):
        for f in dataclasses.fields(e):
            v = getattr(e, f.name)
            if isinstance(v, Node) and _contains_subquery(v):
                return True
            if isinstance(v, tuple):
                for x in v:
                    if isinstance(x, Node) and _contains_subquery(x):
                        return True
                    if isinstance(x, tuple) and any(
                            isinstance(y, Node) and _contains_subquery(y)
                            for y in x):
                        return True
    return False


def _skip_fields(rq: QueryNode, scope: _CScope) -> frozenset:
    """Select fields excluded from iteration identity: the subquery-valued
    ones (resolved query)."""
    if isinstance(rq, WithQuery):
        return _skip_fields(rq.body, scope)
    if isinstance(rq, (Union, OuterUnion)):
        return _skip_fields(rq.left, scope) | _skip_fields(rq.right, scope)
    if isinstance(rq, ExprQuery) and isinstance(rq.expr, LocalRef) \
            and not rq.expr.path:
        return scope.view_skips.get(rq.expr.name, frozenset())
    if isinstance(rq, SelectBlock):
        out = set()
        for item in rq.items:
            if item.expr is not None and item.alias \
                    and _contains_subquery(item.expr):
                out.add(item.alias)
        return frozenset(out)
    return frozenset()


class _Compiler:
    def __init__(self, sources, functions: Optional[FunctionTable],
                 catalog: PlannerCatalog):
        self.sources = tuple(sources)
        self.functions = functions
        self.catalog = catalog
        self.n_slots = 0
        self.n_events = 0
        self.n_views = 0
        self.templates: dict[str, str] = {}
        self.template_ids: dict[str, str] = {}

    def next_slot(self) -> str:
        self.n_slots += 1
        return f"_{self.n_slots}"

    def next_event(self) -> str:
        self.n_events += 1
        return f"e{self.n_events}"

    def query(self, q: QueryNode, scope: _CScope, loc: str,
              with_defines: bool = False):
        locals_ = scope.all_locals() if with_defines else scope.query_locals()
        try:
            rq = resolve_query(q, self.sources, locals_=locals_,
                               functions=self.functions, page_query=True)
            return compile_query(rq, self.catalog), rq
        except SyntaxError_:
            raise
        except ForwardError as e:
            raise PageEvalError(str(e), loc) from None

    def expr(self, e: Node, scope: _CScope, loc: str):
        try:
            re_ = resolve_expression(e, self.sources,
                                     locals_=scope.all_locals(),
                                     functions=self.functions,
                                     page_query=True)
            return compile_query(ExprQuery(re_), self.catalog)
        except ForwardError as err:
            raise PageEvalError(str(err), loc) from None

    # markup bodies --------------------------------------------------------

    def body(self, items: tuple, scope: _CScope) -> CBody:
        parts: list[str] = []
        ops: list = []
        bound: set[int] = set()
        self._items(items, scope, parts, ops, bound)
        return CBody(self._template("".join(parts)), tuple(ops))

    def _template(self, text: str) -> str:
        tid = self.template_ids.get(text)
        if tid is None:
            tid = f"t{len(self.templates) + 1}"
            self.template_ids[text] = tid
            self.templates[tid] = text
        return tid

    def _items(self, items: tuple, scope: _CScope, parts: list, ops: list,
               bound: set) -> None:
        for it in items:
            if isinstance(it, ps.Text):
                parts.append(it.text)
            elif isinstance(it, ps.With):
                plan, rq = self.query(it.query, scope, it.loc)
                self.n_views += 1
                ops.append(CWith(self.n_views, it.name, plan,
                                 _skip_fields(rq, scope), it.loc))
                scope.views.append(it.name)
                scope.view_skips[it.name] = _skip_fields(rq, scope)
                self._items(it.body, scope, parts, ops, bound)
            elif isinstance(it, ps.Define):
                op = CDefine(it.name, it.kind, it.synthesized, it.loc)
                ops.append(op)
                scope.defines[it.name] = op
                scope.define_depth[it.name] = scope.iter_depth
                self._items(it.body, scope, parts, ops, bound)
            elif isinstance(it, ps.Output):
                slot = self.next_slot()
                parts.append(f'<placeholder id="{slot}" />')
                plan, _ = self.query(it.query, scope, it.loc)
                ops.append(COut(slot, plan, it.loc))
            elif isinstance(it, ps.Bind):
                ops.append(self._bind(it, scope, parts, bound))
            elif isinstance(it, ps.Event):
                ops.append(self._event(it, scope, parts))
            elif isinstance(it, ps.For):
                slot = self.next_slot()
                parts.append(f'<placeholder id="{slot}" />')
                plan, rq = self.query(it.query, scope, it.loc)
                sub = scope.copy()
                sub.iters.append(it.var)
                sub.iter_depth += 1
                ops.append(CFor(slot, it.var, plan, _skip_fields(rq, scope),
                                self.body(it.body, sub), it.loc))
            elif isinstance(it, ps.If):
                slot = self.next_slot()
                parts.append(f'<placeholder id="{slot}" />')
                plan, _ = self.query(it.cond, scope, it.loc)
                ops.append(CIf(slot, plan,
                               self.body(it.then, scope.copy()),
                               self.body(it.orelse, scope.copy()), it.loc))
            elif isinstance(it, ps.Unit):
                slot = self.next_slot()
                parts.append(f'<placeholder id="{slot}" />')
                node = self.json(it.body, scope.copy(), bound)
                ops.append(CUnit(slot, it.class_name, node, it.loc))
            else:
                raise PageEvalError(f"unsupported item {type(it).__name__}",
                                    getattr(it, "loc", "?"))

    def _bind(self, it, scope: _CScope, parts: Optional[list],
              bound: set) -> CBind:
        slot = self.next_slot()
        if parts is not None:
            parts.append(f' data-fw-bind="{slot}"')
        d = scope.defines.get(it.name)
        created = None
        if d is None:
            # a bind with no matching define declares one on the spot
            d = created = CDefine(it.name, "string", True, it.loc)
            scope.defines[it.name] = d
            scope.define_depth[it.name] = scope.iter_depth
        elif scope.define_depth[it.name] != scope.iter_depth:
            raise PageEvalError(
                f"bind {it.name!r} crosses an iteration boundary; declare "
                "the define inside the same for body", it.loc)
        if id(d) in bound:
            raise PageEvalError(
                f"define {it.name!r} is already bound in this body", it.loc)
        bound.add(id(d))
        init = None
        if it.init is not None:
            init, _ = self.query(it.init, scope, it.loc)
        op = CBind(slot, it.name, init, it.loc)
        if created is not None:
            return _CBindWithDefine(op, created)
        return op

    def _event(self, it, scope: _CScope, parts: Optional[list]) -> CEvent:
        eid = self.next_event()
        if parts is not None:
            parts.append(f' data-fw-event="{eid}"')
        args = tuple((n, self.expr(e, scope, it.loc)) for n, e in it.args)
        return CEvent(eid, it.dom, it.method, it.url, args,
                      tuple(scope.views + scope.iters),
                      tuple(scope.defines), it.loc)

    # unit bodies ------------------------------------------------------------

    def json(self, node, scope: _CScope, bound: set):
        if isinstance(node, ps.JObject):
            return CJObj(tuple((n, self.json(v, scope, bound))
                               for n, v in node.fields))
        if isinstance(node, ps.JArray):
            return CJArr(tuple(self.json(v, scope, bound)
                               for v in node.items))
        if isinstance(node, ps.JLiteral):
            return CJLit(from_py(node.value))
        if isinstance(node, ps.JOutput):
            plan, _ = self.query(node.query, scope, node.loc)
            return CJOut(plan, node.loc)
        if isinstance(node, ps.JInit):
            plan, _ = self.query(node.query, scope, node.loc)
            return CJInit(plan, node.loc)
        if isinstance(node, ps.JBind):
            b = self._bind(ps.Bind(node.name, node.init, node.loc), scope,
                           None, bound)
            if isinstance(b, _CBindWithDefine):
                return CJBindDecl(CJBind(b.bind.name, b.bind.init, b.bind.loc),
                                  b.define)
            return CJBind(b.name, b.init, b.loc)
        if isinstance(node, ps.JFor):
            plan, rq = self.query(node.query, scope, node.loc)
            sub = scope.copy()
            sub.iters.append(node.var)
            sub.iter_depth += 1
            return CJFor(node.var, plan, _skip_fields(rq, scope),
                         self.json(node.body, sub, set()), node.loc)
        if isinstance(node, ps.JHtml):
            return CJHtml(self.body(node.body, scope.copy()), node.loc)
        raise PageEvalError(f"unsupported unit node {type(node).__name__}",
                            getattr(node, "loc", "?"))


@dataclass
class _CBindWithDefine:
    """A bind that synthesized its own define; evaluation runs the define
    declaration first, then the bind."""

    bind: CBind
    define: CDefine


@dataclass
class CJBindDecl:
    bind: "CJBind"
    define: CDefine


def compile_page(pf: ps.PageFile, sources,
                 functions: Optional[FunctionTable] = None,
                 catalog: Optional[PlannerCatalog] = None) -> CompiledPage:
    """Resolve and plan every directive of a parsed page."""
    c = _Compiler(sources, functions, catalog or PlannerCatalog({}))
    body = c.body(pf.body, _CScope())
    return CompiledPage(pf.name, body, pf.filename, c.templates)


def event_descriptors(cp: CompiledPage) -> dict:
    """Static event info per id: what fires it, how, and at which URL."""
    out: dict = {}

    def walk(node) -> None:
        if isinstance(node, CBody):
            for op in node.ops:
                walk(op)
        elif isinstance(node, CEvent):
            out[node.eid] = {"dom": node.dom, "method": node.method,
                             "url": node.url}
        elif isinstance(node, CFor):
            walk(node.body)
        elif isinstance(node, CIf):
            walk(node.then)
            walk(node.orelse)
        elif isinstance(node, CUnit):
            walk(node.body)
        elif isinstance(node, CJObj):
            for _, item in node.fields:
                walk(item)
        elif isinstance(node, CJArr):
            for item in node.items:
                walk(item)
        elif isinstance(node, CJFor):
            walk(node.body)
        elif isinstance(node, CJHtml):
            walk(node.body)

    walk(cp.body)
    return out


# --- page state ----------------------------------------------------------------


@dataclass(frozen=True)
class EventInstance:
    qualified: str
    eid: str
    dom: str
    method: str
    url: str
    args: tuple  # (name, plan) pairs, evaluated when the event fires
    views: tuple  # (name, Value) frozen at evaluation
    defines: tuple  # (name, kind, slot path or None)
    loc: str


@dataclass
class PageState:
    page: str
    root: Value
    classification: dict  # slot path -> 'base' | 'derived'
    annotations: dict  # subtree path -> unit class name
    events: dict  # qualified event id -> EventInstance
    aux: dict  # instance-matching bookkeeping, mirrors the value tree
    mviews: dict = dc_field(default_factory=dict)


def _pstr(path: Path) -> str:
    return "/".join(str(s) for s in path)


# --- evaluation ----------------------------------------------------------------


class _Eval:
    def __init__(self, cp: CompiledPage, env: Environment,
                 prior: Optional[PageState], base_deltas: Optional[dict],
                 keys: Optional[KeyRegistry]):
        self.cp = cp
        self.env = env
        self.prior = prior if prior is not None and prior.page == cp.name \
            else None
        self.base_deltas = base_deltas
        self.keys = keys
        self.cls: dict = {}
        self.ann: dict = {(): "html"}
        self.events: dict = {}
        self.mviews: dict = {}
        self.local_deltas: dict = {}
        self.defines: list[dict] = [{}]

    def run(self) -> PageState:
        prior_root = self.prior.root if self.prior else None
        prior_aux = self.prior.aux if self.prior else None
        root, aux = self.instance(self.cp.body, (), prior_root, prior_aux)
        return PageState(self.cp.name, root, self.cls, self.ann, self.events,
                         aux, self.mviews)

    # helpers ---------------------------------------------------------------

    def eval(self, plan, loc: str) -> Value:
        try:
            return evaluate_plan(plan, self.env)
        except ForwardError as e:
            raise PageEvalError(str(e), loc) from None

    def lookup(self, name: str) -> Value:
        for fr in reversed(self.env.frames):
            if name in fr:
                return fr[name]
        return NULL

    def find_define(self, name: str):
        for fr in reversed(self.defines):
            if name in fr:
                return fr[name]
        return None

    def _bind_define(self, name: str, slot_path: Path, loc: str) -> None:
        entry = self.find_define(name)
        if entry is None:
            return
        if entry[1] is not None:
            raise PageEvalError(
                f"define {name!r} is bound by two instantiated inputs", loc)
        entry[1] = slot_path

    # instances ---------------------------------------------------------------

    def instance(self, cbody: CBody, path: Path, prior_inst: Optional[Value],
                 prior_aux: Optional[dict]) -> tuple[Tuple, dict]:
        """Instantiate one markup body at ``path``; returns the
        {template, children} tuple and its matching bookkeeping."""
        frame: dict = {}
        self.env.frames.append(frame)
        self.defines.append({})
        prior_children = None
        if isinstance(prior_inst, Tuple):
            prior_children = prior_inst.get("children")
        prior_aux = prior_aux if isinstance(prior_aux, dict) else {}
        slots: list = []
        aux: dict = {}
        try:
            for op in cbody.ops:
                self._op(op, path, prior_children, prior_aux, slots, aux)
        finally:
            self.env.frames.pop()
            self.defines.pop()
        inst = Tuple((("template", string(cbody.template)),
                      ("children", Tuple(tuple(slots)))))
        return inst, aux

    def _prior_slot(self, prior_children: Optional[Value], slot: str):
        if isinstance(prior_children, Tuple):
            return prior_children.get(slot)
        return None

    def _op(self, op, path: Path, prior_children, prior_aux: dict,
            slots: list, aux: dict) -> None:
        if isinstance(op, _CBindWithDefine):
            self._op(op.define, path, prior_children, prior_aux, slots, aux)
            self._op(op.bind, path, prior_children, prior_aux, slots, aux)
            return
        if isinstance(op, CWith):
            value = self._view(op, path)
            self.env.frames[-1][op.name] = value
        elif isinstance(op, CDefine):
            self.defines[-1][op.name] = [op.kind, None]
        elif isinstance(op, COut):
            v = self.eval(op.plan, op.loc)
            slots.append((op.slot, v))
            self.cls[path + ("children", op.slot)] = "derived"
        elif isinstance(op, CBind):
            slot_path = path + ("children", op.slot)
            prior_v = self._prior_slot(prior_children, op.slot)
            if prior_v is not None:
                v = prior_v
            elif op.init is not None:
                v = self.eval(op.init, op.loc)
            else:
                v = NULL
            slots.append((op.slot, v))
            self.cls[slot_path] = "base"
            self._bind_define(op.name, slot_path, op.loc)
        elif isinstance(op, CEvent):
            self._register_event(op, path)
        elif isinstance(op, CFor):
            v, a = self._for(op, path + ("children", op.slot),
                             self._prior_slot(prior_children, op.slot),
                             prior_aux.get(op.slot))
            slots.append((op.slot, v))
            aux[op.slot] = a
            self.cls[path + ("children", op.slot)] = "derived"
        elif isinstance(op, CIf):
            v, a = self._if(op, path + ("children", op.slot),
                            self._prior_slot(prior_children, op.slot),
                            prior_aux.get(op.slot))
            slots.append((op.slot, v))
            aux[op.slot] = a
            self.cls[path + ("children", op.slot)] = "derived"
        elif isinstance(op, CUnit):
            slot_path = path + ("children", op.slot)
            v, a = self.json(op.body, slot_path,
                             self._prior_slot(prior_children, op.slot),
                             prior_aux.get(op.slot))
            slots.append((op.slot, v))
            aux[op.slot] = a
            self.ann[slot_path] = op.class_name
        else:
            raise PageEvalError(f"unsupported op {type(op).__name__}", "?")

    def _register_event(self, op: CEvent, path: Path) -> None:
        qualified = f"{op.eid}@{_pstr(path)}"
        views = tuple((n, self.lookup(n)) for n in op.views)
        defines = []
        for n in op.defines:
            entry = self.find_define(n)
            if entry is not None:
                defines.append((n, entry[0], entry[1]))
        self.events[qualified] = EventInstance(
            qualified, op.eid, op.dom, op.method, op.url, op.args, views,
            tuple(defines), op.loc)

    def _view(self, op: CWith, path: Path) -> Value:
        """A with-view; page-level views are maintained incrementally
        across evaluations when the caller supplies base deltas."""
        if path != ():
            return self.eval(op.plan, op.loc)
        mv: Optional[MaterializedView] = None
        if self.prior is not None and self.base_deltas is not None:
            mv = self.prior.mviews.get(op.view_id)
        try:
            if mv is not None:
                bd = dict(self.base_deltas)
                for name, d in self.local_deltas.items():
                    bd[("~local", name)] = d
                mv.env = self.env
                m = maintain(mv, bd)
                if m.delta.ops or m.stale:
                    self.local_deltas[op.name] = None if m.stale else m.delta
            else:
                mv = materialize(op.plan, self.env, keys=self.keys)
                self.local_deltas[op.name] = None
        except ForwardError as e:
            raise PageEvalError(str(e), op.loc) from None
        self.mviews[op.view_id] = mv
        return mv.state

    def _iter_rows(self, op, loc: str) -> Table:
        v = self.eval(op.plan, loc)
        if not isinstance(v, Table):
            raise PageEvalError(
                f"for {op.var!r} expects a table, got {type(v).__name__}", loc)
        return v

    def _ident(self, row: Value, skip: frozenset):
        if isinstance(row, Tuple) and skip:
            row = Tuple(tuple((n, v) for n, v in row.fields if n not in skip))
        return canonical_key(row)

    def _match(self, keys: list, prior_keys: list) -> list:
        """For each new key, the index of the first unclaimed prior
        instance with the same identity, or None."""
        taken = [False] * len(prior_keys)
        out = []
        for k in keys:
            hit = None
            for j, pk in enumerate(prior_keys):
                if not taken[j] and pk == k:
                    hit = j
                    taken[j] = True
                    break
            out.append(hit)
        return out

    def _for(self, op: CFor, slot_path: Path, prior_v, prior_aux):
        rows = self._iter_rows(op, op.loc).rows
        keys = [self._ident(r, op.skip) for r in rows]
        prior_keys = prior_aux["keys"] if isinstance(prior_aux, dict) else []
        prior_rows_aux = prior_aux["rows"] if isinstance(prior_aux, dict) else []
        prior_insts = prior_v.rows if isinstance(prior_v, Table) else ()
        matches = self._match(keys, prior_keys)
        insts = []
        rows_aux = []
        for i, row in enumerate(rows):
            j = matches[i]
            p_inst = prior_insts[j] if j is not None and j < len(prior_insts) \
                else None
            p_aux = prior_rows_aux[j] if j is not None \
                and j < len(prior_rows_aux) else None
            self.env.frames.append({op.var: row})
            try:
                inst, a = self.instance(op.body, slot_path + (i + 1,), p_inst,
                                        p_aux)
            finally:
                self.env.frames.pop()
            insts.append(inst)
            rows_aux.append(a)
        return (Table(tuple(insts), INTENTIONAL),
                {"keys": keys, "rows": rows_aux})

    def _if(self, op: CIf, slot_path: Path, prior_v, prior_aux):
        cond = truthy3(self.eval(op.plan, op.loc))
        branch = "then" if cond is True else "else"
        cbody = op.then if branch == "then" else op.orelse
        p_inst = None
        p_aux = None
        if isinstance(prior_aux, dict) and prior_aux.get("branch") == branch:
            p_aux = prior_aux.get("aux")
            if isinstance(prior_v, Tuple):
                t = prior_v.get(branch)
                if isinstance(t, Table) and t.rows:
                    p_inst = t.rows[0]
        inst, a = self.instance(cbody, slot_path + (branch, 1), p_inst, p_aux)
        then_t = Table((inst,) if branch == "then" else (), INTENTIONAL)
        else_t = Table((inst,) if branch == "else" else (), INTENTIONAL)
        v = Tuple((("then", then_t), ("else", else_t)))
        return v, {"branch": branch, "aux": a}

    # unit bodies ------------------------------------------------------------

    def json(self, node, path: Path, prior_v, prior_aux):
        if isinstance(node, CJObj):
            fields = []
            aux: dict = {}
            for name, sub in node.fields:
                pv = prior_v.get(name) if isinstance(prior_v, Tuple) else None
                pa = prior_aux.get(name) if isinstance(prior_aux, dict) \
                    else None
                v, a = self.json(sub, path + (name,), pv, pa)
                fields.append((name, v))
                aux[name] = a
            return Tuple(tuple(fields)), aux
        if isinstance(node, CJArr):
            return self._jarr(node, path, prior_v, prior_aux)
        if isinstance(node, CJLit):
            return node.value, None
        if isinstance(node, CJOut):
            v = self.eval(node.plan, node.loc)
            self.cls[path] = "derived"
            return v, None
        if isinstance(node, CJBindDecl):
            self.defines[-1][node.define.name] = [node.define.kind, None]
            node = node.bind
        if isinstance(node, (CJInit, CJBind)):
            init_plan = node.plan if isinstance(node, CJInit) else node.init
            if prior_v is not None:
                v = prior_v
            elif init_plan is not None:
                v = self.eval(init_plan, node.loc)
            else:
                v = NULL
            self.cls[path] = "base"
            if isinstance(node, CJBind):
                self._bind_define(node.name, path, node.loc)
            return v, None
        if isinstance(node, CJHtml):
            inst, a = self.instance(node.body, path, prior_v, prior_aux)
            self.ann[path] = "html"
            return inst, a
        if isinstance(node, CJFor):
            raise PageEvalError("for outside an array", node.loc)
        raise PageEvalError(f"unsupported unit node {type(node).__name__}",
                            "?")

    def _jarr(self, node: CJArr, path: Path, prior_v, prior_aux):
        prior_keys = prior_aux["keys"] if isinstance(prior_aux, dict) else []
        prior_items_aux = prior_aux["items"] if isinstance(prior_aux, dict) \
            else []
        prior_rows = prior_v.rows if isinstance(prior_v, Table) else ()

        entries = []  # (key, eval thunk inputs)
        for seg, item in enumerate(node.items):
            if isinstance(item, CJFor):
                rows = self._iter_rows(item, item.loc).rows
                for row in rows:
                    entries.append(((seg, self._ident(row, item.skip)),
                                    item, row))
            else:
                entries.append(((seg, "static"), item, None))

        matches = self._match([k for k, _, _ in entries], prior_keys)
        out_rows = []
        items_aux = []
        for i, (key, item, row) in enumerate(entries):
            j = matches[i]
            pv = prior_rows[j] if j is not None and j < len(prior_rows) \
                else None
            pa = prior_items_aux[j] if j is not None \
                and j < len(prior_items_aux) else None
            if isinstance(item, CJFor):
                self.env.frames.append({item.var: row})
                try:
                    v, a = self.json(item.body, path + (i + 1,), pv, pa)
                finally:
                    self.env.frames.pop()
            else:
                v, a = self.json(item, path + (i + 1,), pv, pa)
            out_rows.append(v if isinstance(v, Tuple) else wrap_row(v))
            items_aux.append(a)
        return (Table(tuple(out_rows), INTENTIONAL),
                {"keys": [k for k, _, _ in entries], "items": items_aux})


def evaluate_page(cp: CompiledPage, env: Environment,
                  prior: Optional[PageState] = None,
                  base_deltas: Optional[dict] = None,
                  keys: Optional[KeyRegistry] = None) -> PageState:
    """Instantiate a compiled page against the current state.

    With a prior state of the same page, base slots of matched instances
    carry their values over; page-level views maintain incrementally when
    ``base_deltas`` describes what changed underneath (keys as in
    ivm.maintain).
    """
    return _Eval(cp, env, prior, base_deltas, keys).run()


# --- the three serving operations ------------------------------------------------


def page_delta(old: PageState, new: PageState) -> Delta:
    """What changed between two evaluations of the same page."""
    return diff(old.root, new.root)


@dataclass(frozen=True)
class RequestEntry:
    name: str
    value: Value
    writable: bool
    slot: Optional[Path] = None  # page-state path backing a writable entry
    kind: Optional[str] = None


@dataclass
class RequestView:
    event: EventInstance
    entries: dict


def build_request_view(state: PageState, event_id: str) -> RequestView:
    """Freeze what the fired event's lexical position could see.

    Views and iterators are the values the user was shown, read-only even
    if the underlying data has moved on; defines read the current bound
    slot and stay writable.
    """
    ev = state.events.get(event_id)
    if ev is None:
        raise UnknownEvent(f"no event {event_id!r} in the current page state")
    entries: dict = {}
    for name, value in ev.views:
        entries[name] = RequestEntry(name, value, False)
    for name, kind, slot in ev.defines:
        value = navigate(state.root, slot) if slot is not None else NULL
        entries[name] = RequestEntry(name, value, True, slot, kind)
    return RequestView(ev, entries)


def apply_user_input(state: PageState, path: Path, v: Value) -> PageState:
    """A collector write: replace one base value, everything else as is."""
    p = tuple(path)
    if state.classification.get(p) != "base":
        raise WriteToDerived(f"path {_pstr(p)} does not accept user input")
    return dataclasses.replace(state, root=set_at(state.root, p, v))
