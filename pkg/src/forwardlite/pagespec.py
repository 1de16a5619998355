"""Page files: lenient markup with strict directive islands.

A page file is UTF-8 HTML interleaved with directives wrapped in
``<% ... %>``.  The markup between islands is kept verbatim and never
validated; directive bodies are parsed strictly and any query inside them
must parse, with errors reported at their position in the page file.

``with`` and ``define`` scope over the remainder of their enclosing body.
``for``, ``if`` and ``unit`` open nested bodies closed by ``end``.
``=``, ``init``, ``bind`` and ``event`` are leaves.  A unit body is JSON
with directives in value position; ``html`` opens a nested markup body
inside that JSON.  One page per file; the page takes its name from the
file name.
"""

from __future__ import annotations

import json
import re
from bisect import bisect_right
from dataclasses import dataclass
from typing import Optional, Union

from .errors import SyntaxError_, UnitSchemaViolation, UnknownUnitClass
from .nodes import Node, QueryNode
from .parser import _Parser, parse_query

EVENT_METHODS = ("ajax", "sync_refresh", "get", "post", "put", "delete")
DEFINE_KINDS = ("string", "integer", "double", "boolean", "timestamp", "binary")


# --- parse tree ----------------------------------------------------------------


@dataclass
class Text:
    text: str


@dataclass
class Output:
    """``<%= query %>``: a rendered query in element position."""

    query: QueryNode
    loc: str


@dataclass
class With:
    """A named view scoped over the remainder of the enclosing body."""

    name: str
    query: QueryNode
    body: tuple
    loc: str


@dataclass
class Define:
    """A request-schema name scoped over the remainder of the body.

    A define holds no page state of its own; it becomes readable and
    writable storage only through a bind somewhere in its body.
    """

    name: str
    kind: str
    body: tuple
    loc: str
    synthesized: bool = False


@dataclass
class Bind:
    name: str
    init: Optional[QueryNode]
    loc: str


@dataclass
class Event:
    dom: str
    method: str
    url: str
    args: tuple  # (name, expression) pairs, evaluated at fire time
    loc: str


@dataclass
class For:
    var: str
    query: QueryNode
    body: tuple
    loc: str


@dataclass
class If:
    cond: QueryNode
    then: tuple
    orelse: tuple
    loc: str


@dataclass
class Unit:
    class_name: str
    body: "JNode"
    loc: str


Item = Union[Text, Output, With, Define, Bind, Event, For, If, Unit]


@dataclass
class JObject:
    fields: tuple  # (name, JNode) pairs
    loc: str


@dataclass
class JArray:
    items: tuple
    loc: str


@dataclass
class JLiteral:
    value: object  # plain python scalar straight from the JSON text


@dataclass
class JOutput:
    query: QueryNode
    loc: str


@dataclass
class JInit:
    query: QueryNode
    loc: str


@dataclass
class JBind:
    name: str
    init: Optional[QueryNode]
    loc: str


@dataclass
class JFor:
    """Array comprehension: one body value per row of the query."""

    var: str
    query: QueryNode
    body: "JNode"
    loc: str


@dataclass
class JHtml:
    body: tuple  # markup items
    loc: str


JNode = Union[JObject, JArray, JLiteral, JOutput, JInit, JBind, JFor, JHtml]


@dataclass
class PageFile:
    name: str
    body: tuple
    filename: str


# --- unit schemas ----------------------------------------------------------------


@dataclass(frozen=True)
class UnitField:
    name: str
    required: bool = False
    kind: str = "scalar"  # scalar | tuple | table | html
    row: Optional[tuple] = None  # field schemas of table rows


@dataclass(frozen=True)
class UnitSchema:
    name: str
    fields: tuple


UNIT_SCHEMAS: dict[str, UnitSchema] = {
    "demo.map.Markers": UnitSchema(
        "demo.map.Markers",
        (
            UnitField("zoom"),
            UnitField("center", kind="tuple"),
            UnitField(
                "markers",
                required=True,
                kind="table",
                row=(
                    UnitField("lat", required=True),
                    UnitField("lng", required=True),
                    UnitField("label"),
                    UnitField("infowindow", kind="html"),
                ),
            ),
        ),
    ),
}


# --- source text helpers ----------------------------------------------------------------


class _PageText:
    def __init__(self, text: str, filename: str):
        self.text = text
        self.filename = filename
        self._starts = [0]
        for m in re.finditer("\n", text):
            self._starts.append(m.end())

    def linecol(self, off: int) -> tuple[int, int]:
        line = bisect_right(self._starts, off)
        return line, off - self._starts[line - 1] + 1

    def loc(self, off: int) -> str:
        line, col = self.linecol(off)
        return f"{self.filename}:{line}:{col}"

    def fail(self, off: int, msg: str) -> SyntaxError_:
        line, col = self.linecol(off)
        return SyntaxError_(msg, line, col, self.filename)


def _tail_query(tail: str, page: _PageText, off: int) -> QueryNode:
    """Parse a query embedded at absolute offset ``off`` of the page."""
    line, col = page.linecol(off)
    try:
        return parse_query(tail)
    except SyntaxError_ as e:
        nline = line + e.line - 1
        ncol = col + e.col - 1 if e.line == 1 else e.col
        raise SyntaxError_(e.message, nline, ncol, page.filename,
                           e.expected) from None


def _tail_event_args(tail: str, page: _PageText, off: int) -> tuple:
    line, col = page.linecol(off)
    p = _Parser(tail)
    args: list[tuple[str, Node]] = []
    try:
        if p.peek().kind != "eof":
            while True:
                name = p.expect_name("argument name").text
                p.expect_punct("=")
                args.append((name, p.parse_expr()))
                if not p.accept_punct(","):
                    break
            p.expect_eof()
    except SyntaxError_ as e:
        nline = line + e.line - 1
        ncol = col + e.col - 1 if e.line == 1 else e.col
        raise SyntaxError_(e.message, nline, ncol, page.filename,
                           e.expected) from None
    return tuple(args)


# --- island scanning ----------------------------------------------------------------


@dataclass
class _TextTok:
    text: str
    off: int


@dataclass
class _Island:
    kind: str
    off: int  # offset of the opening <%
    loc: str
    name: str = ""
    extra: str = ""  # define kind / event method / unit class
    dom: str = ""
    url: str = ""
    query: Optional[QueryNode] = None
    init: Optional[QueryNode] = None
    args: tuple = ()


_ISLAND_RE = re.compile(r"<%(.*?)%>", re.S)

_WITH_RE = re.compile(r"^\s*with\s+([A-Za-z_]\w*)\s+as\b(.*)$", re.S)
_FOR_RE = re.compile(r"^\s*for\s+([A-Za-z_]\w*)\s+in\b(.*)$", re.S)
_IF_RE = re.compile(r"^\s*if\b(.*)$", re.S)
_INIT_RE = re.compile(r"^\s*init\b(.*)$", re.S)
_DEFINE_RE = re.compile(r"^\s*define\s+([A-Za-z_]\w*)\s+([a-z]+)\s*$")
_BIND_RE = re.compile(r"^\s*bind\s+([A-Za-z_]\w*)\s*(?:\binit\b(.*))?$", re.S)
_EVENT_RE = re.compile(
    r"^\s*event\s+([A-Za-z_][\w-]*)\s+([a-z_]+)\s+(/[\w/.-]*)\s*(?:\bwith\b(.*))?$",
    re.S)
_UNIT_RE = re.compile(r"^\s*unit\s+([A-Za-z_][\w.]*)\s*$")
_WORD_RE = re.compile(r"^\s*([A-Za-z_]\w*)")


def _scan_island(page: _PageText, body: str, body_off: int,
                 island_off: int) -> _Island:
    loc = page.loc(island_off)

    def isl(kind: str, **kw) -> _Island:
        return _Island(kind, island_off, loc, **kw)

    stripped = body.lstrip()
    if stripped.startswith("="):
        tail_off = body_off + body.index("=") + 1
        q = _tail_query(body[body.index("=") + 1:], page, tail_off)
        return isl("out", query=q)

    m = _WORD_RE.match(body)
    if not m:
        raise page.fail(island_off, "empty directive")
    word = m.group(1)

    if word == "with":
        m = _WITH_RE.match(body)
        if not m:
            raise page.fail(island_off, "expected: with <name> as <query>")
        q = _tail_query(m.group(2), page, body_off + m.start(2))
        return isl("with", name=m.group(1), query=q)
    if word == "for":
        m = _FOR_RE.match(body)
        if not m:
            raise page.fail(island_off, "expected: for <name> in <query>")
        q = _tail_query(m.group(2), page, body_off + m.start(2))
        return isl("for", name=m.group(1), query=q)
    if word == "if":
        m = _IF_RE.match(body)
        q = _tail_query(m.group(1), page, body_off + m.start(1))
        return isl("if", query=q)
    if word in ("else", "end"):
        if body.strip() != word:
            raise page.fail(island_off, f"'{word}' takes no arguments")
        return isl(word)
    if word == "init":
        m = _INIT_RE.match(body)
        q = _tail_query(m.group(1), page, body_off + m.start(1))
        return isl("init", query=q)
    if word == "define":
        m = _DEFINE_RE.match(body)
        if not m:
            raise page.fail(island_off, "expected: define <name> <scalar-kind>")
        if m.group(2) not in DEFINE_KINDS:
            raise page.fail(
                island_off,
                f"unknown define kind {m.group(2)!r}; one of "
                + ", ".join(DEFINE_KINDS))
        return isl("define", name=m.group(1), extra=m.group(2))
    if word == "bind":
        m = _BIND_RE.match(body)
        if not m:
            raise page.fail(island_off, "expected: bind <name> [init <query>]")
        init = None
        if m.group(2) is not None:
            init = _tail_query(m.group(2), page, body_off + m.start(2))
        return isl("bind", name=m.group(1), init=init)
    if word == "event":
        m = _EVENT_RE.match(body)
        if not m:
            raise page.fail(
                island_off,
                "expected: event <dom-event> <method> </url> [with a = expr, ...]")
        if m.group(2) not in EVENT_METHODS:
            raise page.fail(
                island_off,
                f"unknown event method {m.group(2)!r}; one of "
                + ", ".join(EVENT_METHODS))
        args: tuple = ()
        if m.group(4) is not None:
            args = _tail_event_args(m.group(4), page, body_off + m.start(4))
        return isl("event", dom=m.group(1), extra=m.group(2), url=m.group(3),
                   args=args)
    if word == "unit":
        m = _UNIT_RE.match(body)
        if not m:
            raise page.fail(island_off, "expected: unit <dotted.class.name>")
        return isl("unit", extra=m.group(1))
    if word == "html":
        if body.strip() != "html":
            raise page.fail(island_off, "'html' takes no arguments")
        return isl("html")
    raise page.fail(island_off, f"unknown directive {word!r}")


def _scan(page: _PageText) -> list:
    toks: list = []
    last = 0
    for m in _ISLAND_RE.finditer(page.text):
        if m.start() > last:
            toks.append(_TextTok(page.text[last:m.start()], last))
        toks.append(_scan_island(page, m.group(1), m.start(1), m.start()))
        last = m.end()
    if last < len(page.text):
        toks.append(_TextTok(page.text[last:], last))
    for t in toks:
        if isinstance(t, _TextTok) and "<%" in t.text:
            off = t.off + t.text.index("<%")
            raise page.fail(off, "unterminated directive: missing '%>'")
    return toks


# --- markup body structuring ----------------------------------------------------------------


class _TagState:
    """Tracks whether the scan position sits inside an open element tag.

    Binds and events become attributes and must appear inside a tag; the
    content directives become placeholder elements and must not.  Quoting
    is ignored, so attribute values containing angle brackets will confuse
    the position check.
    """

    def __init__(self) -> None:
        self.in_tag = False

    def feed(self, text: str) -> None:
        for ch in text:
            if ch == "<":
                self.in_tag = True
            elif ch == ">":
                self.in_tag = False


def _structure_body(toks: list, i: int, page: _PageText, stop: tuple,
                    tag: _TagState) -> tuple[list, int]:
    items: list = []
    while i < len(toks):
        t = toks[i]
        if isinstance(t, _TextTok):
            tag.feed(t.text)
            items.append(Text(t.text))
            i += 1
            continue
        if t.kind in ("end", "else"):
            if t.kind in stop:
                return items, i
            raise page.fail(t.off, f"'{t.kind}' without an open block")
        if t.kind in ("out", "for", "if", "unit") and tag.in_tag:
            raise page.fail(t.off,
                            "content directives may not appear inside a tag")
        if t.kind in ("bind", "event") and not tag.in_tag:
            raise page.fail(
                t.off, f"'{t.kind}' must appear inside an element tag")
        if t.kind == "out":
            items.append(Output(t.query, t.loc))
            i += 1
        elif t.kind == "with":
            body, i = _structure_body(toks, i + 1, page, stop, tag)
            items.append(With(t.name, t.query, tuple(body), t.loc))
            return items, i
        elif t.kind == "define":
            body, i = _structure_body(toks, i + 1, page, stop, tag)
            items.append(Define(t.name, t.extra, tuple(body), t.loc))
            return items, i
        elif t.kind == "bind":
            items.append(Bind(t.name, t.init, t.loc))
            i += 1
        elif t.kind == "event":
            items.append(Event(t.dom, t.extra, t.url, t.args, t.loc))
            i += 1
        elif t.kind == "for":
            body, i = _structure_body(toks, i + 1, page, ("end",), tag)
            i = _expect_island(toks, i, page, "end", t)
            items.append(For(t.name, t.query, tuple(body), t.loc))
        elif t.kind == "if":
            then, i = _structure_body(toks, i + 1, page, ("else", "end"), tag)
            orelse: list = []
            if i < len(toks) and isinstance(toks[i], _Island) \
                    and toks[i].kind == "else":
                orelse, i = _structure_body(toks, i + 1, page, ("end",), tag)
            i = _expect_island(toks, i, page, "end", t)
            items.append(If(t.query, tuple(then), tuple(orelse), t.loc))
        elif t.kind == "unit":
            node, i = _parse_unit_body(toks, i + 1, page)
            i = _expect_island(toks, i, page, "end", t)
            _validate_unit(t.extra, node, t.loc)
            items.append(Unit(t.extra, node, t.loc))
        elif t.kind == "init":
            raise page.fail(t.off, "'init' is only valid inside a unit body; "
                                   "use 'bind <name> init <query>' in markup")
        elif t.kind == "html":
            raise page.fail(t.off, "'html' is only valid inside a unit body")
        else:
            raise page.fail(t.off, f"unexpected directive {t.kind!r}")
    return items, i


def _expect_island(toks: list, i: int, page: _PageText, kind: str,
                   opener: _Island) -> int:
    if i >= len(toks):
        raise page.fail(opener.off, f"unclosed '{opener.kind}': missing 'end'")
    t = toks[i]
    if not isinstance(t, _Island) or t.kind != kind:
        off = t.off if isinstance(t, (_Island, _TextTok)) else opener.off
        raise page.fail(off, f"expected '{kind}'")
    return i + 1


# --- unit JSON bodies ----------------------------------------------------------------


class _JCursor:
    """Character cursor over the token stream inside a unit body."""

    def __init__(self, toks: list, i: int, page: _PageText):
        self.toks = toks
        self.i = i
        self.ci = 0
        self.page = page

    def _text(self) -> Optional[_TextTok]:
        if self.i < len(self.toks) and isinstance(self.toks[self.i], _TextTok):
            return self.toks[self.i]
        return None

    def skip_ws(self) -> None:
        while True:
            t = self._text()
            if t is None:
                return
            while self.ci < len(t.text) and t.text[self.ci] in " \t\r\n":
                self.ci += 1
            if self.ci < len(t.text):
                return
            self.i += 1
            self.ci = 0

    def at_island(self) -> Optional[_Island]:
        if self.i < len(self.toks) and isinstance(self.toks[self.i], _Island):
            return self.toks[self.i]
        return None

    def take_island(self) -> _Island:
        t = self.toks[self.i]
        self.i += 1
        self.ci = 0
        return t

    def off(self) -> int:
        t = self._text()
        if t is not None:
            return t.off + self.ci
        if self.i < len(self.toks):
            return self.toks[self.i].off
        return len(self.page.text)

    def fail(self, msg: str) -> SyntaxError_:
        return self.page.fail(self.off(), msg)

    def peek_ch(self) -> Optional[str]:
        t = self._text()
        if t is None or self.ci >= len(t.text):
            return None
        return t.text[self.ci]

    def take_ch(self) -> str:
        t = self._text()
        if t is None or self.ci >= len(t.text):
            raise self.fail("unexpected end of unit body")
        ch = t.text[self.ci]
        self.ci += 1
        return ch

    def match(self, regex: re.Pattern) -> Optional[re.Match]:
        t = self._text()
        if t is None:
            return None
        m = regex.match(t.text, self.ci)
        if m:
            self.ci = m.end()
        return m


_JSTRING_RE = re.compile(r'"(?:[^"\\\n]|\\.)*"')
_JNUMBER_RE = re.compile(r"-?(?:0|[1-9]\d*)(?:\.\d+)?(?:[eE][+-]?\d+)?")
_JWORD_RE = re.compile(r"[a-z]+")


def _parse_unit_body(toks: list, i: int, page: _PageText) -> tuple[JNode, int]:
    cur = _JCursor(toks, i, page)
    node = _json_value(cur)
    cur.skip_ws()
    return node, cur.i


def _json_value(cur: _JCursor) -> JNode:
    cur.skip_ws()
    isl = cur.at_island()
    if isl is not None:
        cur.take_island()
        if isl.kind == "out":
            return JOutput(isl.query, isl.loc)
        if isl.kind == "init":
            return JInit(isl.query, isl.loc)
        if isl.kind == "bind":
            return JBind(isl.name, isl.init, isl.loc)
        if isl.kind == "html":
            body, j = _structure_body(cur.toks, cur.i, cur.page, ("end",),
                                      _TagState())
            j = _expect_island(cur.toks, j, cur.page, "end", isl)
            cur.i = j
            cur.ci = 0
            return JHtml(tuple(body), isl.loc)
        if isl.kind == "for":
            raise cur.page.fail(
                isl.off, "'for' is only allowed as a JSON array item")
        raise cur.page.fail(
            isl.off, f"directive {isl.kind!r} is not a JSON value")
    ch = cur.peek_ch()
    if ch is None:
        raise cur.fail("expected a JSON value")
    loc = cur.page.loc(cur.off())
    if ch == "{":
        return _json_object(cur, loc)
    if ch == "[":
        return _json_array(cur, loc)
    if ch == '"':
        m = cur.match(_JSTRING_RE)
        if not m:
            raise cur.fail("unterminated string")
        return JLiteral(json.loads(m.group(0)))
    if ch == "-" or ch.isdigit():
        m = cur.match(_JNUMBER_RE)
        if not m:
            raise cur.fail("malformed number")
        text = m.group(0)
        return JLiteral(json.loads(text))
    m = cur.match(_JWORD_RE)
    if m and m.group(0) in ("true", "false", "null"):
        return JLiteral({"true": True, "false": False, "null": None}[m.group(0)])
    raise cur.fail("expected a JSON value")


def _json_object(cur: _JCursor, loc: str) -> JObject:
    cur.take_ch()  # {
    fields: list = []
    cur.skip_ws()
    if cur.peek_ch() == "}":
        cur.take_ch()
        return JObject((), loc)
    while True:
        cur.skip_ws()
        m = cur.match(_JSTRING_RE)
        if not m:
            raise cur.fail("expected a field name string")
        name = json.loads(m.group(0))
        cur.skip_ws()
        if cur.peek_ch() != ":":
            raise cur.fail("expected ':'")
        cur.take_ch()
        fields.append((name, _json_value(cur)))
        cur.skip_ws()
        ch = cur.peek_ch()
        if ch == ",":
            cur.take_ch()
            continue
        if ch == "}":
            cur.take_ch()
            return JObject(tuple(fields), loc)
        raise cur.fail("expected ',' or '}'")


def _json_array(cur: _JCursor, loc: str) -> JArray:
    cur.take_ch()  # [
    items: list = []
    cur.skip_ws()
    if cur.peek_ch() == "]":
        cur.take_ch()
        return JArray((), loc)
    while True:
        cur.skip_ws()
        isl = cur.at_island()
        if isl is not None and isl.kind == "for":
            cur.take_island()
            body = _json_value(cur)
            cur.skip_ws()
            stop = cur.at_island()
            if stop is None or stop.kind != "end":
                raise cur.fail("expected 'end' to close the array 'for'")
            cur.take_island()
            items.append(JFor(isl.name, isl.query, body, isl.loc))
        else:
            items.append(_json_value(cur))
        cur.skip_ws()
        ch = cur.peek_ch()
        if ch == ",":
            cur.take_ch()
            continue
        if ch == "]":
            cur.take_ch()
            return JArray(tuple(items), loc)
        raise cur.fail("expected ',' or ']'")


# --- unit schema validation ----------------------------------------------------------------


def _validate_unit(class_name: str, body: JNode, loc: str) -> None:
    schema = UNIT_SCHEMAS.get(class_name)
    if schema is None:
        raise UnknownUnitClass(
            f"{loc}: unknown unit class {class_name!r}; known: "
            + ", ".join(sorted(UNIT_SCHEMAS)))
    if isinstance(body, JOutput):
        return  # whole state comes from a query; checked when it renders
    if not isinstance(body, JObject):
        raise UnitSchemaViolation(
            f"{loc}: unit {class_name} takes a JSON object body")
    _validate_fields(class_name, schema.fields, body, loc)


def _validate_fields(class_name: str, fields: tuple, body: JObject,
                     loc: str) -> None:
    by_name = {f.name: f for f in fields}
    seen = set()
    for name, node in body.fields:
        f = by_name.get(name)
        if f is None:
            raise UnitSchemaViolation(
                f"{loc}: unit {class_name} has no field {name!r}")
        if name in seen:
            raise UnitSchemaViolation(
                f"{loc}: duplicate field {name!r}")
        seen.add(name)
        _validate_field(class_name, f, node, loc)
    for f in fields:
        if f.required and f.name not in seen:
            raise UnitSchemaViolation(
                f"{loc}: unit {class_name} requires field {f.name!r}")


def _validate_field(class_name: str, f: UnitField, node: JNode,
                    loc: str) -> None:
    if isinstance(node, JOutput):
        return  # dynamic; shape known only at render time
    if f.kind == "html":
        if not isinstance(node, JHtml):
            raise UnitSchemaViolation(
                f"{loc}: field {f.name!r} of {class_name} takes an html body")
        return
    if f.kind == "table":
        if not isinstance(node, JArray):
            raise UnitSchemaViolation(
                f"{loc}: field {f.name!r} of {class_name} takes a JSON array")
        for item in node.items:
            row = item.body if isinstance(item, JFor) else item
            if isinstance(row, JOutput):
                continue
            if not isinstance(row, JObject):
                raise UnitSchemaViolation(
                    f"{loc}: rows of {f.name!r} must be JSON objects")
            _validate_fields(class_name, f.row or (), row, loc)
        return
    if f.kind == "tuple":
        if not isinstance(node, JObject):
            raise UnitSchemaViolation(
                f"{loc}: field {f.name!r} of {class_name} takes a JSON object")
        return
    if isinstance(node, (JObject, JArray, JHtml)):
        raise UnitSchemaViolation(
            f"{loc}: field {f.name!r} of {class_name} takes a scalar")


# --- public API ----------------------------------------------------------------


def parse_page(text: str, name: str, filename: Optional[str] = None) -> PageFile:
    """Parse one page file into its directive tree."""
    page = _PageText(text, filename or f"{name}.html")
    toks = _scan(page)
    items, i = _structure_body(toks, 0, page, (), _TagState())
    if i < len(toks):
        raise page.fail(toks[i].off, "'end' or 'else' without an open block")
    return PageFile(name, tuple(items), page.filename)
