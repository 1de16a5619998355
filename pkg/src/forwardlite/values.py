"""SQL++ value model: scalars, tuples and tables that subsume SQL rows and JSON.

Values are immutable; every mutation helper returns a new value, so values can
be shared freely across threads and snapshots.  JSON interchange lives here
too, including the ``$type``/``$value`` envelope for scalars JSON cannot
express natively.
"""

from __future__ import annotations

import base64
import json
import re
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from typing import Callable, Iterable, Iterator

from .errors import (
    FieldStepOnNonTuple,
    JsonParseError,
    OrdinalOutOfRange,
    UnresolvablePath,
)

# Sentinel field name for wrapper tuples holding non-tuple table elements.
WRAPPER_FIELD = "#"

INTENTIONAL = "intentional"
COINCIDENTAL = "coincidental"

# A path step is a tuple field name (str) or a 1-based table ordinal (int).
Step = str | int
Path = tuple[Step, ...]


class Value:
    """Root of the value variant: exactly one of Scalar, Tuple, Table."""

    __slots__ = ()


@dataclass(frozen=True)
class Scalar(Value):
    """A typed scalar.  ``kind`` is one of the built-in kinds or an extension tag.

    Internal representations: null -> None, boolean -> bool, integer -> int,
    double -> float, string -> str, timestamp -> epoch milliseconds (int),
    binary -> bytes, extension -> its canonical string encoding.
    """

    kind: str
    value: object

    def __repr__(self) -> str:  # compact, for test output
        return f"Scalar({self.kind}:{self.value!r})"


@dataclass(frozen=True)
class Tuple(Value):
    """Ordered (name, value) pairs; names unique.  Order matters only for
    serialization, never for equality."""

    fields: tuple[tuple[str, Value], ...]

    def __post_init__(self):
        names = [n for n, _ in self.fields]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate field names in tuple: {names}")
        if WRAPPER_FIELD in names and len(names) > 1:
            raise ValueError("wrapper field '#' must be the tuple's only field")

    def get(self, name: str) -> Value | None:
        for n, v in self.fields:
            if n == name:
                return v
        return None

    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.fields)

    def is_wrapper(self) -> bool:
        return len(self.fields) == 1 and self.fields[0][0] == WRAPPER_FIELD

    def with_field(self, name: str, value: Value) -> "Tuple":
        """Replace an existing field or append a new one."""
        out = []
        found = False
        for n, v in self.fields:
            if n == name:
                out.append((n, value))
                found = True
            else:
                out.append((n, v))
        if not found:
            out.append((name, value))
        return Tuple(tuple(out))

    def without_field(self, name: str) -> "Tuple":
        return Tuple(tuple((n, v) for n, v in self.fields if n != name))

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}: {v!r}" for n, v in self.fields)
        return "{" + inner + "}"


@dataclass(frozen=True)
class Table(Value):
    """Ordered sequence of potentially heterogeneous tuples.

    ``order_kind`` records whether the order is intentional (produced by an
    explicit sort) or coincidental.  Ordinals are 1-based positions and are
    always derived from the sequence, never stored.
    """

    rows: tuple[Tuple, ...]
    order_kind: str = COINCIDENTAL

    def __post_init__(self):
        if self.order_kind not in (INTENTIONAL, COINCIDENTAL):
            raise ValueError(f"bad order_kind {self.order_kind!r}")
        for r in self.rows:
            if not isinstance(r, Tuple):
                raise ValueError(f"table row must be a Tuple, got {type(r).__name__}")

    def row(self, ordinal: int) -> Tuple:
        if not 1 <= ordinal <= len(self.rows):
            raise OrdinalOutOfRange(
                f"ordinal {ordinal} out of range 1..{len(self.rows)}")
        return self.rows[ordinal - 1]

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[Tuple]:
        return iter(self.rows)

    def __repr__(self) -> str:
        tag = "i" if self.order_kind == INTENTIONAL else "c"
        return f"Table<{tag}>[" + ", ".join(repr(r) for r in self.rows) + "]"


# --- constructors ---------------------------------------------------------

NULL = Scalar("null", None)
TRUE = Scalar("boolean", True)
FALSE = Scalar("boolean", False)


def boolean(b: bool) -> Scalar:
    return TRUE if b else FALSE


def integer(i: int) -> Scalar:
    return Scalar("integer", int(i))


def double(f: float) -> Scalar:
    return Scalar("double", float(f))


def string(s: str) -> Scalar:
    return Scalar("string", s)


def timestamp(epoch_ms: int) -> Scalar:
    return Scalar("timestamp", int(epoch_ms))


def binary(data: bytes) -> Scalar:
    return Scalar("binary", bytes(data))


def tup(*pairs: tuple[str, Value], **kw: Value) -> Tuple:
    return Tuple(tuple(pairs) + tuple(kw.items()))


def table(rows: Iterable[Tuple], order_kind: str = COINCIDENTAL) -> Table:
    return Table(tuple(rows), order_kind)


def wrap_row(v: Value) -> Tuple:
    """Coerce a value into a table row: tuples pass through, anything else is
    boxed in a wrapper tuple."""
    if isinstance(v, Tuple):
        return v
    return Tuple(((WRAPPER_FIELD, v),))


def unwrap_row(t: Tuple) -> Value:
    return t.fields[0][1] if t.is_wrapper() else t


def is_null(v: Value) -> bool:
    return isinstance(v, Scalar) and v.kind == "null"


# --- extension scalar codecs ----------------------------------------------

_TS_RE = re.compile(r"^(\d{4})-(\d{2})-(\d{2})T(\d{2}):(\d{2}):(\d{2})\.(\d{3})Z$")
_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


def format_timestamp(epoch_ms: int) -> str:
    dt = _EPOCH + timedelta(milliseconds=epoch_ms)
    return f"{dt.year:04d}-{dt.month:02d}-{dt.day:02d}T{dt.hour:02d}:{dt.minute:02d}:{dt.second:02d}.{dt.microsecond // 1000:03d}Z"


def parse_timestamp(text: str) -> int:
    m = _TS_RE.match(text)
    if not m:
        raise ValueError(f"bad timestamp literal {text!r}")
    y, mo, d, h, mi, s, ms = (int(g) for g in m.groups())
    dt = datetime(y, mo, d, h, mi, s, ms * 1000, tzinfo=timezone.utc)
    return int((dt - _EPOCH) / timedelta(milliseconds=1))


# tag -> (encode internal value to canonical text, decode canonical text)
_SCALAR_CODECS: dict[str, tuple[Callable[[object], str], Callable[[str], object]]] = {
    "timestamp": (lambda v: format_timestamp(v), parse_timestamp),
    "binary": (lambda v: base64.b64encode(v).decode("ascii"),
               lambda s: base64.b64decode(s.encode("ascii"))),
}


def register_scalar_type(tag: str, encode: Callable[[object], str],
                         decode: Callable[[str], object]) -> None:
    """Register an extension scalar kind with its canonical string codec."""
    if tag in ("null", "boolean", "integer", "double", "string"):
        raise ValueError(f"cannot override built-in scalar kind {tag!r}")
    _SCALAR_CODECS[tag] = (encode, decode)


def is_extension_kind(kind: str) -> bool:
    return kind in _SCALAR_CODECS


def canonical_scalar_text(s: Scalar) -> str:
    """Total deterministic text encoding of a scalar, used for canonical keys."""
    if s.kind == "null":
        return "null"
    if s.kind == "boolean":
        return "true" if s.value else "false"
    if s.kind == "integer":
        return str(s.value)
    if s.kind == "double":
        return repr(float(s.value))
    if s.kind == "string":
        return s.value  # type: ignore[return-value]
    enc, _ = _SCALAR_CODECS[s.kind]
    return enc(s.value)


# --- JSON interchange ------------------------------------------------------


def from_py(obj: object) -> Value:
    """Map a plain JSON-decoded Python object to a value.

    Arrays become intentional-order tables whose non-object elements are
    boxed in wrapper tuples; objects become tuples; numbers keep the
    int/float distinction the decoder produced.
    """
    if obj is None:
        return NULL
    if isinstance(obj, bool):
        return boolean(obj)
    if isinstance(obj, int):
        return integer(obj)
    if isinstance(obj, float):
        return double(obj)
    if isinstance(obj, str):
        return string(obj)
    if isinstance(obj, dict):
        if set(obj.keys()) == {"$type", "$value"} and isinstance(obj["$value"], str) \
                and obj["$type"] in _SCALAR_CODECS:
            _, dec = _SCALAR_CODECS[obj["$type"]]
            return Scalar(obj["$type"], dec(obj["$value"]))
        return Tuple(tuple((k, from_py(v)) for k, v in obj.items()))
    if isinstance(obj, list):
        return Table(tuple(wrap_row(from_py(el)) for el in obj), INTENTIONAL)
    raise TypeError(f"cannot convert {type(obj).__name__} to a value")


def from_json(text: str) -> Value:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise JsonParseError(e.msg, e.pos) from None
    return from_py(obj)


def to_py(v: Value) -> object:
    """Inverse of :func:`from_py`.  Wrapper tuples serialize as their bare
    value; extension scalars use the ``$type``/``$value`` envelope."""
    if isinstance(v, Scalar):
        if v.kind in ("null", "boolean", "integer", "double", "string"):
            return v.value
        enc, _ = _SCALAR_CODECS[v.kind]
        return {"$type": v.kind, "$value": enc(v.value)}
    if isinstance(v, Tuple):
        if v.is_wrapper():
            return to_py(v.fields[0][1])
        return {n: to_py(fv) for n, fv in v.fields}
    if isinstance(v, Table):
        return [to_py(unwrap_row(r)) for r in v.rows]
    raise TypeError(f"not a value: {v!r}")


def to_json(v: Value) -> str:
    return json.dumps(to_py(v), separators=(",", ":"), ensure_ascii=False)


def to_canonical_json(v: Value) -> str:
    """Deterministic serialization with sorted tuple fields, for byte-equal
    comparisons across independently built states."""
    return json.dumps(to_py(v), separators=(",", ":"), ensure_ascii=False,
                      sort_keys=True)


# --- equality and canonical keys -------------------------------------------


def equals(a: Value, b: Value) -> bool:
    """Deep structural equality.

    Tuples compare as name -> value maps; intentional tables compare
    order-sensitively; coincidental tables compare as bags.  Integer and
    double scalars never compare equal to each other.
    """
    if isinstance(a, Scalar) and isinstance(b, Scalar):
        if a.kind != b.kind:
            return False
        return a.value == b.value
    if isinstance(a, Tuple) and isinstance(b, Tuple):
        if set(a.names()) != set(b.names()):
            return False
        return all(equals(v, b.get(n)) for n, v in a.fields)  # type: ignore[arg-type]
    if isinstance(a, Table) and isinstance(b, Table):
        if a.order_kind != b.order_kind or len(a.rows) != len(b.rows):
            return False
        if a.order_kind == INTENTIONAL:
            return all(equals(x, y) for x, y in zip(a.rows, b.rows))
        unmatched = list(b.rows)
        for row in a.rows:
            for i, cand in enumerate(unmatched):
                if equals(row, cand):
                    del unmatched[i]
                    break
            else:
                return False
        return True
    return False


def canonical_key(v: Value) -> tuple:
    """Hashable key such that canonical_key(a) == canonical_key(b) iff
    equals(a, b).  Coincidental tables sort their row keys; tuples sort
    their field names."""
    if isinstance(v, Scalar):
        return ("s", v.kind, canonical_scalar_text(v))
    if isinstance(v, Tuple):
        return ("t", tuple(sorted((n, canonical_key(fv)) for n, fv in v.fields)))
    if isinstance(v, Table):
        keys = [canonical_key(r) for r in v.rows]
        if v.order_kind == COINCIDENTAL:
            keys.sort()
        return ("T", v.order_kind, tuple(keys))
    raise TypeError(f"not a value: {v!r}")


# --- navigation and functional update ---------------------------------------


def navigate(v: Value, path: Iterable[Step]) -> Value:
    """Resolve a path.  A missing tuple field yields null; an out-of-range
    ordinal or a mis-kinded step is an error."""
    cur = v
    for step in path:
        if isinstance(step, str):
            if not isinstance(cur, Tuple):
                raise FieldStepOnNonTuple(
                    f"field step {step!r} applied to {_kind_name(cur)}")
            got = cur.get(step)
            if got is None:
                return NULL
            cur = got
        else:
            if not isinstance(cur, Table):
                raise OrdinalOutOfRange(
                    f"ordinal step {step} applied to {_kind_name(cur)}")
            cur = cur.row(step)
    return cur


def set_at(v: Value, path: Iterable[Step], new: Value) -> Value:
    """Return ``v`` with the position addressed by ``path`` replaced.

    The path must resolve up to its parent; the final step may name a new
    tuple field.  A non-tuple written into a table row position is boxed in
    a wrapper tuple.
    """
    steps = tuple(path)
    if not steps:
        return new
    return _set_at(v, steps, new)


def _set_at(v: Value, steps: Path, new: Value) -> Value:
    step, rest = steps[0], steps[1:]
    if isinstance(step, str):
        if not isinstance(v, Tuple):
            raise UnresolvablePath(
                f"field step {step!r} applied to {_kind_name(v)}")
        if rest:
            cur = v.get(step)
            if cur is None:
                raise UnresolvablePath(f"missing field {step!r} on path")
            return v.with_field(step, _set_at(cur, rest, new))
        return v.with_field(step, new)
    if not isinstance(v, Table):
        raise UnresolvablePath(f"ordinal step {step} applied to {_kind_name(v)}")
    if not 1 <= step <= len(v.rows):
        raise UnresolvablePath(f"ordinal {step} out of range 1..{len(v.rows)}")
    if rest:
        updated = _set_at(v.rows[step - 1], rest, new)
    else:
        updated = new
    row = wrap_row(updated) if not isinstance(updated, Tuple) else updated
    rows = v.rows[:step - 1] + (row,) + v.rows[step:]
    return Table(rows, v.order_kind)


def _kind_name(v: Value) -> str:
    if isinstance(v, Scalar):
        return f"scalar({v.kind})"
    if isinstance(v, Tuple):
        return "tuple"
    if isinstance(v, Table):
        return "table"
    return type(v).__name__
