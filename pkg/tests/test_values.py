"""The value model: scalars, tuples, tables, navigation, serialization."""

import pytest
from hypothesis import given, settings

from helpers import json_values

from forwardlite.errors import (
    FieldStepOnNonTuple,
    JsonParseError,
    OrdinalOutOfRange,
)
from forwardlite.values import (
    COINCIDENTAL,
    INTENTIONAL,
    NULL,
    Scalar,
    Table,
    Tuple,
    binary,
    boolean,
    canonical_key,
    double,
    equals,
    from_json,
    from_py,
    integer,
    is_null,
    navigate,
    set_at,
    string,
    table,
    timestamp,
    to_canonical_json,
    to_json,
    to_py,
    tup,
    unwrap_row,
    wrap_row,
)


class TestScalars:
    def test_kinds_are_distinct(self):
        assert integer(1).kind == "integer"
        assert double(1.0).kind == "double"
        assert not equals(integer(1), double(1.0))

    def test_null_singleton(self):
        assert is_null(NULL)
        assert not is_null(integer(0))
        assert not is_null(string(""))

    def test_extension_scalars_round_trip(self):
        ts = timestamp(1723804800000)
        bin_ = binary(b"\x00\x01\xff")
        for v in (ts, bin_):
            assert equals(from_json(to_json(v)), v)


class TestTuples:
    def test_get_returns_none_for_missing(self):
        t = tup(a=integer(1))
        assert t.get("a") == integer(1)
        assert t.get("b") is None

    def test_field_order_preserved_but_equality_ignores_it(self):
        t1 = Tuple((("a", integer(1)), ("b", integer(2))))
        t2 = Tuple((("b", integer(2)), ("a", integer(1))))
        assert equals(t1, t2)
        assert to_json(t1) != to_json(t2)
        assert to_canonical_json(t1) == to_canonical_json(t2)

    def test_wrapper(self):
        w = wrap_row(integer(5))
        assert w.is_wrapper()
        assert unwrap_row(w) == integer(5)
        assert not tup(a=integer(1)).is_wrapper()


class TestTables:
    def test_rows_are_one_based(self):
        t = table([tup(a=integer(10)), tup(a=integer(20))])
        assert to_py(t.row(1)) == {"a": 10}
        assert to_py(t.row(2)) == {"a": 20}
        with pytest.raises(OrdinalOutOfRange):
            t.row(0)
        with pytest.raises(OrdinalOutOfRange):
            t.row(3)

    def test_coincidental_equality_is_bag(self):
        a = table([tup(x=integer(1)), tup(x=integer(2))], COINCIDENTAL)
        b = table([tup(x=integer(2)), tup(x=integer(1))], COINCIDENTAL)
        assert equals(a, b)

    def test_intentional_equality_is_ordered(self):
        a = table([tup(x=integer(1)), tup(x=integer(2))], INTENTIONAL)
        b = table([tup(x=integer(2)), tup(x=integer(1))], INTENTIONAL)
        assert not equals(a, b)

    def test_heterogeneous_rows(self):
        t = from_py([1, "two", {"three": 3}])
        assert isinstance(t, Table)
        assert t.rows[0].is_wrapper()
        assert to_py(t) == [1, "two", {"three": 3}]


class TestNavigation:
    def test_field_then_ordinal(self):
        v = from_py({"rows": [{"a": 1}, {"a": 2}]})
        assert to_py(navigate(v, ("rows", 2, "a"))) == 2

    def test_missing_field_is_null(self):
        v = from_py({"a": 1})
        assert is_null(navigate(v, ("b",)))

    def test_field_on_scalar_raises(self):
        with pytest.raises(FieldStepOnNonTuple):
            navigate(integer(1), ("a",))

    def test_set_at_replaces_without_mutation(self):
        v = from_py({"rows": [{"a": 1}]})
        w = set_at(v, ("rows", 1, "a"), integer(9))
        assert to_py(navigate(v, ("rows", 1, "a"))) == 1
        assert to_py(navigate(w, ("rows", 1, "a"))) == 9


class TestJson:
    def test_parse_error_position(self):
        with pytest.raises(JsonParseError):
            from_json("{not json")

    def test_canonical_sorts_fields(self):
        v = from_py({"b": 1, "a": 2})
        assert to_canonical_json(v) == '{"a":2,"b":1}'

    @given(json_values())
    @settings(max_examples=300, deadline=None)
    def test_round_trip(self, obj):
        v = from_py(obj)
        assert equals(from_json(to_json(v)), v)

    @given(json_values())
    @settings(max_examples=150, deadline=None)
    def test_canonical_round_trip_is_stable(self, obj):
        v = from_py(obj)
        once = to_canonical_json(v)
        assert to_canonical_json(from_json(once)) == once


class TestCanonicalKey:
    def test_distinguishes_integer_from_double(self):
        assert canonical_key(integer(1)) != canonical_key(double(1.0))

    def test_tuple_key_ignores_field_order(self):
        t1 = Tuple((("a", integer(1)), ("b", integer(2))))
        t2 = Tuple((("b", integer(2)), ("a", integer(1))))
        assert canonical_key(t1) == canonical_key(t2)

    @given(json_values(depth=3))
    @settings(max_examples=150, deadline=None)
    def test_equal_values_share_keys(self, obj):
        assert canonical_key(from_py(obj)) == canonical_key(
            from_json(to_json(from_py(obj))))
