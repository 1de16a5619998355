"""Data deltas: minimal edit scripts between values, and their wire format.

A delta is an ordered list of operations applied to a value tree:

* ``insert(path, ordinal, row)``  - insert a row into the table at ``path``
* ``delete(path, ordinal)``       - remove a row from the table at ``path``
* ``replace(path, value)``        - overwrite the value at ``path``

Ordinals are 1-based and interpreted against the table as it stands when the
operation executes, so deltas compose by concatenation.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass
from typing import Callable, Sequence

from .errors import InvalidDelta
from .values import (
    INTENTIONAL,
    Path,
    Table,
    Tuple,
    Value,
    canonical_key,
    equals,
    from_py,
    navigate,
    set_at,
    to_py,
    wrap_row,
)


@dataclass(frozen=True)
class Insert:
    path: Path
    ordinal: int
    row: Tuple


@dataclass(frozen=True)
class Delete:
    path: Path
    ordinal: int


@dataclass(frozen=True)
class Replace:
    path: Path
    value: Value


Op = Insert | Delete | Replace


@dataclass(frozen=True)
class Delta:
    ops: tuple[Op, ...] = ()

    def __bool__(self) -> bool:
        return bool(self.ops)

    def __add__(self, other: "Delta") -> "Delta":
        return Delta(self.ops + other.ops)

    def __len__(self) -> int:
        return len(self.ops)


EMPTY_DELTA = Delta()


def prefix_ops(prefix: Path, delta: Delta) -> Delta:
    """Rebase every op in ``delta`` under ``prefix``."""
    out: list[Op] = []
    for op in delta.ops:
        if isinstance(op, Insert):
            out.append(Insert(prefix + op.path, op.ordinal, op.row))
        elif isinstance(op, Delete):
            out.append(Delete(prefix + op.path, op.ordinal))
        else:
            out.append(Replace(prefix + op.path, op.value))
    return Delta(tuple(out))


# --- apply ------------------------------------------------------------------


def apply_delta(v: Value, delta: Delta) -> Value:
    """Apply every op in order; raises InvalidDelta on the first op that does
    not fit the current shape of the value."""
    cur = v
    for i, op in enumerate(delta.ops):
        try:
            cur = _apply_op(cur, op)
        except Exception as e:
            raise InvalidDelta(i, str(e)) from None
    return cur


def _apply_op(v: Value, op: Op) -> Value:
    if isinstance(op, Replace):
        return set_at(v, op.path, op.value)
    target = navigate(v, op.path)
    if not isinstance(target, Table):
        raise ValueError(f"{_opname(op)} path does not address a table")
    if isinstance(op, Insert):
        if not 1 <= op.ordinal <= len(target.rows) + 1:
            raise ValueError(
                f"insert ordinal {op.ordinal} out of range 1..{len(target.rows) + 1}")
        rows = (target.rows[:op.ordinal - 1] + (op.row,)
                + target.rows[op.ordinal - 1:])
    else:
        if not 1 <= op.ordinal <= len(target.rows):
            raise ValueError(
                f"delete ordinal {op.ordinal} out of range 1..{len(target.rows)}")
        rows = target.rows[:op.ordinal - 1] + target.rows[op.ordinal:]
    return set_at(v, op.path, Table(rows, target.order_kind))


def _opname(op: Op) -> str:
    return type(op).__name__.lower()


# --- wire format -------------------------------------------------------------


def delta_to_py(delta: Delta) -> dict:
    ops = []
    for op in delta.ops:
        path = list(op.path)
        if isinstance(op, Insert):
            ops.append({"op": "insert", "path": path, "ordinal": op.ordinal,
                        "value": to_py(op.row)})
        elif isinstance(op, Delete):
            ops.append({"op": "delete", "path": path, "ordinal": op.ordinal})
        else:
            ops.append({"op": "replace", "path": path, "value": to_py(op.value)})
    return {"ops": ops}


def delta_to_json(delta: Delta) -> str:
    return json.dumps(delta_to_py(delta), separators=(",", ":"),
                      ensure_ascii=False)


def delta_from_py(obj: dict) -> Delta:
    ops: list[Op] = []
    for i, entry in enumerate(obj.get("ops", [])):
        kind = entry.get("op")
        path = tuple(entry.get("path", []))
        for step in path:
            if not isinstance(step, (str, int)) or isinstance(step, bool):
                raise InvalidDelta(i, f"bad path step {step!r}")
        if kind == "insert":
            ops.append(Insert(path, int(entry["ordinal"]),
                              wrap_row(from_py(entry["value"]))))
        elif kind == "delete":
            ops.append(Delete(path, int(entry["ordinal"])))
        elif kind == "replace":
            ops.append(Replace(path, from_py(entry["value"])))
        else:
            raise InvalidDelta(i, f"unknown op {kind!r}")
    return Delta(tuple(ops))


def delta_from_json(text: str) -> Delta:
    return delta_from_py(json.loads(text))


# --- diff ---------------------------------------------------------------------

# Key function: given a table path and a row, return a hashable identity or
# None to fall back to structural matching.
KeyFn = Callable[[Path, Tuple], object | None]


def no_keys(path: Path, row: Tuple) -> object | None:
    return None


def diff(old: Value, new: Value, key_fn: KeyFn = no_keys,
         path: Path = ()) -> Delta:
    """Compute a delta that rewrites ``old`` into ``new``.

    Tables are matched row-by-row: first by the caller's key function, then
    by structural equality, remaining rows pair up positionally for
    replacement.  apply_delta(old, diff(old, new)) is always equals-equal to
    ``new``.
    """
    if isinstance(old, Table) and isinstance(new, Table) \
            and old.order_kind == new.order_kind:
        return _diff_tables(old, new, key_fn, path)
    if isinstance(old, Tuple) and isinstance(new, Tuple) \
            and old.names() == new.names():
        out = EMPTY_DELTA
        for name, ov in old.fields:
            nv = new.get(name)
            assert nv is not None
            out = out + diff(ov, nv, key_fn, path + (name,))
        return out
    if equals(old, new):
        return EMPTY_DELTA
    return Delta((Replace(path, new),))


def _diff_tables(old: Table, new: Table, key_fn: KeyFn, path: Path) -> Delta:
    pairs = _match_rows(old, new, key_fn, path)
    if old.order_kind == INTENTIONAL:
        return _diff_ordered(old, new, pairs, key_fn, path)
    return _diff_bag(old, new, pairs, key_fn, path)


def _match_rows(old: Table, new: Table, key_fn: KeyFn,
                path: Path) -> list[tuple[int, int]]:
    """Pair old row indices with new row indices (0-based), in old order."""
    pairs: list[tuple[int, int]] = []
    used_new: set[int] = set()

    # 1. declared keys, unique on both sides
    old_keys = [key_fn(path, r) for r in old.rows]
    new_keys = [key_fn(path, r) for r in new.rows]
    old_index = _unique_index(old_keys)
    new_index = _unique_index(new_keys)
    for k, oi in old_index.items():
        ni = new_index.get(k)
        if ni is not None:
            pairs.append((oi, ni))
            used_new.add(ni)
    matched_old = {o for o, _ in pairs}

    # 2. structural equality for the rest
    remaining_new: dict[tuple, list[int]] = {}
    for ni, r in enumerate(new.rows):
        if ni not in used_new:
            remaining_new.setdefault(canonical_key(r), []).append(ni)
    for oi, r in enumerate(old.rows):
        if oi in matched_old:
            continue
        bucket = remaining_new.get(canonical_key(r))
        if bucket:
            ni = bucket.pop(0)
            pairs.append((oi, ni))
            matched_old.add(oi)
            used_new.add(ni)

    # 3. positional pairing of leftovers (becomes in-place replace/recurse)
    leftover_old = [i for i in range(len(old.rows)) if i not in matched_old]
    leftover_new = [i for i in range(len(new.rows)) if i not in used_new]
    for oi, ni in zip(leftover_old, leftover_new):
        pairs.append((oi, ni))

    pairs.sort()
    return pairs


def _unique_index(keys: Sequence[object | None]) -> dict[object, int]:
    index: dict[object, int] = {}
    dupes: set[object] = set()
    for i, k in enumerate(keys):
        if k is None:
            continue
        if k in index or k in dupes:
            dupes.add(k)
            index.pop(k, None)
            continue
        index[k] = i
    return index


def _diff_ordered(old: Table, new: Table, pairs: list[tuple[int, int]],
                  key_fn: KeyFn, path: Path) -> Delta:
    """Edit script for intentional order: keep the longest subsequence of
    matches already in relative order; everything else moves via
    delete + insert."""
    stable = _lis_pairs(pairs)
    stable_old = {o for o, _ in stable}
    stable_new = {n for _, n in stable}

    ops: list[Op] = []
    # Deletes: old rows that are unmatched, or matched but moving.
    delete_old = [oi for oi in range(len(old.rows)) if oi not in stable_old]
    o2n = dict(pairs)
    for oi in sorted(delete_old, reverse=True):
        ops.append(Delete(path, oi + 1))

    # Surviving old rows in order, identified by their new indices.
    current = [o2n[oi] for oi in sorted(stable_old)]

    # Inserts: any new index not among survivors lands at its final position.
    for ni in range(len(new.rows)):
        if ni in stable_new:
            continue
        pos = _insert_pos(current, ni)
        current.insert(pos, ni)
        ops.append(Insert(path, pos + 1, new.rows[ni]))

    # Recurse into stable pairs for interior changes; ordinals are positions
    # in the final table.
    final_pos = {ni: idx + 1 for idx, ni in enumerate(current)}
    sub_ops: list[Op] = []
    for oi, ni in stable:
        d = diff(old.rows[oi], new.rows[ni], key_fn, path + (final_pos[ni],))
        sub_ops.extend(d.ops)
    return Delta(tuple(ops) + tuple(sub_ops))


def _insert_pos(current: list[int], ni: int) -> int:
    for idx, existing in enumerate(current):
        if existing > ni:
            return idx
    return len(current)


def _lis_pairs(pairs: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Longest subsequence of (old, new) pairs increasing in the new index,
    given pairs sorted by old index."""
    if not pairs:
        return []
    seq = [n for _, n in pairs]
    parent = [-1] * len(seq)
    piles: list[int] = []  # indices into seq
    tails: list[int] = []
    for i, x in enumerate(seq):
        j = bisect.bisect_left(tails, x)
        if j == len(tails):
            tails.append(x)
            piles.append(i)
        else:
            tails[j] = x
            piles[j] = i
        parent[i] = piles[j - 1] if j > 0 else -1
    out = []
    k = piles[len(tails) - 1]
    while k != -1:
        out.append(pairs[k])
        k = parent[k]
    out.reverse()
    return out


def _diff_bag(old: Table, new: Table, pairs: list[tuple[int, int]],
              key_fn: KeyFn, path: Path) -> Delta:
    """Coincidental order: row positions carry no meaning, so matched rows
    stay in place (recursing for interior edits), unmatched old rows are
    deleted and unmatched new rows appended."""
    o2n = dict(pairs)
    paired_old = sorted(o2n)
    paired_new = {n for n in o2n.values()}

    ops: list[Op] = []
    unmatched_old = [oi for oi in range(len(old.rows)) if oi not in o2n]
    for oi in sorted(unmatched_old, reverse=True):
        ops.append(Delete(path, oi + 1))

    # positions of surviving rows after deletions, keyed by old index
    survivors = [oi for oi in range(len(old.rows)) if oi in o2n]
    pos_of = {oi: idx + 1 for idx, oi in enumerate(survivors)}

    appended = [ni for ni in range(len(new.rows)) if ni not in paired_new]
    base = len(survivors)
    for k, ni in enumerate(appended):
        ops.append(Insert(path, base + k + 1, new.rows[ni]))

    sub_ops: list[Op] = []
    for oi in paired_old:
        ni = o2n[oi]
        d = diff(old.rows[oi], new.rows[ni], key_fn, path + (pos_of[oi],))
        sub_ops.extend(d.ops)
    return Delta(tuple(ops) + tuple(sub_ops))
