"""Pretty-printer producing parseable surface syntax.

Printing then parsing round-trips structurally: parse(print(ast)) equals
ast with positions ignored.
"""

from __future__ import annotations

from .nodes import (
    ActionDecl,
    Assign,
    Binary,
    Block,
    CallStmt,
    Declare,
    Delete,
    Exists,
    ExprQuery,
    For,
    FromItem,
    FuncCall,
    FunctionDecl,
    If,
    InList,
    InQuery,
    Insert,
    IsNull,
    Lit,
    NamePath,
    NextPage,
    Node,
    OrderItem,
    OuterUnion,
    QueryNode,
    Raise,
    Return,
    SelectBlock,
    SelectItem,
    Statement,
    SubQueryExpr,
    Unary,
    Union,
    Update,
    ValuesSource,
    WithQuery,
)
from .values import Scalar, canonical_scalar_text

# binding strength, mirroring the parser's precedence ladder
_PREC = {
    "or": 1, "and": 2,
    "=": 4, "<>": 4, "<": 4, "<=": 4, ">": 4, ">=": 4,
    "||": 5, "+": 6, "-": 6, "*": 7, "/": 7,
}


def print_query(q: QueryNode) -> str:
    if isinstance(q, WithQuery):
        binds = ", ".join(f"{n} as ({print_query(sub)})" for n, sub in q.bindings)
        return f"with {binds} {print_query(q.body)}"
    if isinstance(q, Union):
        op = "union all" if q.all else "union"
        return f"{_query_operand(q.left)} {op} {_query_operand(q.right)}"
    if isinstance(q, OuterUnion):
        return f"{_query_operand(q.left)} outer union {_query_operand(q.right)}"
    if isinstance(q, SelectBlock):
        return _print_select(q)
    if isinstance(q, ExprQuery):
        return print_expr(q.expr)
    raise TypeError(f"not a query node: {q!r}")


def _query_operand(q: QueryNode) -> str:
    # union operands that are themselves unions or with-queries need parens
    if isinstance(q, (Union, OuterUnion, WithQuery)):
        return f"({print_query(q)})"
    return print_query(q)


def _print_select(q: SelectBlock) -> str:
    parts = ["select"]
    if q.distinct:
        parts.append("distinct")
    parts.append(", ".join(_print_item(it) for it in q.items))
    if q.from_items:
        parts.append("from")
        froms: list[str] = []
        for i, f in enumerate(q.from_items):
            piece = _print_from(f)
            if i == 0:
                froms.append(piece)
            elif f.join_kind is None:
                froms.append(f", {piece}")
            else:
                kw = "inner join" if f.join_kind == "inner" else "left join"
                froms.append(f" {kw} {piece} on {print_expr(f.on)}")
        parts.append("".join(froms))
    if q.where is not None:
        parts.append(f"where {print_expr(q.where)}")
    if q.group_by:
        parts.append("group by " + ", ".join(print_expr(e) for e in q.group_by))
    if q.order_by:
        parts.append("order by " + ", ".join(_print_order(o) for o in q.order_by))
    if q.limit is not None:
        parts.append(f"limit {print_expr(q.limit)}")
    return " ".join(parts)


def _print_item(it: SelectItem) -> str:
    if it.star_of == "":
        return "*"
    if it.star_of is not None:
        return f"{it.star_of}.*"
    body = print_expr(it.expr)  # type: ignore[arg-type]
    # a nested select in item position prints bare (no parens) only when it
    # was parsed bare; parenthesized keeps round-trip stable
    if it.alias is not None:
        return f"{body} as {it.alias}"
    return body


def _print_from(f: FromItem) -> str:
    if isinstance(f.source, SubQueryExpr):
        return f"({print_query(f.source.query)}) as {f.alias}"
    assert isinstance(f.source, NamePath)
    src = f.source.dotted()
    if f.source.parts[-1] == f.alias:
        return src
    return f"{src} as {f.alias}"


def _print_order(o: OrderItem) -> str:
    return print_expr(o.expr) + (" desc" if o.descending else "")


def print_expr(e: Node, parent_prec: int = 0) -> str:
    if isinstance(e, Lit):
        return _print_lit(e.value)
    if isinstance(e, NamePath):
        return e.dotted()
    if isinstance(e, Unary):
        if e.op == "not":
            inner = print_expr(e.operand, 3)
            return f"not {inner}"
        return "-" + print_expr(e.operand, 8)
    if isinstance(e, Binary):
        prec = _PREC[e.op]
        left = print_expr(e.left, prec)
        # left-associative: right operand needs strictly higher binding
        right = print_expr(e.right, prec + 1)
        s = f"{left} {e.op} {right}"
        return f"({s})" if prec < parent_prec else s
    if isinstance(e, IsNull):
        inner = print_expr(e.operand, 5)
        s = f"{inner} is not null" if e.negated else f"{inner} is null"
        return f"({s})" if parent_prec > 4 else s
    if isinstance(e, InList):
        inner = print_expr(e.needle, 5)
        items = ", ".join(print_expr(x) for x in e.items)
        kw = "not in" if e.negated else "in"
        s = f"{inner} {kw} ({items})"
        return f"({s})" if parent_prec > 4 else s
    if isinstance(e, InQuery):
        inner = print_expr(e.needle, 5)
        kw = "not in" if e.negated else "in"
        s = f"{inner} {kw} ({print_query(e.query)})"
        return f"({s})" if parent_prec > 4 else s
    if isinstance(e, Exists):
        return f"exists ({print_query(e.query)})"
    if isinstance(e, FuncCall):
        if e.star:
            return f"{e.name}(*)"
        return f"{e.name}({', '.join(print_expr(a) for a in e.args)})"
    if isinstance(e, SubQueryExpr):
        return f"({print_query(e.query)})"
    raise TypeError(f"not an expression node: {e!r}")


def _print_lit(s: Scalar) -> str:
    if s.kind == "string":
        body = s.value.replace("'", "''")  # type: ignore[union-attr]
        return f"'{body}'"
    if s.kind in ("null", "boolean", "integer", "double"):
        return canonical_scalar_text(s)
    raise TypeError(f"no literal syntax for scalar kind {s.kind}")


# --- statements --------------------------------------------------------------


def print_statement(st: Statement, indent: int = 0) -> str:
    pad = "  " * indent
    if isinstance(st, Declare):
        s = f"declare {st.name}"
        if st.schema_name:
            s += f" {st.schema_name}"
        if st.init is not None:
            s += f" := {print_query(st.init)}"
        return pad + s + ";"
    if isinstance(st, Assign):
        return pad + f"{st.target.dotted()} := {print_query(st.query)};"
    if isinstance(st, Insert):
        s = f"insert into {st.target.dotted()}"
        if st.columns:
            s += " (" + ", ".join(st.columns) + ")"
        if isinstance(st.source, ValuesSource):
            rows = ", ".join(
                "(" + ", ".join(print_expr(x) for x in row) + ")"
                for row in st.source.rows)
            s += f" values {rows}"
        else:
            s += " " + print_query(st.source)  # type: ignore[arg-type]
        return pad + s + ";"
    if isinstance(st, Update):
        s = f"update {st.target.dotted()}"
        if st.alias:
            s += f" {st.alias}"
        s += " set " + ", ".join(f"{n} = {print_expr(e)}"
                                 for n, e in st.assignments)
        if st.where is not None:
            s += f" where {print_expr(st.where)}"
        return pad + s + ";"
    if isinstance(st, Delete):
        s = f"delete from {st.target.dotted()}"
        if st.alias:
            s += f" {st.alias}"
        if st.where is not None:
            s += f" where {print_expr(st.where)}"
        return pad + s + ";"
    if isinstance(st, If):
        lines = [pad + f"if {print_expr(st.cond)} then"]
        lines += [print_statement(x, indent + 1) for x in st.then_body]
        if st.else_body:
            lines.append(pad + "else")
            lines += [print_statement(x, indent + 1) for x in st.else_body]
        lines.append(pad + "end if;")
        return "\n".join(lines)
    if isinstance(st, For):
        lines = [pad + f"for {st.var} in ({print_query(st.query)}) loop"]
        lines += [print_statement(x, indent + 1) for x in st.body]
        lines.append(pad + "end loop;")
        return "\n".join(lines)
    if isinstance(st, Raise):
        return pad + f"raise {print_expr(st.message)};"
    if isinstance(st, Block):
        return _print_block(st, indent) + ";"
    if isinstance(st, CallStmt):
        args = ", ".join(print_expr(a) for a in st.args)
        return pad + f"call {st.name}({args});"
    if isinstance(st, NextPage):
        return pad + f"next_page({print_expr(st.page)});"
    if isinstance(st, Return):
        if st.value is None:
            return pad + "return;"
        return pad + f"return {print_query(st.value)};"
    raise TypeError(f"not a statement node: {st!r}")


def _print_block(b: Block, indent: int = 0) -> str:
    pad = "  " * indent
    lines = [pad + "begin"]
    lines += [print_statement(x, indent + 1) for x in b.body]
    if b.handler is not None:
        lines.append(pad + "exception when others then")
        lines += [print_statement(x, indent + 1) for x in b.handler]
    lines.append(pad + "end")
    return "\n".join(lines)


def print_declaration(d: FunctionDecl | ActionDecl) -> str:
    if isinstance(d, FunctionDecl):
        head = (f"create function {d.name}({', '.join(d.params)}) "
                f"{d.mutability} as")
        return head + "\n" + _print_block(d.body) + ";"
    if isinstance(d.function, str):
        return f"define action {d.url} as {d.function};"
    return (f"define action {d.url} as\n"
            + _print_block(d.function.body) + ";")
