"""Recursive-descent parser for queries and procedure programs.

The query grammar is a SQL core (select/from/where/group/order/limit/union)
with three extensions: a bare expression is a valid query, a parenthesized
query is a valid expression (yielding a nested table), and OUTER UNION
concatenates heterogeneous inputs.  Procedures follow stored-procedure
conventions: begin/end blocks, := assignment, DML against dotted paths.
"""

from __future__ import annotations

from .errors import SyntaxError_
from .lexer import Token, tokenize
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
from .values import NULL, Scalar, boolean, double, integer, string


class _Parser:
    def __init__(self, text: str, filename: str | None = None):
        self.toks = tokenize(text, filename)
        self.i = 0
        self.filename = filename

    # --- token plumbing ---------------------------------------------------

    def peek(self, ahead: int = 0) -> Token:
        j = min(self.i + ahead, len(self.toks) - 1)
        return self.toks[j]

    def next(self) -> Token:
        t = self.toks[self.i]
        if t.kind != "eof":
            self.i += 1
        return t

    def at_kw(self, *words: str) -> bool:
        t = self.peek()
        return t.kind == "keyword" and t.text in words

    def at_punct(self, *ps: str) -> bool:
        t = self.peek()
        return t.kind == "punct" and t.text in ps

    def accept_kw(self, word: str) -> bool:
        if self.at_kw(word):
            self.next()
            return True
        return False

    def accept_punct(self, p: str) -> bool:
        if self.at_punct(p):
            self.next()
            return True
        return False

    def expect_kw(self, word: str) -> Token:
        if not self.at_kw(word):
            raise self.error(f"expected {word.upper()}", expected=[word.upper()])
        return self.next()

    def expect_punct(self, p: str) -> Token:
        if not self.at_punct(p):
            raise self.error(f"expected {p!r}", expected=[p])
        return self.next()

    def expect_name(self, what: str = "identifier") -> Token:
        t = self.peek()
        if t.kind != "name":
            raise self.error(f"expected {what}", expected=["<identifier>"])
        return self.next()

    def error(self, msg: str, expected: list[str] | None = None) -> SyntaxError_:
        t = self.peek()
        found = t.text or "<eof>"
        return SyntaxError_(f"{msg}, found {found!r}", t.line, t.col,
                            self.filename, expected)

    def pos(self) -> tuple[int, int]:
        t = self.peek()
        return (t.line, t.col)

    def expect_eof(self) -> None:
        self.accept_punct(";")
        if self.peek().kind != "eof":
            raise self.error("unexpected trailing input")

    # --- queries ------------------------------------------------------------

    def parse_query(self) -> QueryNode:
        if self.at_kw("with"):
            p = self.pos()
            self.next()
            bindings = []
            while True:
                name = self.expect_name("view name").text
                self.expect_kw("as")
                self.expect_punct("(")
                q = self.parse_query()
                self.expect_punct(")")
                bindings.append((name, q))
                if not self.accept_punct(","):
                    break
            body = self.parse_query()
            return WithQuery(tuple(bindings), body, pos=p)
        return self.parse_union()

    def parse_union(self) -> QueryNode:
        left = self.parse_query_term()
        while True:
            p = self.pos()
            if self.at_kw("union"):
                self.next()
                all_ = self.accept_kw("all")
                right = self.parse_query_term()
                left = Union(left, right, all_, pos=p)
            elif self.at_kw("outer") and self.peek(1).kind == "keyword" \
                    and self.peek(1).text == "union":
                self.next()
                self.next()
                right = self.parse_query_term()
                left = OuterUnion(left, right, pos=p)
            else:
                return left

    def parse_query_term(self) -> QueryNode:
        if self.at_kw("select"):
            return self.parse_select_block()
        if self.at_punct("(") and self._paren_hides_query():
            self.expect_punct("(")
            q = self.parse_query()
            self.expect_punct(")")
            return q
        p = self.pos()
        return ExprQuery(self.parse_expr(), pos=p)

    def _paren_hides_query(self) -> bool:
        j = 0
        while self.peek(j).kind == "punct" and self.peek(j).text == "(":
            j += 1
        t = self.peek(j)
        return t.kind == "keyword" and t.text in ("select", "with")

    def parse_select_block(self) -> SelectBlock:
        p = self.pos()
        self.expect_kw("select")
        distinct = self.accept_kw("distinct")
        items = [self.parse_select_item()]
        while self.accept_punct(","):
            items.append(self.parse_select_item())

        from_items: list[FromItem] = []
        if self.accept_kw("from"):
            from_items.append(self.parse_from_item(None))
            while True:
                if self.accept_punct(","):
                    from_items.append(self.parse_from_item(None))
                elif self.at_kw("join", "inner"):
                    self.accept_kw("inner")
                    self.expect_kw("join")
                    from_items.append(self.parse_from_item("inner"))
                elif self.at_kw("left"):
                    self.next()
                    self.accept_kw("outer")
                    self.expect_kw("join")
                    from_items.append(self.parse_from_item("left"))
                else:
                    break

        where = None
        if self.accept_kw("where"):
            where = self.parse_expr()
        group_by: list[Node] = []
        if self.at_kw("group"):
            self.next()
            self.expect_kw("by")
            group_by.append(self.parse_expr())
            while self.accept_punct(","):
                group_by.append(self.parse_expr())
        order_by: list[OrderItem] = []
        if self.at_kw("order"):
            self.next()
            self.expect_kw("by")
            order_by.append(self.parse_order_item())
            while self.accept_punct(","):
                order_by.append(self.parse_order_item())
        limit = None
        if self.accept_kw("limit"):
            limit = self.parse_expr()
        return SelectBlock(tuple(items), tuple(from_items), where,
                           tuple(group_by), tuple(order_by), limit,
                           distinct, pos=p)

    def parse_select_item(self) -> SelectItem:
        p = self.pos()
        if self.at_punct("*"):
            self.next()
            return SelectItem(None, None, star_of="", pos=p)
        if self.peek().kind == "name" and self.peek(1).kind == "punct" \
                and self.peek(1).text == "." and self.peek(2).kind == "punct" \
                and self.peek(2).text == "*":
            alias = self.next().text
            self.next()
            self.next()
            return SelectItem(None, None, star_of=alias, pos=p)
        if self.at_kw("select"):
            expr: Node = SubQueryExpr(self.parse_select_block(), pos=p)
        else:
            expr = self.parse_expr()
        alias = None
        if self.accept_kw("as"):
            alias = self.expect_name("column alias").text
        elif self.peek().kind == "name":
            alias = self.next().text
        return SelectItem(expr, alias, pos=p)

    def parse_from_item(self, join_kind: str | None) -> FromItem:
        p = self.pos()
        if self.at_punct("("):
            self.expect_punct("(")
            q = self.parse_query()
            self.expect_punct(")")
            source: Node = SubQueryExpr(q, pos=p)
            default_alias = None
        else:
            source = self.parse_name_path()
            default_alias = source.parts[-1]  # type: ignore[union-attr]
        alias = None
        if self.accept_kw("as"):
            alias = self.expect_name("table alias").text
        elif self.peek().kind == "name":
            alias = self.next().text
        if alias is None:
            if default_alias is None:
                raise self.error("subquery in FROM needs an alias")
            alias = default_alias
        on = None
        if join_kind is not None:
            self.expect_kw("on")
            on = self.parse_expr()
        return FromItem(source, alias, join_kind, on, pos=p)

    def parse_order_item(self) -> OrderItem:
        p = self.pos()
        e = self.parse_expr()
        desc = False
        if self.accept_kw("desc"):
            desc = True
        else:
            self.accept_kw("asc")
        return OrderItem(e, desc, pos=p)

    # --- expressions -----------------------------------------------------------

    def parse_expr(self) -> Node:
        return self.parse_or()

    def parse_or(self) -> Node:
        left = self.parse_and()
        while self.at_kw("or"):
            p = self.pos()
            self.next()
            left = Binary("or", left, self.parse_and(), pos=p)
        return left

    def parse_and(self) -> Node:
        left = self.parse_not()
        while self.at_kw("and"):
            p = self.pos()
            self.next()
            left = Binary("and", left, self.parse_not(), pos=p)
        return left

    def parse_not(self) -> Node:
        if self.at_kw("not"):
            p = self.pos()
            self.next()
            return Unary("not", self.parse_not(), pos=p)
        return self.parse_comparison()

    def parse_comparison(self) -> Node:
        left = self.parse_concat()
        p = self.pos()
        if self.at_punct("=", "<>", "!=", "<", "<=", ">", ">="):
            op = self.next().text
            if op == "!=":
                op = "<>"
            return Binary(op, left, self.parse_concat(), pos=p)
        if self.at_kw("is"):
            self.next()
            negated = self.accept_kw("not")
            self.expect_kw("null")
            return IsNull(left, negated, pos=p)
        negated = False
        if self.at_kw("not") and self.peek(1).kind == "keyword" \
                and self.peek(1).text == "in":
            self.next()
            negated = True
        if self.at_kw("in"):
            self.next()
            self.expect_punct("(")
            if self.at_kw("select", "with"):
                q = self.parse_query()
                self.expect_punct(")")
                return InQuery(left, q, negated, pos=p)
            items = [self.parse_expr()]
            while self.accept_punct(","):
                items.append(self.parse_expr())
            self.expect_punct(")")
            return InList(left, tuple(items), negated, pos=p)
        if negated:
            raise self.error("expected IN after NOT")
        return left

    def parse_concat(self) -> Node:
        left = self.parse_additive()
        while self.at_punct("||"):
            p = self.pos()
            self.next()
            left = Binary("||", left, self.parse_additive(), pos=p)
        return left

    def parse_additive(self) -> Node:
        left = self.parse_multiplicative()
        while self.at_punct("+", "-"):
            p = self.pos()
            op = self.next().text
            left = Binary(op, left, self.parse_multiplicative(), pos=p)
        return left

    def parse_multiplicative(self) -> Node:
        left = self.parse_unary()
        while self.at_punct("*", "/"):
            p = self.pos()
            op = self.next().text
            left = Binary(op, left, self.parse_unary(), pos=p)
        return left

    def parse_unary(self) -> Node:
        if self.at_punct("-"):
            p = self.pos()
            self.next()
            return Unary("-", self.parse_unary(), pos=p)
        return self.parse_primary()

    def parse_primary(self) -> Node:
        t = self.peek()
        p = self.pos()
        if t.kind == "int":
            self.next()
            return Lit(integer(t.value), pos=p)  # type: ignore[arg-type]
        if t.kind == "double":
            self.next()
            return Lit(double(t.value), pos=p)  # type: ignore[arg-type]
        if t.kind == "string":
            self.next()
            return Lit(string(t.value), pos=p)  # type: ignore[arg-type]
        if self.at_kw("null"):
            self.next()
            return Lit(NULL, pos=p)
        if self.at_kw("true"):
            self.next()
            return Lit(boolean(True), pos=p)
        if self.at_kw("false"):
            self.next()
            return Lit(boolean(False), pos=p)
        if self.at_kw("exists"):
            self.next()
            self.expect_punct("(")
            q = self.parse_query()
            self.expect_punct(")")
            return Exists(q, pos=p)
        if self.at_punct("("):
            if self._paren_hides_query():
                self.next()
                q = self.parse_query()
                self.expect_punct(")")
                return SubQueryExpr(q, pos=p)
            self.next()
            e = self.parse_expr()
            self.expect_punct(")")
            return e
        if t.kind == "name":
            if self.peek(1).kind == "punct" and self.peek(1).text == "(":
                return self.parse_call()
            return self.parse_name_path()
        raise self.error("expected an expression")

    def parse_call(self) -> Node:
        p = self.pos()
        name = self.expect_name("function name").text
        self.expect_punct("(")
        args: list[Node] = []
        star = False
        if self.at_punct("*"):
            self.next()
            star = True
        elif not self.at_punct(")"):
            args.append(self.parse_call_arg())
            while self.accept_punct(","):
                args.append(self.parse_call_arg())
        self.expect_punct(")")
        return FuncCall(name, tuple(args), star, pos=p)

    def parse_call_arg(self) -> Node:
        # a bare SELECT is allowed as an argument and denotes a nested table
        if self.at_kw("select", "with"):
            p = self.pos()
            return SubQueryExpr(self.parse_query(), pos=p)
        return self.parse_expr()

    def parse_name_path(self) -> NamePath:
        p = self.pos()
        parts = [self.expect_name().text]
        while self.at_punct("."):
            nxt = self.peek(1)
            if nxt.kind == "name":
                self.next()
                parts.append(self.next().text)
            elif nxt.kind == "punct" and nxt.text == "#":
                self.next()
                self.next()
                parts.append("#")
            else:
                break
        return NamePath(tuple(parts), pos=p)

    # --- statements ----------------------------------------------------------------

    def parse_statement(self) -> Statement:
        p = self.pos()
        if self.at_kw("declare"):
            self.next()
            name = self.expect_name("variable name").text
            schema = None
            if self.peek().kind == "name":
                schema = self.next().text
            init = None
            if self.accept_punct(":="):
                init = self.parse_query()
            self.expect_punct(";")
            return Declare(name, schema, init, pos=p)
        if self.at_kw("insert"):
            self.next()
            self.expect_kw("into")
            target = self.parse_name_path()
            columns = None
            if self.at_punct("("):
                self.next()
                cols = [self.expect_name("column name").text]
                while self.accept_punct(","):
                    cols.append(self.expect_name("column name").text)
                self.expect_punct(")")
                columns = tuple(cols)
            if self.at_kw("values"):
                self.next()
                rows = [self.parse_values_row()]
                while self.accept_punct(","):
                    rows.append(self.parse_values_row())
                source: Node = ValuesSource(tuple(rows), pos=p)
            else:
                source = self.parse_query()
            self.expect_punct(";")
            return Insert(target, columns, source, pos=p)
        if self.at_kw("update"):
            self.next()
            target = self.parse_name_path()
            alias = None
            if self.peek().kind == "name":
                alias = self.next().text
            self.expect_kw("set")
            assigns = [self.parse_set_pair()]
            while self.accept_punct(","):
                assigns.append(self.parse_set_pair())
            where = None
            if self.accept_kw("where"):
                where = self.parse_expr()
            self.expect_punct(";")
            return Update(target, alias, tuple(assigns), where, pos=p)
        if self.at_kw("delete"):
            self.next()
            self.expect_kw("from")
            target = self.parse_name_path()
            alias = None
            if self.peek().kind == "name":
                alias = self.next().text
            where = None
            if self.accept_kw("where"):
                where = self.parse_expr()
            self.expect_punct(";")
            return Delete(target, alias, where, pos=p)
        if self.at_kw("if"):
            self.next()
            cond = self.parse_expr()
            self.expect_kw("then")
            then_body = self.parse_statements_until("else", "end")
            else_body: tuple[Statement, ...] = ()
            if self.accept_kw("else"):
                else_body = self.parse_statements_until("end")
            self.expect_kw("end")
            self.expect_kw("if")
            self.expect_punct(";")
            return If(cond, then_body, else_body, pos=p)
        if self.at_kw("for"):
            self.next()
            var = self.expect_name("loop variable").text
            self.expect_kw("in")
            self.expect_punct("(")
            q = self.parse_query()
            self.expect_punct(")")
            self.expect_kw("loop")
            body = self.parse_statements_until("end")
            self.expect_kw("end")
            self.expect_kw("loop")
            self.expect_punct(";")
            return For(var, q, body, pos=p)
        if self.at_kw("raise"):
            self.next()
            msg = self.parse_expr()
            self.expect_punct(";")
            return Raise(msg, pos=p)
        if self.at_kw("begin"):
            block = self.parse_block()
            self.expect_punct(";")
            return block
        if self.at_kw("return"):
            self.next()
            value = None
            if not self.at_punct(";"):
                value = self.parse_query()
            self.expect_punct(";")
            return Return(value, pos=p)
        if self.at_kw("call"):
            self.next()
            return self.parse_call_statement(p)
        if self.peek().kind == "name":
            if self.peek(1).kind == "punct" and self.peek(1).text == "(":
                return self.parse_call_statement(p)
            target = self.parse_name_path()
            self.expect_punct(":=")
            q = self.parse_query()
            self.expect_punct(";")
            return Assign(target, q, pos=p)
        raise self.error("expected a statement")

    def parse_call_statement(self, p: tuple[int, int]) -> Statement:
        call = self.parse_call()
        assert isinstance(call, FuncCall)
        self.expect_punct(";")
        if call.name == "next_page":
            if call.star or len(call.args) != 1:
                raise SyntaxError_("next_page takes exactly one argument",
                                   p[0], p[1], self.filename)
            return NextPage(call.args[0], pos=p)
        if call.star:
            raise SyntaxError_("'*' argument only valid in queries",
                               p[0], p[1], self.filename)
        return CallStmt(call.name, call.args, pos=p)

    def parse_values_row(self) -> tuple[Node, ...]:
        self.expect_punct("(")
        row = [self.parse_expr()]
        while self.accept_punct(","):
            row.append(self.parse_expr())
        self.expect_punct(")")
        return tuple(row)

    def parse_set_pair(self) -> tuple[str, Node]:
        name = self.expect_name("column name").text
        self.expect_punct("=")
        return (name, self.parse_expr())

    def parse_statements_until(self, *stop: str) -> tuple[Statement, ...]:
        out: list[Statement] = []
        while not self.at_kw(*stop):
            if self.peek().kind == "eof":
                raise self.error(f"expected {' or '.join(s.upper() for s in stop)}")
            out.append(self.parse_statement())
        return tuple(out)

    def parse_block(self) -> Block:
        p = self.pos()
        self.expect_kw("begin")
        body = self.parse_statements_until("exception", "end")
        handler = None
        if self.accept_kw("exception"):
            self.expect_kw("when")
            self.expect_kw("others")
            self.expect_kw("then")
            handler = self.parse_statements_until("end")
        self.expect_kw("end")
        return Block(body, handler, pos=p)

    # --- declarations -----------------------------------------------------------------

    def parse_program(self) -> list[FunctionDecl | ActionDecl]:
        decls: list[FunctionDecl | ActionDecl] = []
        while self.peek().kind != "eof":
            if self.at_kw("create"):
                decls.append(self.parse_function_decl())
            elif self.at_kw("define"):
                decls.append(self.parse_action_decl())
            else:
                raise self.error("expected CREATE FUNCTION or DEFINE ACTION")
        return decls

    def parse_function_decl(self) -> FunctionDecl:
        p = self.pos()
        self.expect_kw("create")
        self.expect_kw("function")
        name = self.expect_name("function name").text
        self.expect_punct("(")
        params: list[str] = []
        if not self.at_punct(")"):
            params.append(self.expect_name("parameter name").text)
            while self.accept_punct(","):
                params.append(self.expect_name("parameter name").text)
        self.expect_punct(")")
        if self.at_kw("immutable", "mutable"):
            mutability = self.next().text
        else:
            raise self.error("expected IMMUTABLE or MUTABLE",
                             expected=["IMMUTABLE", "MUTABLE"])
        self.expect_kw("as")
        body = self.parse_block()
        self.accept_punct(";")
        return FunctionDecl(name, tuple(params), mutability, body, pos=p)

    def parse_action_decl(self) -> ActionDecl:
        p = self.pos()
        self.expect_kw("define")
        self.expect_kw("action")
        url = self.parse_url_pattern()
        self.expect_kw("as")
        if self.at_kw("begin"):
            body = self.parse_block()
            self.accept_punct(";")
            fn_name = "action:" + url
            return ActionDecl(url, FunctionDecl(fn_name, (), "mutable", body),
                              pos=p)
        name = self.expect_name("function name").text
        self.accept_punct(";")
        return ActionDecl(url, name, pos=p)

    def parse_url_pattern(self) -> str:
        if not self.at_punct("/"):
            raise self.error("expected an action URL starting with '/'")
        parts: list[str] = []
        while self.at_punct("/"):
            self.next()
            if self.peek().kind == "name":
                parts.append(self.next().text)
            else:
                parts.append("")
        return "/" + "/".join(parts)


# --- public API ------------------------------------------------------------------


def parse_query(text: str, filename: str | None = None) -> QueryNode:
    p = _Parser(text, filename)
    q = p.parse_query()
    p.expect_eof()
    return q


def parse_expression(text: str, filename: str | None = None) -> Node:
    p = _Parser(text, filename)
    e = p.parse_expr()
    p.expect_eof()
    return e


def parse_statements(text: str, filename: str | None = None) -> tuple[Statement, ...]:
    p = _Parser(text, filename)
    out: list[Statement] = []
    while p.peek().kind != "eof":
        out.append(p.parse_statement())
    return tuple(out)


def parse_program(text: str, filename: str | None = None) -> list[FunctionDecl | ActionDecl]:
    return _Parser(text, filename).parse_program()
