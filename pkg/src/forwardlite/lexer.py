"""Tokenizer shared by the query and procedure parsers.

Keywords are case-insensitive; identifiers keep their case.  String literals
are single-quoted with '' as the escape for a quote.  Comments run from --
to end of line.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import SyntaxError_

KEYWORDS = frozenset({
    "select", "distinct", "from", "where", "group", "by", "having",
    "order", "asc", "desc", "limit", "union", "all", "outer", "as", "on",
    "join", "inner", "left", "and", "or", "not", "is", "null", "true",
    "false", "exists", "in", "with",
    "declare", "begin", "end", "if", "then", "else", "for", "loop",
    "insert", "into", "values", "update", "set", "delete", "raise",
    "exception", "when", "others", "call", "return",
    "create", "function", "immutable", "mutable", "define", "action",
})

PUNCT = (
    ":=", "<=", ">=", "<>", "!=", "||",
    "+", "-", "*", "/", "=", "<", ">", "(", ")", ",", ".", ";", "#",
)


@dataclass(frozen=True)
class Token:
    kind: str      # keyword | name | int | double | string | punct | eof
    text: str      # raw text (keywords lowercased)
    value: object  # decoded value for literals
    line: int
    col: int

    def __repr__(self) -> str:
        return f"<{self.kind} {self.text!r} @{self.line}:{self.col}>"


def tokenize(text: str, filename: str | None = None) -> list[Token]:
    toks: list[Token] = []
    i, n = 0, len(text)
    line, col = 1, 1

    def err(msg: str) -> SyntaxError_:
        return SyntaxError_(msg, line, col, filename)

    def advance(k: int) -> None:
        nonlocal i, line, col
        for _ in range(k):
            if text[i] == "\n":
                line += 1
                col = 1
            else:
                col += 1
            i += 1

    while i < n:
        c = text[i]
        if c in " \t\r\n":
            advance(1)
            continue
        if c == "-" and text.startswith("--", i):
            while i < n and text[i] != "\n":
                advance(1)
            continue
        start_line, start_col = line, col
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            word = text[i:j]
            advance(j - i)
            low = word.lower()
            if low in KEYWORDS:
                toks.append(Token("keyword", low, None, start_line, start_col))
            else:
                toks.append(Token("name", word, word, start_line, start_col))
            continue
        if c.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            is_double = False
            if j < n and text[j] == "." and j + 1 < n and text[j + 1].isdigit():
                is_double = True
                j += 1
                while j < n and text[j].isdigit():
                    j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    is_double = True
                    j = k
                    while j < n and text[j].isdigit():
                        j += 1
            word = text[i:j]
            advance(j - i)
            if is_double:
                toks.append(Token("double", word, float(word),
                                  start_line, start_col))
            else:
                toks.append(Token("int", word, int(word),
                                  start_line, start_col))
            continue
        if c == "'":
            j = i + 1
            buf: list[str] = []
            while True:
                if j >= n:
                    raise err("unterminated string literal")
                if text[j] == "'":
                    if j + 1 < n and text[j + 1] == "'":
                        buf.append("'")
                        j += 2
                        continue
                    j += 1
                    break
                buf.append(text[j])
                j += 1
            advance(j - i)
            toks.append(Token("string", text[i:j], "".join(buf),
                              start_line, start_col))
            continue
        for p in PUNCT:
            if text.startswith(p, i):
                advance(len(p))
                toks.append(Token("punct", p, None, start_line, start_col))
                break
        else:
            raise err(f"unexpected character {c!r}")
    toks.append(Token("eof", "", None, line, col))
    return toks
