"""Line tokenizer shared by the fact, rule, policy and query languages."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field


@dataclass(frozen=True)
class SourceSpan:
    line: int
    column: int
    length: int

    def __str__(self) -> str:
        return f"{self.line}:{self.column}"


class ParseError(Exception):
    """A located syntax or static-check error. Parsers collect these; ``parse_query`` raises it."""

    def __init__(self, span: SourceSpan, message: str, expected: str | None = None) -> None:
        assert message
        super().__init__(message)
        self.span = span
        self.message = message
        self.expected = expected

    def __str__(self) -> str:
        hint = f" (expected {self.expected})" if self.expected else ""
        return f"{self.span}: {self.message}{hint}"

    def __repr__(self) -> str:
        return f"ParseError({self.span!s}, {self.message!r})"


@dataclass(frozen=True)
class Token:
    kind: str  # IDENT NUMBER STRING OP EOL
    text: str
    span: SourceSpan = field(compare=False)

    @property
    def value(self) -> object:
        if self.kind == "NUMBER":
            return float(self.text) if any(c in self.text for c in ".eE") else int(self.text)
        if self.kind == "STRING":
            return json.loads(self.text)
        return self.text


_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<STRING>"(?:[^"\\]|\\.)*")
  | (?P<NUMBER>-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?(?![A-Za-z_]))
  | (?P<IDENT>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<OP>>=|<=|==|!=|[()\[\],:.?*{}=<>+\-])
    """,
    re.VERBOSE,
)


def tokenize_line(text: str, line_no: int) -> list[Token]:
    """Tokenize one physical line. Raises ParseError on a character no token accepts."""
    out: list[Token] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ParseError(SourceSpan(line_no, pos + 1, 1), f"unexpected character {text[pos]!r}")
        kind = m.lastgroup
        if kind != "ws":
            out.append(Token(kind, m.group(), SourceSpan(line_no, pos + 1, m.end() - pos)))
        pos = m.end()
    return out


def eol_token(tokens: list[Token], line_no: int, line_text: str) -> Token:
    col = len(line_text.rstrip()) + 1
    if tokens:
        last = tokens[-1].span
        line_no, col = last.line, last.column + last.length
    return Token("EOL", "", SourceSpan(line_no, col, 0))


def strip_comment(text: str) -> str:
    return "" if text.lstrip().startswith("#") else text


class TokenStream:
    """Cursor over the tokens of one logical line."""

    def __init__(self, tokens: list[Token], eol: Token) -> None:
        self.tokens = tokens
        self.eol = eol
        self.i = 0

    def peek(self, k: int = 0) -> Token:
        j = self.i + k
        return self.tokens[j] if j < len(self.tokens) else self.eol

    def next(self) -> Token:
        tok = self.peek()
        self.i += 1
        return tok

    def at_end(self) -> bool:
        return self.i >= len(self.tokens)

    def accept(self, text: str) -> Token | None:
        tok = self.peek()
        if tok.kind in ("OP", "IDENT") and tok.text == text:
            self.i += 1
            return tok
        return None

    def expect(self, text: str, what: str | None = None) -> Token:
        tok = self.peek()
        if tok.kind in ("OP", "IDENT") and tok.text == text:
            self.i += 1
            return tok
        raise self.error(tok, f"expected {what or repr(text)}, found {describe(tok)}", what or repr(text))

    def expect_kind(self, kind: str, what: str) -> Token:
        tok = self.peek()
        if tok.kind != kind:
            raise self.error(tok, f"expected {what}, found {describe(tok)}", what)
        self.i += 1
        return tok

    def expect_end(self) -> None:
        if not self.at_end():
            tok = self.peek()
            raise self.error(tok, f"unexpected {describe(tok)} after end of statement", "end of line")

    @staticmethod
    def error(tok: Token, message: str, expected: str | None = None) -> ParseError:
        span = tok.span if tok.span.length > 0 else SourceSpan(tok.span.line, tok.span.column, 0)
        return ParseError(span, message, expected)


def describe(tok: Token) -> str:
    return "end of line" if tok.kind == "EOL" else repr(tok.text)


IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


def is_ident(s: str) -> bool:
    return bool(IDENT_RE.match(s))


def fmt_number(x: float | int) -> str:
    return str(x) if isinstance(x, int) else repr(float(x))


def fmt_conf(c: float) -> str:
    """At least two decimals; full precision when two decimals would lose information."""
    s = f"{c:.2f}"
    return s if float(s) == c else repr(float(c))
