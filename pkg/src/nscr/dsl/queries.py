"""The aggregation query language: a single pattern behind a closed operator whitelist.

    COUNT_DISTINCT actor FROM EVENT(?, help_request, ?) WHERE after(this, anchor)
    RANK group BY balance FROM EVENT(?, speak_turn, ?)
"""

from __future__ import annotations

from nscr.dsl.ast import QUERY_OPERATORS, RANK_KEYS, QueryAst
from nscr.dsl.factfile import logical_lines
from nscr.dsl.lexer import ParseError, SourceSpan, TokenStream
from nscr.dsl.rules import fmt_constraint, fmt_pattern, parse_constraint, parse_pattern

QUERY_ALIASES = ("this", "anchor")


def parse_query(text: str) -> QueryAst:
    """Parse one query. Raises ParseError; non-whitelisted operators are rejected."""
    items = list(logical_lines(text))
    if not items:
        raise ParseError(SourceSpan(1, 1, 0), "empty query", " / ".join(QUERY_OPERATORS))
    first = items[0]
    if isinstance(first, ParseError):
        raise first
    if len(items) > 1:
        extra = items[1]
        span = extra.span if isinstance(extra, ParseError) else extra[0][0].span
        raise ParseError(span, "a query is a single statement", "end of input")
    tokens, eol = first
    ts = TokenStream(tokens, eol)
    op = ts.next()
    if op.text not in QUERY_OPERATORS:
        raise ts.error(op, f"operator not permitted: {op.text}", " / ".join(QUERY_OPERATORS))
    target = ts.expect_kind("IDENT", "target role")
    rank_key = None
    if op.text == "RANK":
        ts.expect("BY")
        key = ts.expect_kind("IDENT", "count or balance")
        if key.text not in RANK_KEYS:
            raise ts.error(key, f"unknown rank key {key.text}", " / ".join(RANK_KEYS))
        rank_key = key.text
    ts.expect("FROM")
    pattern, var_tokens = parse_pattern(ts)
    if var_tokens:
        tok = next(iter(var_tokens.values()))
        raise ts.error(tok, "query patterns take constants and ? only", "constant or ?")
    wheres = []
    if ts.accept("WHERE"):
        while True:
            constraint, alias_tokens = parse_constraint(ts)
            for t in alias_tokens:
                if t.text not in QUERY_ALIASES:
                    raise ts.error(t, f"unknown reference {t.text}", "this / anchor")
            wheres.append(constraint)
            if not ts.accept("AND"):
                break
    ts.expect_end()
    return QueryAst(op.text, target.text, pattern, tuple(wheres), rank_key, op.span)


def serialize_query(q: QueryAst) -> str:
    parts = [q.operator, q.target]
    if q.rank_key is not None:
        parts += ["BY", q.rank_key]
    parts += ["FROM", fmt_pattern(q.pattern)]
    if q.wheres:
        parts += ["WHERE", " AND ".join(fmt_constraint(c) for c in q.wheres)]
    return " ".join(parts) + "\n"


def parse_query_file(text: str) -> tuple[list[QueryAst], list[ParseError]]:
    """Parse a ``.query`` file holding one query per line."""
    queries, errors = [], []
    for n, line in enumerate(text.split("\n"), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            q = parse_query(line)
        except ParseError as err:
            errors.append(ParseError(SourceSpan(n, err.span.column, err.span.length), err.message, err.expected))
            continue
        queries.append(q)
    return queries, errors
