"""The ``.rules`` language.

    RULE confusion_candidate
      CONCLUDE confusion_candidate(S)
      MATCH q: EVENT(teacher, open_question, ?)
      MATCH a: EVENT(S, failed_attempt, ?) CONF >= 0.3
      ABSENT EVENT(S, correct_attempt, ?) WITHIN [a.end, h.start]
      WHERE within(q, a, 20)
      WHERE a.conf >= 0.2 SOFT
      WEIGHT a 2.0
    END

Capitalised pattern terms are variables, ``?`` is a wildcard, anything else
is a constant.
"""

from __future__ import annotations

from nscr.dsl.ast import (
    COMPARE_OPS,
    FIELDS,
    TEMPORAL_OPS,
    WILD,
    AbsentClause,
    Bound,
    Compare,
    Constraint,
    MatchClause,
    Pattern,
    RuleAst,
    Temporal,
    Term,
    Var,
    Where,
    Wild,
)
from nscr.dsl.factfile import logical_lines
from nscr.dsl.lexer import ParseError, Token, TokenStream, fmt_number


def is_variable(name: str) -> bool:
    return name[:1].isupper()


def parse_term(ts: TokenStream) -> Term:
    tok = ts.next()
    if tok.kind == "OP" and tok.text == "?":
        return WILD
    if tok.kind == "NUMBER":
        return tok.value  # type: ignore[return-value]
    if tok.kind == "IDENT":
        return Var(tok.text) if is_variable(tok.text) else tok.text
    raise ts.error(tok, f"expected a pattern term, found {tok.text or 'end of line'}", "variable, constant or ?")


def parse_pattern(ts: TokenStream) -> tuple[Pattern, dict[str, Token]]:
    """Parse ``PRED(t, ...)``; also returns the first token of each variable for diagnostics."""
    head = ts.expect_kind("IDENT", "predicate name")
    ts.expect("(")
    terms: list[Term] = []
    var_tokens: dict[str, Token] = {}
    while True:
        tok = ts.peek()
        term = parse_term(ts)
        if isinstance(term, Var):
            var_tokens.setdefault(term.name, tok)
        terms.append(term)
        if not ts.accept(","):
            break
    ts.expect(")")
    return Pattern(head.text, tuple(terms), head.span), var_tokens


def parse_literal(ts: TokenStream) -> str | int | float:
    tok = ts.next()
    if tok.kind == "NUMBER" or tok.kind == "IDENT":
        return tok.value  # type: ignore[return-value]
    raise ts.error(tok, "expected a number or symbol", "literal")


def parse_constraint(ts: TokenStream) -> tuple[Constraint, list[Token]]:
    """Parse a temporal predicate or a field comparison; returns alias tokens for checking."""
    first = ts.expect_kind("IDENT", "constraint")
    if ts.peek().text == "(":
        if first.text not in TEMPORAL_OPS:
            raise ts.error(first, f"unknown temporal relation {first.text}", " / ".join(TEMPORAL_OPS))
        ts.expect("(")
        left = ts.expect_kind("IDENT", "alias")
        ts.expect(",")
        right = ts.expect_kind("IDENT", "alias")
        width = None
        if first.text == "within":
            ts.expect(",", "window width")
            wtok = ts.expect_kind("NUMBER", "window width")
            if not isinstance(wtok.value, int) or wtok.value < 0:
                raise ts.error(wtok, "window width must be a non-negative integer", "ticks")
            width = wtok.value
        ts.expect(")")
        return Temporal(first.text, left.text, right.text, width), [left, right]
    ts.expect(".", "'.' or '('")
    fld = ts.expect_kind("IDENT", "field")
    if fld.text not in FIELDS:
        raise ts.error(fld, f"unknown field {fld.text}", " / ".join(FIELDS))
    op = ts.next()
    if op.text not in COMPARE_OPS:
        raise ts.error(op, f"expected a comparison, found {op.text or 'end of line'}", " ".join(COMPARE_OPS))
    lit_tok = ts.peek()
    lit = parse_literal(ts)
    if fld.text != "value" and not isinstance(lit, (int, float)):
        raise ts.error(lit_tok, f"{fld.text} compares against numbers", "number")
    return Compare(first.text, fld.text, op.text, lit), [first]


def _parse_bound(ts: TokenStream) -> tuple[Bound, Token | None]:
    tok = ts.peek()
    if tok.kind == "NUMBER":
        ts.next()
        if not isinstance(tok.value, int) or tok.value < 0:
            raise ts.error(tok, "absolute scope bounds are non-negative ticks", "tick")
        return Bound(None, None, tok.value), None
    alias = ts.expect_kind("IDENT", "alias or tick")
    ts.expect(".")
    fld = ts.expect_kind("IDENT", "start or end")
    if fld.text not in ("start", "end"):
        raise ts.error(fld, f"scope bounds use start or end, not {fld.text}", "start / end")
    offset = 0
    nxt = ts.peek()
    if nxt.text in ("+", "-"):
        ts.next()
        num = ts.expect_kind("NUMBER", "offset")
        if not isinstance(num.value, int) or num.value < 0:
            raise ts.error(num, "offset must be a non-negative integer", "ticks")
        offset = num.value if nxt.text == "+" else -num.value
    elif nxt.kind == "NUMBER" and nxt.text.startswith("-"):
        ts.next()
        if not isinstance(nxt.value, int):
            raise ts.error(nxt, "offset must be an integer", "ticks")
        offset = nxt.value
    return Bound(alias.text, fld.text, offset), alias


class _RuleBuilder:
    def __init__(self, name: Token) -> None:
        self.name = name
        self.head: tuple[str, ...] | None = None
        self.construct: str | None = None
        self.head_tokens: dict[str, Token] = {}
        self.conclude_tok: Token | None = None
        self.matches: list[MatchClause] = []
        self.absents: list[AbsentClause] = []
        self.wheres: list[Where] = []
        self.weights: list[tuple[str, float]] = []
        self.weight_tokens: list[Token] = []
        self.floor: float | None = None
        self.alias_refs: list[Token] = []
        self.bound_vars: set[str] = set()
        self.broken = False

    def statement(self, kw: Token, ts: TokenStream) -> None:
        k = kw.text
        if k == "CONCLUDE":
            if self.head is not None:
                raise ts.error(kw, "rule has more than one CONCLUDE")
            cons = ts.expect_kind("IDENT", "construct name")
            ts.expect("(")
            names: list[str] = []
            while True:
                v = ts.expect_kind("IDENT", "variable")
                if not is_variable(v.text):
                    raise ts.error(v, f"conclusion arguments are variables, {v.text} is a constant", "Variable")
                if v.text in names:
                    raise ts.error(v, f"variable {v.text} repeated in conclusion")
                names.append(v.text)
                self.head_tokens[v.text] = v
                if not ts.accept(","):
                    break
            ts.expect(")")
            self.head, self.construct, self.conclude_tok = tuple(names), cons.text, cons
        elif k == "MATCH":
            alias = ts.expect_kind("IDENT", "clause alias")
            if alias.text in ("this", "anchor"):
                raise ts.error(alias, f"{alias.text} is reserved")
            if any(m.alias == alias.text for m in self.matches):
                raise ts.error(alias, f"duplicate alias {alias.text}")
            ts.expect(":")
            pattern, var_tokens = parse_pattern(ts)
            floor = None
            if ts.accept("CONF"):
                ts.expect(">=")
                ftok = ts.expect_kind("NUMBER", "confidence floor")
                floor = float(ftok.value)
                if not 0.0 <= floor <= 1.0:
                    raise ts.error(ftok, "confidence out of range", "number in [0,1]")
            self.matches.append(MatchClause(alias.text, pattern, floor, alias.span))
            self.bound_vars.update(var_tokens)
        elif k == "ABSENT":
            pattern, _ = parse_pattern(ts)
            ts.expect("WITHIN")
            if ts.accept("["):
                lo, lo_tok = _parse_bound(ts)
                ts.expect(",")
                hi, hi_tok = _parse_bound(ts)
                ts.expect("]")
                self.alias_refs.extend(t for t in (lo_tok, hi_tok) if t is not None)
            else:
                a = ts.expect_kind("IDENT", "alias or [lo, hi]")
                lo, hi = Bound(a.text, "start"), Bound(a.text, "end")
                self.alias_refs.append(a)
            self.absents.append(AbsentClause(pattern, lo, hi, kw.span))
        elif k == "WHERE":
            constraint, alias_tokens = parse_constraint(ts)
            soft = ts.accept("SOFT") is not None
            self.wheres.append(Where(constraint, soft, kw.span))
            self.alias_refs.extend(alias_tokens)
        elif k == "WEIGHT":
            alias = ts.expect_kind("IDENT", "clause alias")
            wtok = ts.expect_kind("NUMBER", "weight")
            if any(a == alias.text for a, _ in self.weights):
                raise ts.error(alias, f"weight for {alias.text} given twice")
            self.weights.append((alias.text, float(wtok.value)))
            self.weight_tokens.append(alias)
        elif k == "FLOOR":
            if self.floor is not None:
                raise ts.error(kw, "rule has more than one FLOOR")
            ftok = ts.expect_kind("NUMBER", "confidence floor")
            if not 0.0 <= float(ftok.value) <= 1.0:
                raise ts.error(ftok, "confidence out of range", "number in [0,1]")
            self.floor = float(ftok.value)
        else:
            raise ts.error(kw, f"unknown rule statement {k}", "CONCLUDE/MATCH/ABSENT/WHERE/WEIGHT/FLOOR/END")
        ts.expect_end()

    def finish(self) -> tuple[RuleAst | None, list[ParseError]]:
        if self.broken:
            # the statement error is already reported; missing pieces would only cascade
            return None, []
        errs: list[ParseError] = []
        if self.head is None:
            errs.append(ParseError(self.name.span, f"rule {self.name.text} has no CONCLUDE", "CONCLUDE"))
        if not self.matches:
            errs.append(ParseError(self.name.span, f"rule {self.name.text} has no MATCH clause", "MATCH"))
        for var, tok in self.head_tokens.items():
            if var not in self.bound_vars:
                errs.append(ParseError(tok.span, f"unbound variable {var}", "variable bound by a MATCH clause"))
        aliases = {m.alias for m in self.matches}
        for tok in self.alias_refs + self.weight_tokens:
            if tok.text not in aliases:
                errs.append(ParseError(tok.span, f"unknown alias {tok.text}", "MATCH alias"))
        if errs:
            return None, errs
        assert self.head is not None and self.construct is not None
        return RuleAst(self.name.text, self.construct, self.head, tuple(self.matches), tuple(self.absents),
                       tuple(self.wheres), tuple(self.weights), self.floor, self.name.span), []


def parse_rules(text: str) -> tuple[list[RuleAst], list[ParseError]]:
    """Parse rule text. A rule with any error is dropped; parsing resumes at the next statement."""
    rules: list[RuleAst] = []
    errors: list[ParseError] = []
    names: set[str] = set()
    current: _RuleBuilder | None = None
    for item in logical_lines(text):
        if isinstance(item, ParseError):
            errors.append(item)
            if current is not None:
                current.broken = True
            continue
        tokens, eol = item
        ts = TokenStream(tokens, eol)
        kw = ts.next()
        try:
            if kw.text == "RULE" and kw.kind == "IDENT":
                if current is not None:
                    errors.append(ParseError(current.name.span, f"rule {current.name.text} is missing END", "END"))
                name = ts.expect_kind("IDENT", "rule name")
                ts.expect_end()
                current = _RuleBuilder(name)
                if name.text in names:
                    errors.append(ParseError(name.span, f"duplicate rule name {name.text}"))
                    current.broken = True
                names.add(name.text)
            elif kw.text == "END" and kw.kind == "IDENT":
                ts.expect_end()
                if current is None:
                    raise ts.error(kw, "END without RULE")
                rule, errs = current.finish()
                errors.extend(errs)
                if rule is not None:
                    rules.append(rule)
                current = None
            elif current is None:
                raise ts.error(kw, f"expected RULE, found {kw.text!r}", "RULE")
            else:
                current.statement(kw, ts)
        except ParseError as err:
            errors.append(err)
            if current is not None:
                current.broken = True
    if current is not None:
        errors.append(ParseError(current.name.span, f"rule {current.name.text} is missing END", "END"))
    return rules, errors


# -- serialization ------------------------------------------------------------------


def fmt_term(t: Term) -> str:
    if isinstance(t, Var):
        return t.name
    if isinstance(t, Wild):
        return "?"
    if isinstance(t, str):
        return t
    return fmt_number(t)  # type: ignore[arg-type]


def fmt_pattern(p: Pattern) -> str:
    return f"{p.predicate}({', '.join(fmt_term(t) for t in p.terms)})"


def fmt_literal(v: str | int | float) -> str:
    return v if isinstance(v, str) else fmt_number(v)


def fmt_constraint(c: Constraint) -> str:
    if isinstance(c, Temporal):
        extra = f", {c.width}" if c.width is not None else ""
        return f"{c.op}({c.left}, {c.right}{extra})"
    return f"{c.alias}.{c.field} {c.op} {fmt_literal(c.literal)}"


def fmt_bound(b: Bound) -> str:
    if b.alias is None:
        return str(b.offset)
    base = f"{b.alias}.{b.field}"
    if b.offset > 0:
        return f"{base} + {b.offset}"
    if b.offset < 0:
        return f"{base} - {-b.offset}"
    return base


def serialize_rule(rule: RuleAst) -> str:
    lines = [f"RULE {rule.name}", f"  CONCLUDE {rule.construct}({', '.join(rule.head)})"]
    if rule.floor is not None:
        lines.append(f"  FLOOR {fmt_number(rule.floor)}")
    for m in rule.matches:
        floor = f" CONF >= {fmt_number(m.conf_floor)}" if m.conf_floor is not None else ""
        lines.append(f"  MATCH {m.alias}: {fmt_pattern(m.pattern)}{floor}")
    for a in rule.absents:
        lines.append(f"  ABSENT {fmt_pattern(a.pattern)} WITHIN [{fmt_bound(a.lo)}, {fmt_bound(a.hi)}]")
    for w in rule.wheres:
        lines.append(f"  WHERE {fmt_constraint(w.constraint)}{' SOFT' if w.soft else ''}")
    for alias, weight in rule.weights:
        lines.append(f"  WEIGHT {alias} {fmt_number(weight)}")
    lines.append("END")
    return "\n".join(lines) + "\n"


def serialize_rules(rules: list[RuleAst]) -> str:
    return "\n".join(serialize_rule(r) for r in rules)

