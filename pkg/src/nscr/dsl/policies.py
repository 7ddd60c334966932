"""The ``.policies`` language, one policy per line.

    POLICY no_single_modality_alert HARD APPLIES * REQUIRE distinct_modalities(evidence) >= 2 ON VIOLATION defer
    POLICY asr_floor SOFT APPLIES confusion_candidate REQUIRE min_conf(evidence, language) >= 0.5 ON VIOLATION penalize
"""

from __future__ import annotations

from nscr.dsl.ast import COMPARE_OPS, POLICY_ATOMS, PolicyAst, PolicyAtom
from nscr.dsl.factfile import logical_lines
from nscr.dsl.lexer import ParseError, TokenStream, fmt_number
from nscr.facts import MODALITIES


def _threshold(ts: TokenStream) -> tuple[str, float]:
    op = ts.next()
    if op.text not in COMPARE_OPS:
        raise ts.error(op, f"expected a comparison, found {op.text or 'end of line'}", " ".join(COMPARE_OPS))
    num = ts.expect_kind("NUMBER", "threshold")
    return op.text, num.value  # type: ignore[return-value]


def _parse_atom(ts: TokenStream) -> PolicyAtom:
    name = ts.expect_kind("IDENT", "requirement")
    if name.text not in POLICY_ATOMS:
        raise ts.error(name, f"unknown requirement {name.text}", " / ".join(POLICY_ATOMS))
    if name.text == "evidence_count":
        op, th = _threshold(ts)
        return PolicyAtom("evidence_count", op, th)
    ts.expect("(")
    if name.text == "context_active":
        key = ts.expect_kind("IDENT", "context key")
        ts.expect(",")
        val = ts.next()
        if val.kind not in ("IDENT", "NUMBER"):
            raise ts.error(val, "expected a context value", "value")
        ts.expect(")")
        return PolicyAtom("context_active", key=key.text, value=val.text)
    subject = ts.expect_kind("IDENT", "evidence")
    if subject.text != "evidence":
        raise ts.error(subject, f"unknown evidence attribute {subject.text}", "evidence")
    modality = None
    if name.text == "min_conf":
        ts.expect(",")
        mtok = ts.expect_kind("IDENT", "modality")
        if mtok.text not in MODALITIES:
            raise ts.error(mtok, f"unknown modality {mtok.text}", " / ".join(sorted(MODALITIES)))
        modality = mtok.text
    ts.expect(")")
    op, th = _threshold(ts)
    if name.text == "min_conf" and not 0.0 <= th <= 1.0:
        raise ts.error(ts.tokens[ts.i - 1], "confidence out of range", "number in [0,1]")
    return PolicyAtom(name.text, op, th, modality=modality)


def _parse_policy(ts: TokenStream) -> PolicyAst:
    kw = ts.expect("POLICY")
    pid = ts.expect_kind("IDENT", "policy id")
    sev = ts.expect_kind("IDENT", "HARD or SOFT")
    if sev.text not in ("HARD", "SOFT"):
        raise ts.error(sev, f"severity must be HARD or SOFT, not {sev.text}", "HARD / SOFT")
    ts.expect("APPLIES")
    target = ts.next()
    if not (target.kind == "IDENT" or target.text == "*"):
        raise ts.error(target, "expected a construct name or *", "construct / *")
    ts.expect("REQUIRE")
    atoms = [_parse_atom(ts)]
    while ts.accept("AND"):
        atoms.append(_parse_atom(ts))
    ts.expect("ON")
    ts.expect("VIOLATION")
    action = ts.expect_kind("IDENT", "defer or penalize")
    if action.text not in ("defer", "penalize"):
        raise ts.error(action, f"unknown violation action {action.text}", "defer / penalize")
    if sev.text == "HARD" and action.text != "defer":
        raise ts.error(action, "hard policies must defer on violation", "defer")
    ts.expect_end()
    return PolicyAst(pid.text, sev.text.lower(), target.text, tuple(atoms), action.text, kw.span)


def parse_policies(text: str) -> tuple[list[PolicyAst], list[ParseError]]:
    policies: list[PolicyAst] = []
    errors: list[ParseError] = []
    ids: set[str] = set()
    for item in logical_lines(text):
        if isinstance(item, ParseError):
            errors.append(item)
            continue
        tokens, eol = item
        try:
            policy = _parse_policy(TokenStream(tokens, eol))
        except ParseError as err:
            errors.append(err)
            continue
        if policy.id in ids:
            errors.append(ParseError(tokens[1].span, f"duplicate policy id {policy.id}"))
            continue
        ids.add(policy.id)
        policies.append(policy)
    return policies, errors


def _fmt_atom(a: PolicyAtom) -> str:
    if a.kind == "evidence_count":
        return f"evidence_count {a.op} {fmt_number(a.threshold)}"  # type: ignore[arg-type]
    if a.kind == "context_active":
        return f"context_active({a.key}, {a.value})"
    inner = "evidence" if a.modality is None else f"evidence, {a.modality}"
    return f"{a.kind}({inner}) {a.op} {fmt_number(a.threshold)}"  # type: ignore[arg-type]


def serialize_policy(p: PolicyAst) -> str:
    req = " AND ".join(_fmt_atom(a) for a in p.requirement)
    return (f"POLICY {p.id} {p.severity.upper()} APPLIES {p.applies_to} REQUIRE {req} "
            f"ON VIOLATION {p.on_violation}\n")


def serialize_policies(policies: list[PolicyAst]) -> str:
    return "".join(serialize_policy(p) for p in policies)
