"""The ``.facts`` text format: one positional fact per line.

    OBS(student_4, gaze_target, worksheet, 241, 0.81)
    EVENT(teacher, open_question, group_2, [235,238], 0.96) {source="asr", raw_ref="cam2#235"}

A trailing ``{...}`` block carries id and provenance when they differ from
the defaults. A line ending in a comma continues on the next line.
"""

from __future__ import annotations

import json
from typing import Iterable, Iterator

from nscr.dsl.lexer import (
    ParseError,
    Token,
    TokenStream,
    eol_token,
    fmt_conf,
    fmt_number,
    strip_comment,
    tokenize_line,
)
from nscr.facts import (
    HAS_CONF,
    HAS_TIME,
    HAS_VALUE,
    MODALITIES,
    Fact,
    Provenance,
    SchemaRegistry,
    TimeRef,
    content_id,
    default_registry,
    unique_id,
)

DEFAULT_SOURCE = "fact_file"
_META_KEYS = ("id", "source", "modality", "raw_ref")


def logical_lines(text: str) -> Iterator[tuple[list[Token], Token] | ParseError]:
    """Yield (tokens, eol) per non-blank logical line, joining comma continuations.

    A line the tokenizer rejects is yielded as its ParseError.
    """
    lines = text.split("\n")
    i = 0
    while i < len(lines):
        tokens: list[Token] = []
        raw = strip_comment(lines[i])
        try:
            tokens.extend(tokenize_line(raw, i + 1))
            while tokens and tokens[-1].text == "," and i + 1 < len(lines):
                i += 1
                raw = strip_comment(lines[i])
                tokens.extend(tokenize_line(raw, i + 1))
        except ParseError as err:
            i += 1
            yield err
            continue
        eol = eol_token(tokens, i + 1, raw)
        i += 1
        if tokens:
            yield tokens, eol


def _parse_time(ts: TokenStream) -> TimeRef:
    tok = ts.peek()
    if tok.kind == "NUMBER":
        ts.next()
        if not isinstance(tok.value, int) or tok.value < 0:
            raise ts.error(tok, "time must be a non-negative integer tick", "tick")
        return TimeRef.at(tok.value)
    if ts.accept("["):
        a = ts.expect_kind("NUMBER", "start tick")
        ts.expect(",")
        b = ts.expect_kind("NUMBER", "end tick")
        ts.expect("]")
        for t in (a, b):
            if not isinstance(t.value, int) or t.value < 0:
                raise ts.error(t, "time must be a non-negative integer tick", "tick")
        if b.value < a.value:
            raise ts.error(b, "interval end precedes start", "end >= start")
        return TimeRef(a.value, b.value)
    raise ts.error(tok, "expected a tick or [start,end] interval", "time")


def _parse_fact_line(ts: TokenStream, registry: SchemaRegistry, seen: set[str]) -> Fact:
    head = ts.expect_kind("IDENT", "predicate name")
    pred = head.text
    if not registry.is_known(pred):
        raise ts.error(head, f"unregistered predicate {pred}", "registered predicate")
    spec = registry.spec(pred)
    fam = spec.family
    ts.expect("(")
    args: list[str] = []
    for _ in range(spec.arity):
        if args:
            ts.expect(",")
        tok = ts.expect_kind("IDENT", f"{spec.roles[len(args)]} symbol")
        args.append(tok.text)
    value = None
    if HAS_VALUE[fam]:
        ts.expect(",")
        tok = ts.next()
        if tok.kind not in ("IDENT", "NUMBER"):
            raise ts.error(tok, f"expected a value, found {tok.text or 'end of line'}", "value")
        value = tok.value
    time = TimeRef.at(0)
    if HAS_TIME[fam]:
        ts.expect(",")
        time = _parse_time(ts)
    conf = 1.0
    if HAS_CONF[fam]:
        ts.expect(",")
        tok = ts.expect_kind("NUMBER", "confidence")
        conf = float(tok.value)
        if not 0.0 <= conf <= 1.0:
            raise ts.error(tok, "confidence out of range", "number in [0,1]")
    tok = ts.peek()
    if tok.text == ",":
        raise ts.error(tok, f"too many fields for {pred}", "')'")
    ts.expect(")")
    meta: dict[str, str] = {}
    if ts.accept("{"):
        while True:
            key = ts.expect_kind("IDENT", "metadata key")
            if key.text not in _META_KEYS:
                raise ts.error(key, f"unknown metadata key {key.text}", "/".join(_META_KEYS))
            if key.text in meta:
                raise ts.error(key, f"duplicate metadata key {key.text}")
            ts.expect("=")
            val = ts.next()
            if val.kind not in ("STRING", "IDENT"):
                raise ts.error(val, "metadata values are strings", "string")
            meta[key.text] = str(val.value)
            if key.text == "modality" and meta["modality"] not in MODALITIES:
                raise ts.error(val, f"unknown modality {meta['modality']}", "modality")
            if key.text == "source" and not meta["source"]:
                raise ts.error(val, "provenance source is empty")
            if not ts.accept(","):
                break
        ts.expect("}")
    ts.expect_end()
    source = meta.get("source", DEFAULT_SOURCE)
    modality = meta.get("modality", registry.default_modality(pred))
    if "id" in meta:
        fid = meta["id"]
        if fid in seen:
            raise ts.error(head, f"duplicate fact id {fid}")
        seen.add(fid)
    else:
        fid = unique_id(content_id(pred, args, value, time, conf, source, modality), seen)
    return Fact(fid, pred, fam, tuple(args), value, time, conf, Provenance(source, modality, meta.get("raw_ref")))


def parse_facts(text: str, registry: SchemaRegistry | None = None) -> tuple[list[Fact], list[ParseError]]:
    """Parse fact text. Each malformed logical line yields one error; parsing continues."""
    registry = registry or default_registry()
    facts: list[Fact] = []
    errors: list[ParseError] = []
    seen: set[str] = set()
    for item in logical_lines(text):
        if isinstance(item, ParseError):
            errors.append(item)
            continue
        tokens, eol = item
        try:
            facts.append(_parse_fact_line(TokenStream(tokens, eol), registry, seen))
        except ParseError as err:
            errors.append(err)
    return facts, errors


def _fmt_sym(v: object) -> str:
    return v if isinstance(v, str) else fmt_number(v)  # type: ignore[arg-type]


def _fmt_time(t: TimeRef) -> str:
    return str(t.start) if t.is_instant else f"[{t.start},{t.end}]"


def _quote(s: str) -> str:
    return json.dumps(s, ensure_ascii=False)


def fact_core(fact: Fact) -> str:
    parts = list(fact.args)
    fam = fact.family
    if HAS_VALUE[fam]:
        parts.append(_fmt_sym(fact.value))
    if HAS_TIME[fam]:
        parts.append(_fmt_time(fact.time))
    if HAS_CONF[fam]:
        parts.append(fmt_conf(fact.conf))
    return f"{fact.predicate}({', '.join(parts)})"


def serialize_fact(fact: Fact, registry: SchemaRegistry | None = None) -> str:
    registry = registry or default_registry()
    meta = []
    default_id = content_id(fact.predicate, fact.args, fact.value, fact.time, fact.conf,
                            fact.prov.source, fact.prov.modality)
    if fact.id != default_id:
        meta.append(f"id={_quote(fact.id)}")
    if fact.prov.source != DEFAULT_SOURCE:
        meta.append(f"source={_quote(fact.prov.source)}")
    if fact.prov.modality != registry.default_modality(fact.predicate):
        meta.append(f"modality={_quote(fact.prov.modality)}")
    if fact.prov.raw_ref is not None:
        meta.append(f"raw_ref={_quote(fact.prov.raw_ref)}")
    core = fact_core(fact)
    return f"{core} {{{', '.join(meta)}}}" if meta else core


def serialize_facts(facts: Iterable[Fact], registry: SchemaRegistry | None = None) -> str:
    return "".join(serialize_fact(f, registry) + "\n" for f in facts)

