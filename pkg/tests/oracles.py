"""Brute-force reference implementations. Deliberately naive: no indexes, no plans."""

from __future__ import annotations

import itertools
import math
from collections import defaultdict

from nscr.dsl.ast import Compare, QueryAst, RuleAst, Temporal, Var, Wild
from nscr.facts import Fact, SchemaRegistry

OPS = {">=": lambda a, b: a >= b, ">": lambda a, b: a > b, "<=": lambda a, b: a <= b,
       "<": lambda a, b: a < b, "==": lambda a, b: a == b, "!=": lambda a, b: a != b}


def slots(f: Fact) -> tuple:
    return f.args + ((f.value,) if f.value is not None else ())


def same(a, b) -> bool:
    return isinstance(a, str) == isinstance(b, str) and a == b


def unify(terms, f: Fact, env: dict) -> dict | None:
    s = slots(f)
    if len(s) != len(terms):
        return None
    env = dict(env)
    for t, v in zip(terms, s):
        if isinstance(t, Wild):
            continue
        if isinstance(t, Var):
            if t.name in env:
                if not same(env[t.name], v):
                    return None
            else:
                env[t.name] = v
        elif not same(t, v):
            return None
    return env


def temporal(op: str, a, b, w) -> bool:
    ticks_a = set(range(a.start, a.end + 1))
    ticks_b = set(range(b.start, b.end + 1))
    if op == "before":
        return max(ticks_a) < min(ticks_b)
    if op == "after":
        return max(ticks_b) < min(ticks_a)
    if op == "during":
        return ticks_a <= ticks_b
    if op == "overlaps":
        return bool(ticks_a & ticks_b)
    if op == "within":
        return min(ticks_b) - max(ticks_a) in range(0, (w or 0) + 1)
    raise AssertionError(op)


def compare(f: Fact, fld: str, op: str, lit) -> bool:
    x = {"conf": f.conf, "start": f.time.start, "end": f.time.end, "value": f.value}[fld]
    if x is None or isinstance(x, str) != isinstance(lit, str):
        return op == "!="
    return OPS[op](x, lit)


def holds(c, env: dict) -> bool:
    if isinstance(c, Temporal):
        return temporal(c.op, env[c.left].time, env[c.right].time, c.width)
    assert isinstance(c, Compare)
    return compare(env[c.alias], c.field, c.op, c.literal)


def bound(b, env) -> int:
    if b.alias is None:
        return b.offset
    t = env[b.alias].time
    return (t.start if b.field == "start" else t.end) + b.offset


def brute_match(rule: RuleAst, facts: list[Fact], reg: SchemaRegistry) -> list[tuple]:
    """(bindings, evidence ids, soft violations) for every derivation, sorted."""
    canon = reg.canonical
    pools = [[f for f in facts if canon(f.predicate) == canon(m.pattern.predicate)] for m in rule.matches]
    out = []
    for combo in itertools.product(*pools):
        if len({f.id for f in combo}) < len(combo):
            continue
        env: dict | None = {}
        for m, f in zip(rule.matches, combo):
            floor = m.conf_floor if m.conf_floor is not None else rule.floor
            if floor is not None and f.conf < floor:
                env = None
                break
            env = unify(m.pattern.terms, f, env)
            if env is None:
                break
        if env is None:
            continue
        fenv = {m.alias: f for m, f in zip(rule.matches, combo)}
        if not all(holds(w.constraint, fenv) for w in rule.wheres if not w.soft):
            continue
        blocked = False
        for a in rule.absents:
            lo, hi = bound(a.lo, fenv), bound(a.hi, fenv)
            for g in facts:
                if canon(g.predicate) != canon(a.pattern.predicate):
                    continue
                if g.time.end < lo or g.time.start > hi:
                    continue
                if unify(a.pattern.terms, g, env) is not None:
                    blocked = True
        if blocked:
            continue
        v = sum(1 for w in rule.wheres if w.soft and not holds(w.constraint, fenv))
        out.append((tuple((h, env[h]) for h in rule.head), tuple(f.id for f in combo), v))
    return sorted(out, key=repr)


def reference_support(confs, weights, v=0, p=0, lv=1.0, lp=2.0, eps=1e-6) -> tuple[float, float]:
    raw = 0.0
    for c, w in zip(confs, weights):
        raw += w * math.log(min(1.0, max(eps, c)))
    raw -= lv * v + lp * p
    return raw, math.exp(raw / sum(weights))


def brute_store_query(facts, reg, predicate=None, entity=None, window=None) -> list[Fact]:
    out = []
    for f in facts:
        if predicate is not None and reg.canonical(f.predicate) != reg.canonical(predicate):
            continue
        if entity is not None and entity not in f.args:
            continue
        if window is not None and (f.time.end < window.start or f.time.start > window.end):
            continue
        out.append(f)
    return out


ROLE_POS = {"OBS": {"entity": 0, "attribute": 1, "value": 2}, "EVENT": {"actor": 0, "action": 1, "target": 2},
            "REL": {"entity_1": 0, "relation": 1, "entity_2": 2}, "CONTEXT": {"key": 0, "value": 1}}


def brute_query(q: QueryAst, facts: list[Fact], reg: SchemaRegistry, anchor: Fact | None = None):
    """Returns (rows, scalar) with the same conventions as execute_query."""
    canon = reg.canonical(q.pattern.predicate)
    hits = []
    for f in facts:
        if reg.canonical(f.predicate) != canon or unify(q.pattern.terms, f, {}) is None:
            continue
        env = {"this": f, "anchor": anchor}
        if all(holds(c, env) for c in q.wheres):
            hits.append(f)
    members = defaultdict(set)
    for f in facts:
        if reg.canonical(f.predicate) == "REL" and f.args[1] == "member_of":
            members[f.args[2]].add(f.args[0])

    def keys_of(f):
        if q.target == "group":
            return [g for g, ms in members.items() if f.args[0] in ms]
        return [slots(f)[ROLE_POS[canon][q.target]]]

    counts: dict = defaultdict(int)
    first: dict = {}
    for f in hits:
        for k in keys_of(f):
            counts[k] += 1
            first[k] = min(first.get(k, f.time.start), f.time.start)
    skey = lambda v: (0, v) if isinstance(v, str) else (1, repr(v))  # noqa: E731
    if q.operator == "SELECT":
        return sorted(((k, first[k]) for k in first), key=lambda r: (r[1], skey(r[0]))), None
    if q.operator == "COUNT_DISTINCT":
        return sorted(counts.items(), key=lambda r: skey(r[0])), len(counts)
    if q.operator == "GROUP_COUNT":
        return sorted(counts.items(), key=lambda r: skey(r[0])), None
    if q.rank_key == "count":
        return sorted(counts.items(), key=lambda r: (-r[1], skey(r[0]))), None
    rows = []
    for g, ms in members.items():
        c = {m: 0 for m in ms}
        for f in hits:
            if f.args[0] in c:
                c[f.args[0]] += 1
        hi = max(c.values())
        rows.append((g, 0.0 if hi == 0 else min(c.values()) / hi))
    return sorted(rows, key=lambda r: (-r[1], skey(r[0]))), None
