"""Rule compilation, indexed matching, and evidence-weighted support.

A hypothesis's support is

    raw  = sum_f w_f * ln(c_f) - lambda_v * V - lambda_p * P
    norm = exp(raw / sum_f w_f)

so ``norm`` is the weighted geometric mean of evidence confidences, shrunk
by the constraint (V) and policy (P) penalties, and is comparable across
rules with different numbers of clauses.
"""

from __future__ import annotations

import hashlib
import json
import math
import operator
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping, Sequence

from nscr.dsl.ast import (
    AbsentClause,
    Bound,
    Constraint,
    MatchClause,
    Pattern,
    RuleAst,
    Temporal,
    Var,
    Wild,
    constraint_aliases,
)
from nscr.facts import CONF_FLOOR, Family, Fact, FactStore, SchemaRegistry, TimeRef, Value, clamp_conf, hull


class CompileError(ValueError):
    pass


class SupportConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SupportConfig:
    weight: float = 1.0
    lambda_v: float = 1.0
    lambda_p: float = 2.0
    eps: float = CONF_FLOOR

    def __post_init__(self) -> None:
        if self.lambda_v < 0 or self.lambda_p < 0:
            raise SupportConfigError("penalty weights must be non-negative")
        if self.eps <= 0:
            raise SupportConfigError("confidence floor must be positive")


# -- constraint semantics -------------------------------------------------------------


def temporal_holds(op: str, a: TimeRef, b: TimeRef, width: int | None = None) -> bool:
    """Interval relations over closed integer intervals.

    before(a, b): a ends strictly before b starts. after(a, b) = before(b, a).
    during(a, b): a lies inside b. overlaps(a, b): the intervals intersect.
    within(a, b, w): b starts no earlier than a ends and at most w ticks later.
    """
    if op == "before":
        return a.end < b.start
    if op == "after":
        return b.end < a.start
    if op == "during":
        return b.start <= a.start and a.end <= b.end
    if op == "overlaps":
        return a.start <= b.end and b.start <= a.end
    if op == "within":
        gap = b.start - a.end
        return 0 <= gap <= (width or 0)
    raise ValueError(f"unknown temporal relation {op}")


_CMP = {">=": operator.ge, ">": operator.gt, "<=": operator.le, "<": operator.lt,
        "==": operator.eq, "!=": operator.ne}


def compare_holds(fact: Fact, fld: str, op: str, literal: Value) -> bool:
    if fld == "conf":
        x: Any = fact.conf
    elif fld == "start":
        x = fact.time.start
    elif fld == "end":
        x = fact.time.end
    else:
        x = fact.value
    if x is None:
        return op == "!="
    if isinstance(x, str) != isinstance(literal, str):
        return op == "!="
    return _CMP[op](x, literal)


def constraint_holds(c: Constraint, env: Mapping[str, Fact]) -> bool:
    if isinstance(c, Temporal):
        return temporal_holds(c.op, env[c.left].time, env[c.right].time, c.width)
    return compare_holds(env[c.alias], c.field, c.op, c.literal)


def _start_range(c: Temporal, new: str, other: TimeRef, maxlen: int) -> tuple[int | None, int | None]:
    """Admissible start ticks of alias ``new`` given a bound partner interval (sound, not tight).

    ``maxlen`` bounds end - start over the candidates for ``new`` and turns end
    constraints into start constraints.
    """
    if c.right == new:  # relation(other, new)
        if c.op == "before":
            return other.end + 1, None
        if c.op == "after":
            return None, other.start - 1
        if c.op == "within":
            return other.end, other.end + (c.width or 0)
        if c.op == "during":
            return other.end - maxlen, other.start
        if c.op == "overlaps":
            return other.start - maxlen, other.end
    else:  # relation(new, other)
        if c.op == "before":
            return None, other.start - 1
        if c.op == "after":
            return other.end + 1, None
        if c.op == "within":
            return other.start - (c.width or 0) - maxlen, other.start
        if c.op == "during":
            return other.start, other.end
        if c.op == "overlaps":
            return other.start - maxlen, other.end
    return None, None


# -- compiled rules -------------------------------------------------------------------


@dataclass(frozen=True)
class _Step:
    clause: int
    checks: tuple[Constraint, ...]
    ranges: tuple[tuple[Temporal, str], ...]  # (constraint, already-bound partner alias)


@dataclass(frozen=True)
class CompiledRule:
    ast: RuleAst
    weights: tuple[float | None, ...]
    hard: tuple[Constraint, ...] = field(repr=False)
    soft: tuple[Constraint, ...] = field(repr=False)
    plan: tuple[int, ...] = ()  # store-free default order; match_rule re-plans from index statistics

    @property
    def id(self) -> str:
        return self.ast.name

    @property
    def construct(self) -> str:
        return self.ast.construct

    def resolved_weights(self, default: float) -> tuple[float, ...]:
        return tuple(default if w is None else w for w in self.weights)


def _check_pattern(p: Pattern, registry: SchemaRegistry, what: str) -> None:
    if not registry.is_known(p.predicate):
        raise CompileError(f"{what}: unknown predicate {p.predicate}")
    width = registry.pattern_width(p.predicate)
    if len(p.terms) != width:
        raise CompileError(f"{what}: {p.predicate} patterns take {width} terms, got {len(p.terms)}")


# Selectivity of a temporal link to an already-bound clause, as a fraction of candidates kept.
_LINK_FACTOR = {"within": 0.02, "during": 0.05, "overlaps": 0.05, "before": 0.5, "after": 0.5}
_BOUND_VAR_FACTOR = 0.1

_CostFn = Callable[[MatchClause, int, "list[Temporal]"], float]


def _order(ast: RuleAst, hard: Sequence[Constraint], cost: _CostFn) -> list[int]:
    """Greedy join order: repeatedly take the cheapest remaining clause given what is bound."""
    remaining = list(range(len(ast.matches)))
    bound_vars: set[str] = set()
    bound_aliases: set[str] = set()
    plan: list[int] = []
    while remaining:
        def key(i: int) -> tuple[float, int]:
            m = ast.matches[i]
            bound = sum(1 for t in m.pattern.terms if isinstance(t, Var) and t.name in bound_vars)
            links = [c for c in hard if isinstance(c, Temporal) and m.alias in (c.left, c.right)
                     and c.left != c.right and (set(constraint_aliases(c)) - {m.alias}) <= bound_aliases]
            return cost(m, bound, links), i

        best = min(remaining, key=key)
        remaining.remove(best)
        plan.append(best)
        bound_vars.update(ast.matches[best].pattern.variables())
        bound_aliases.add(ast.matches[best].alias)
    return plan


def _steps(ast: RuleAst, plan: Sequence[int], hard: Sequence[Constraint]) -> tuple[_Step, ...]:
    steps: list[_Step] = []
    seen: set[str] = set()
    pending = list(hard)
    for i in plan:
        alias = ast.matches[i].alias
        seen.add(alias)
        ready = [c for c in pending if set(constraint_aliases(c)) <= seen]
        pending = [c for c in pending if c not in ready]
        ranges = tuple(
            (c, c.left if c.right == alias else c.right)
            for c in ready
            if isinstance(c, Temporal) and alias in (c.left, c.right) and c.left != c.right
        )
        steps.append(_Step(i, tuple(ready), ranges))
    return tuple(steps)


def _store_plan(rule: "CompiledRule", store: FactStore) -> tuple[_Step, ...]:
    """Join order from the store's index statistics. Any order is correct; this one is usually fast."""
    def cost(m: MatchClause, bound: int, links: list[Temporal]) -> float:
        pred = m.pattern.predicate
        n = float(store.predicate_count(pred))
        for pos, t in enumerate(m.pattern.terms):
            if not isinstance(t, (Var, Wild)):
                n = min(n, store.slot_count(pred, pos, t))
        n *= _BOUND_VAR_FACTOR ** bound
        for c in links:
            n *= _LINK_FACTOR.get(c.op, 1.0)
        return n

    return _steps(rule.ast, _order(rule.ast, rule.hard, cost), rule.hard)


def _static_cost(m: MatchClause, bound: int, links: list[Temporal]) -> float:
    consts = sum(1 for t in m.pattern.terms if not isinstance(t, (Var, Wild)))
    n = _BOUND_VAR_FACTOR ** (consts + bound)
    for c in links:
        n *= _LINK_FACTOR.get(c.op, 1.0)
    return n


def compile_rule(ast: RuleAst, registry: SchemaRegistry) -> CompiledRule:
    """Validate predicates and weights against the registry.

    ``plan`` is a default most-constrained-first order; matching picks a
    fresh order per store, since the best one depends on predicate counts.
    """
    for m in ast.matches:
        _check_pattern(m.pattern, registry, f"rule {ast.name}, clause {m.alias}")
    for a in ast.absents:
        _check_pattern(a.pattern, registry, f"rule {ast.name}, ABSENT")
    aliases = [m.alias for m in ast.matches]
    weights: list[float | None] = [None] * len(aliases)
    for alias, w in ast.weights:
        if alias not in aliases:
            raise CompileError(f"rule {ast.name}: weight for unknown alias {alias}")
        if w < 0 or not math.isfinite(w):
            raise CompileError(f"rule {ast.name}: weight for {alias} must be a finite non-negative number")
        weights[aliases.index(alias)] = w
    hard = tuple(w.constraint for w in ast.wheres if not w.soft)
    soft = tuple(w.constraint for w in ast.wheres if w.soft)
    plan = tuple(_order(ast, hard, _static_cost))
    return CompiledRule(ast, tuple(weights), hard, soft, plan)


# -- hypotheses -------------------------------------------------------------------------


@dataclass(frozen=True)
class Hypothesis:
    construct: str
    bindings: tuple[tuple[str, Value], ...]
    evidence: tuple[str, ...]
    evidence_conf: tuple[float, ...]
    weights: tuple[float, ...]
    raw_support: float
    norm_support: float
    v: int
    p: int
    rule_id: str
    anchor: TimeRef
    vetoes: tuple[str, ...] = ()
    soft_defers: tuple[str, ...] = ()

    @property
    def binding_map(self) -> dict[str, Value]:
        return dict(self.bindings)

    @property
    def subject(self) -> tuple[Value, ...]:
        return tuple(v for _, v in self.bindings)

    @property
    def id(self) -> str:
        digest = hashlib.sha1("|".join(self.evidence).encode()).hexdigest()[:10]
        return f"{self.construct}({','.join(map(str, self.subject))})#{digest}"

    def label(self) -> str:
        return f"{self.construct}({', '.join(map(str, self.subject))})"

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "construct": self.construct,
            "bindings": {k: v for k, v in self.bindings},
            "evidence": list(self.evidence),
            "raw_support": self.raw_support,
            "norm_support": self.norm_support,
            "V": self.v,
            "P": self.p,
            "rule": self.rule_id,
            "time": {"start": self.anchor.start, "end": self.anchor.end},
        }


def support(h: Hypothesis, cfg: SupportConfig) -> tuple[float, float]:
    """Raw and normalized support of a hypothesis from its evidence confidences and penalties."""
    total = sum(h.weights)
    if total <= 0:
        raise SupportConfigError("sum of evidence weights must be positive")
    raw = sum(w * math.log(clamp_conf(c, cfg.eps)) for w, c in zip(h.weights, h.evidence_conf))
    raw -= cfg.lambda_v * h.v + cfg.lambda_p * h.p
    return raw, math.exp(raw / total)


def with_support(h: Hypothesis, cfg: SupportConfig) -> Hypothesis:
    raw, norm = support(h, cfg)
    return replace(h, raw_support=raw, norm_support=norm)


def evidence_anchor(facts: Sequence[Fact]) -> TimeRef:
    """Hull of the evidence intervals; CONTEXT facts are background and only count when alone."""
    timed = [f.time for f in facts if f.family is not Family.CONTEXT]
    return hull(timed or [f.time for f in facts])


# -- matching ---------------------------------------------------------------------------


def _slots(f: Fact) -> tuple[Value, ...]:
    return f.args if f.value is None else f.args + (f.value,)


def _unify(terms: Sequence[Any], f: Fact, env: dict[str, Value]) -> list[str] | None:
    """Extend env with the pattern's variables; returns newly bound names or None on clash."""
    slots = _slots(f)
    if len(slots) != len(terms):
        return None
    new: list[str] = []
    for t, s in zip(terms, slots):
        if isinstance(t, Wild):
            continue
        if isinstance(t, Var):
            cur = env.get(t.name, _MISSING)
            if cur is _MISSING:
                env[t.name] = s
                new.append(t.name)
            elif cur != s or isinstance(cur, str) != isinstance(s, str):
                for n in new:
                    del env[n]
                return None
        elif t != s or isinstance(t, str) != isinstance(s, str):
            for n in new:
                del env[n]
            return None
    return new


_MISSING = object()


def _resolve_bound(b: Bound, env: Mapping[str, Fact]) -> int:
    if b.alias is None:
        return b.offset
    t = env[b.alias].time
    return (t.start if b.field == "start" else t.end) + b.offset


def absent_holds(clause: AbsentClause, env: Mapping[str, Fact], vars_: Mapping[str, Value],
                 store: FactStore) -> bool:
    """True when no fact matching the pattern overlaps the scope; unbound variables are existential."""
    lo, hi = _resolve_bound(clause.lo, env), _resolve_bound(clause.hi, env)
    if lo > hi:
        return True
    pat = clause.pattern
    fixed = [(pos, vars_[t.name] if isinstance(t, Var) else t) for pos, t in enumerate(pat.terms)
             if not isinstance(t, Wild) and (not isinstance(t, Var) or t.name in vars_)]
    for f in store.narrowest(pat.predicate, fixed, (lo - store.max_length(pat.predicate), hi)):
        if f.time.end < lo:
            continue
        local = dict(vars_)
        if _unify(clause.pattern.terms, f, local) is not None:
            return False
    return True


def match_rule(rule: CompiledRule, store: FactStore, cfg: SupportConfig | None = None) -> list[Hypothesis]:
    """All hypotheses the rule derives from the store, sorted by bindings then evidence.

    One hypothesis per distinct assignment of facts to positive clauses; a
    fact fills at most one clause of a given match.
    """
    cfg = cfg or SupportConfig()
    ast = rule.ast
    clauses = ast.matches
    floors = [m.conf_floor if m.conf_floor is not None else ast.floor for m in clauses]
    weights = rule.resolved_weights(cfg.weight)
    out: list[Hypothesis] = []
    env: dict[str, Value] = {}
    facts_env: dict[str, Fact] = {}
    used: set[str] = set()
    steps = _store_plan(rule, store)
    maxlens = [store.max_length(m.pattern.predicate) for m in clauses]

    def emit() -> None:
        for a in ast.absents:
            if not absent_holds(a, facts_env, env, store):
                return
        ev = [facts_env[m.alias] for m in clauses]
        v = sum(1 for c in rule.soft if not constraint_holds(c, facts_env))
        h = Hypothesis(
            construct=ast.construct,
            bindings=tuple((name, env[name]) for name in ast.head),
            evidence=tuple(f.id for f in ev),
            evidence_conf=tuple(f.conf for f in ev),
            weights=weights,
            raw_support=0.0,
            norm_support=1.0,
            v=v,
            p=0,
            rule_id=rule.id,
            anchor=evidence_anchor(ev),
        )
        out.append(with_support(h, cfg))

    def search(k: int) -> None:
        if k == len(steps):
            emit()
            return
        step = steps[k]
        clause: MatchClause = clauses[step.clause]
        pat = clause.pattern
        lo: int | None = None
        hi: int | None = None
        maxlen = maxlens[step.clause]
        for c, partner in step.ranges:
            a, b = _start_range(c, clause.alias, facts_env[partner].time, maxlen)
            if a is not None:
                lo = a if lo is None else max(lo, a)
            if b is not None:
                hi = b if hi is None else min(hi, b)
        if lo is not None and hi is not None and lo > hi:
            return
        fixed = [(pos, env[t.name] if isinstance(t, Var) else t) for pos, t in enumerate(pat.terms)
                 if not isinstance(t, Wild) and (not isinstance(t, Var) or t.name in env)]
        floor = floors[step.clause]
        for f in store.narrowest(pat.predicate, fixed, (lo, hi)):
            if f.id in used or (floor is not None and f.conf < floor):
                continue
            new = _unify(pat.terms, f, env)
            if new is None:
                continue
            facts_env[clause.alias] = f
            if all(constraint_holds(c, facts_env) for c in step.checks):
                used.add(f.id)
                search(k + 1)
                used.discard(f.id)
            del facts_env[clause.alias]
            for n in new:
                del env[n]

    search(0)
    out.sort(key=_hyp_sort_key)
    return out


def _sym_key(v: Value) -> tuple[int, str]:
    return (0, v) if isinstance(v, str) else (1, repr(v))


def _hyp_sort_key(h: Hypothesis) -> tuple:
    return (h.construct, [_sym_key(v) for v in h.subject], h.anchor.start, h.anchor.end, h.evidence)


def reason(rules: Iterable[CompiledRule], store: FactStore, cfg: SupportConfig | None = None) -> list[Hypothesis]:
    """Run every rule and merge the results in a deterministic order."""
    out: list[Hypothesis] = []
    for r in rules:
        out.extend(match_rule(r, store, cfg))
    out.sort(key=lambda h: (_hyp_sort_key(h), h.rule_id))
    return out


def count_constraint_violations(h: Hypothesis, rule: CompiledRule, store: FactStore) -> int:
    """Number of soft WHERE constraints the hypothesis's evidence fails."""
    env = {m.alias: store.get(fid) for m, fid in zip(rule.ast.matches, h.evidence)}
    return sum(1 for c in rule.soft if not constraint_holds(c, env))


def rank_hypotheses(hs: Iterable[Hypothesis]) -> list[Hypothesis]:
    """Descending normalized support; ties by construct name then bindings."""
    return sorted(hs, key=lambda h: (-h.norm_support, h.construct, [_sym_key(v) for v in h.subject], h.evidence))


def margin(ranked: Sequence[Hypothesis]) -> float:
    """Support gap between the top two hypotheses; 1.0 when there is no runner-up."""
    if not ranked:
        return 0.0
    if len(ranked) == 1:
        return 1.0
    return ranked[0].norm_support - ranked[1].norm_support


def check_evidence_sufficiency(h: Hypothesis, rule: CompiledRule, store: FactStore) -> bool:
    """Does the cited evidence alone re-derive the hypothesis with the same bindings?"""
    if not h.evidence or any(fid not in store for fid in h.evidence):
        return False
    sub = FactStore((store.get(fid) for fid in dict.fromkeys(h.evidence)), store.registry)
    return any(r.construct == h.construct and r.bindings == h.bindings for r in match_rule(rule, sub))


def dump_hypotheses_jsonl(hs: Iterable[Hypothesis]) -> str:
    return "".join(json.dumps(h.to_json(), separators=(",", ":")) + "\n" for h in hs)
