"""Syntax trees for rules, policies and queries.

Spans are excluded from equality so that parse(serialize(x)) == x holds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

from nscr.dsl.lexer import SourceSpan

TEMPORAL_OPS = ("before", "after", "during", "overlaps", "within")
COMPARE_OPS = (">=", ">", "<=", "<", "==", "!=")
FIELDS = ("conf", "start", "end", "value")


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Wild:
    pass


WILD = Wild()

Term = Union[Var, Wild, str, int, float]


@dataclass(frozen=True)
class Pattern:
    predicate: str
    terms: tuple[Term, ...]
    span: SourceSpan | None = field(default=None, compare=False)

    def variables(self) -> list[str]:
        return [t.name for t in self.terms if isinstance(t, Var)]


@dataclass(frozen=True)
class Temporal:
    op: str
    left: str
    right: str
    width: int | None = None  # only for within


@dataclass(frozen=True)
class Compare:
    alias: str
    field: str
    op: str
    literal: Union[str, int, float]


Constraint = Union[Temporal, Compare]


def constraint_aliases(c: Constraint) -> tuple[str, ...]:
    return (c.left, c.right) if isinstance(c, Temporal) else (c.alias,)


@dataclass(frozen=True)
class Where:
    constraint: Constraint
    soft: bool = False
    span: SourceSpan | None = field(default=None, compare=False)


@dataclass(frozen=True)
class MatchClause:
    alias: str
    pattern: Pattern
    conf_floor: float | None = None
    span: SourceSpan | None = field(default=None, compare=False)


@dataclass(frozen=True)
class Bound:
    """A scope endpoint: ``alias.field + offset`` or an absolute tick when alias is None."""

    alias: str | None
    field: str | None
    offset: int = 0


@dataclass(frozen=True)
class AbsentClause:
    pattern: Pattern
    lo: Bound
    hi: Bound
    span: SourceSpan | None = field(default=None, compare=False)


@dataclass(frozen=True)
class RuleAst:
    name: str
    construct: str
    head: tuple[str, ...]
    matches: tuple[MatchClause, ...]
    absents: tuple[AbsentClause, ...] = ()
    wheres: tuple[Where, ...] = ()
    weights: tuple[tuple[str, float], ...] = ()
    floor: float | None = None
    span: SourceSpan | None = field(default=None, compare=False)

    def weight(self, alias: str, default: float = 1.0) -> float:
        for a, w in self.weights:
            if a == alias:
                return w
        return default

    @property
    def temporal_constraints(self) -> list[Where]:
        return [w for w in self.wheres if isinstance(w.constraint, Temporal)]


# -- policies ---------------------------------------------------------------------

POLICY_ATOMS = ("distinct_modalities", "min_conf", "evidence_count", "context_active")


@dataclass(frozen=True)
class PolicyAtom:
    kind: str
    op: str | None = None
    threshold: float | None = None
    modality: str | None = None  # min_conf
    key: str | None = None  # context_active
    value: str | None = None  # context_active


@dataclass(frozen=True)
class PolicyAst:
    id: str
    severity: str  # hard | soft
    applies_to: str  # construct name or "*"
    requirement: tuple[PolicyAtom, ...]
    on_violation: str  # defer | penalize
    span: SourceSpan | None = field(default=None, compare=False)

    def applies(self, construct: str) -> bool:
        return self.applies_to == "*" or self.applies_to == construct


# -- queries ----------------------------------------------------------------------

QUERY_OPERATORS = ("SELECT", "COUNT_DISTINCT", "GROUP_COUNT", "RANK")
RANK_KEYS = ("count", "balance")


@dataclass(frozen=True)
class QueryAst:
    operator: str
    target: str
    pattern: Pattern
    wheres: tuple[Constraint, ...] = ()
    rank_key: str | None = None
    span: SourceSpan | None = field(default=None, compare=False)

    @property
    def uses_anchor(self) -> bool:
        return any("anchor" in constraint_aliases(c) for c in self.wheres)
