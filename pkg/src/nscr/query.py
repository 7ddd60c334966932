"""Execution of whitelisted aggregation queries over a fact store.

Queries never add facts. Every result row cites the fact ids it was computed from.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

from nscr.dsl.ast import QueryAst, Var, Wild
from nscr.facts import Fact, FactStore, TimeRef, Value
from nscr.reasoner import constraint_holds

GROUP = "group"
MEMBER_OF = "member_of"


class QueryError(ValueError):
    pass


@dataclass(frozen=True)
class QueryResult:
    kind: str
    rows: tuple[tuple[Value, Any], ...]
    evidence: tuple[tuple[str, ...], ...]  # parallel to rows
    scalar: int | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "scalar": self.scalar,
            "rows": [{"key": k, "value": v, "evidence": list(ev)} for (k, v), ev in zip(self.rows, self.evidence)],
        }

    def table(self) -> str:
        lines = []
        if self.scalar is not None:
            lines.append(f"{self.kind}: {self.scalar}")
        width = max([len(str(k)) for k, _ in self.rows] + [3])
        for (k, v), ev in zip(self.rows, self.evidence):
            shown = f"{v:.4f}" if isinstance(v, float) else str(v)
            lines.append(f"{str(k):<{width}}  {shown:>8}  {' '.join(ev)}")
        if not self.rows and self.scalar is None:
            lines.append("(no rows)")
        return "\n".join(lines) + "\n"


def _slots(f: Fact) -> tuple[Value, ...]:
    return f.args if f.value is None else f.args + (f.value,)


def _matches(terms: Sequence[Any], f: Fact) -> bool:
    slots = _slots(f)
    if len(slots) != len(terms):
        return False
    for t, s in zip(terms, slots):
        if isinstance(t, (Wild, Var)):
            continue
        if t != s or isinstance(t, str) != isinstance(s, str):
            return False
    return True


def memberships(store: FactStore) -> dict[str, list[Fact]]:
    """Group id -> the REL(x, member_of, g) facts naming its members."""
    out: dict[str, list[Fact]] = defaultdict(list)
    for f in store.query(predicate="REL"):
        if len(f.args) == 3 and f.args[1] == MEMBER_OF:
            out[f.args[2]].append(f)
    return out


def turn_balance(store: FactStore, group: Iterable[str], window: TimeRef | None = None) -> float:
    """min/max of per-member speak_turn counts; 0 when a member is silent or nobody speaks."""
    members = set(group)
    if not members:
        raise QueryError("turn_balance needs a non-empty group")
    counts = dict.fromkeys(members, 0)
    for f in store.query(predicate="EVENT", window=window):
        if len(f.args) == 3 and f.args[1] == "speak_turn" and f.args[0] in counts:
            counts[f.args[0]] += 1
    return _balance(counts.values())


def _balance(counts: Iterable[int]) -> float:
    cs = list(counts)
    hi = max(cs, default=0)
    return 0.0 if hi == 0 else min(cs) / hi


def _sort_key(v: Value) -> tuple[int, str]:
    return (0, v) if isinstance(v, str) else (1, repr(v))


def execute_query(q: QueryAst, store: FactStore, anchor: Fact | None = None) -> QueryResult:
    """Run a parsed query. Raises QueryError on unknown predicates/roles or a missing anchor."""
    reg = store.registry
    pred = q.pattern.predicate
    if not reg.is_known(pred):
        raise QueryError(f"unknown predicate {pred}")
    width = reg.pattern_width(pred)
    if len(q.pattern.terms) != width:
        raise QueryError(f"{pred} patterns take {width} terms, got {len(q.pattern.terms)}")
    if q.uses_anchor and anchor is None:
        raise QueryError("query references anchor but none was given")
    if q.rank_key == "balance" and q.target != GROUP:
        raise QueryError("RANK BY balance ranks groups; use target group")

    groups = memberships(store) if q.target == GROUP else {}
    if q.target == GROUP:
        pos = 0
        member_groups: dict[str, list[Fact]] = defaultdict(list)
        for mfacts in groups.values():
            for m in mfacts:
                member_groups[m.args[0]].append(m)
    else:
        idx = reg.role_index(pred, q.target)
        if idx is None:
            raise QueryError(f"{pred} has no role {q.target}")
        pos = idx

    matched: list[Fact] = []
    for f in store.query(predicate=pred):
        if not _matches(q.pattern.terms, f):
            continue
        env = {"this": f}
        if anchor is not None:
            env["anchor"] = anchor
        if all(constraint_holds(c, env) for c in q.wheres):
            matched.append(f)

    # key -> supporting facts
    support: dict[Value, list[Fact]] = defaultdict(list)
    for f in matched:
        slot = _slots(f)[pos]
        if q.target == GROUP:
            for gid in sorted({m.args[2] for m in member_groups.get(slot, ())}):  # type: ignore[arg-type]
                support[gid].append(f)
        else:
            support[slot].append(f)

    def ids(fs: Iterable[Fact]) -> tuple[str, ...]:
        return tuple(sorted({f.id for f in fs}, key=store.seq))

    def with_membership(key: Value, fs: list[Fact]) -> tuple[str, ...]:
        if q.target != GROUP:
            return ids(fs)
        actors = {_slots(f)[pos] for f in fs}
        return ids(fs + [m for m in groups.get(key, ()) if m.args[0] in actors])  # type: ignore[arg-type]

    keys = sorted(support, key=_sort_key)
    if q.operator == "SELECT":
        firsts = {k: min(f.time.start for f in support[k]) for k in keys}
        keys.sort(key=lambda k: (firsts[k], _sort_key(k)))
        return QueryResult("SELECT", tuple((k, firsts[k]) for k in keys),
                           tuple(with_membership(k, support[k]) for k in keys))
    if q.operator == "COUNT_DISTINCT":
        return QueryResult("COUNT_DISTINCT", tuple((k, len(support[k])) for k in keys),
                           tuple(with_membership(k, support[k]) for k in keys), scalar=len(keys))
    if q.operator == "GROUP_COUNT" or q.rank_key == "count":
        rows = [(k, len(support[k])) for k in keys]
        if q.operator == "RANK":
            rows.sort(key=lambda r: (-r[1], _sort_key(r[0])))
        return QueryResult(q.operator, tuple(rows), tuple(with_membership(k, support[k]) for k, _ in rows))

    # RANK group BY balance: every group with members is ranked, silent ones included
    ranked = []
    for gid in sorted(groups, key=_sort_key):
        mfacts = groups[gid]
        counts = {m.args[0]: 0 for m in mfacts}
        for f in matched:
            actor = _slots(f)[pos]
            if actor in counts:
                counts[actor] += 1  # type: ignore[index]
        turns = [f for f in matched if _slots(f)[pos] in counts]
        ranked.append((gid, _balance(counts.values()), ids(turns + mfacts)))
    ranked.sort(key=lambda r: (-r[1], _sort_key(r[0])))
    return QueryResult("RANK", tuple((g, b) for g, b, _ in ranked), tuple(ev for _, _, ev in ranked))
