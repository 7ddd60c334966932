"""Policy evaluation, the answer-or-defer decision, and retention-layer exports."""

from __future__ import annotations

import enum
import json
import operator
import random
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, NamedTuple, Sequence

from nscr.dsl.ast import PolicyAst, PolicyAtom
from nscr.facts import Family, Fact, FactStore
from nscr.reasoner import Hypothesis, SupportConfig, margin, rank_hypotheses, with_support

_CMP = {">=": operator.ge, ">": operator.gt, "<=": operator.le, "<": operator.lt,
        "==": operator.eq, "!=": operator.ne}


class Retention(str, enum.Enum):
    L0 = "l0"  # raw-linked
    L1 = "l1"  # symbolic only
    L2 = "l2"  # aggregate only


class Outcome(str, enum.Enum):
    ANSWER = "ANSWER"
    DEFER = "DEFER"


class GovernanceError(ValueError):
    pass


@dataclass(frozen=True)
class GovernanceConfig:
    tau_s: float
    tau_delta: float
    retention: Retention
    policies: tuple[PolicyAst, ...] = ()
    support: SupportConfig = field(default_factory=SupportConfig)

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau_s <= 1.0:
            raise GovernanceError(f"tau_s must lie in [0,1], got {self.tau_s}")
        if not 0.0 <= self.tau_delta <= 1.0:
            raise GovernanceError(f"tau_delta must lie in [0,1], got {self.tau_delta}")


class PolicyResult(NamedTuple):
    p: int
    hard: list[str]
    deferring: list[str]


def atom_holds(atom: PolicyAtom, h: Hypothesis, evidence: Sequence[Fact], store: FactStore) -> bool:
    if atom.kind == "distinct_modalities":
        return _CMP[atom.op](len({f.modality for f in evidence}), atom.threshold)
    if atom.kind == "evidence_count":
        return _CMP[atom.op](len(evidence), atom.threshold)
    if atom.kind == "min_conf":
        confs = [f.conf for f in evidence if f.modality == atom.modality]
        # no evidence from that modality leaves nothing to downgrade
        return not confs or _CMP[atom.op](min(confs), atom.threshold)
    if atom.kind == "context_active":
        return any(
            f.family is Family.CONTEXT and f.args[:1] == (atom.key,) and str(f.value) == atom.value
            for f in store.query(window=h.anchor)
        )
    raise GovernanceError(f"unknown requirement {atom.kind}")


def evaluate_policies(h: Hypothesis, store: FactStore, policies: Iterable[PolicyAst]) -> PolicyResult:
    """Soft penalize-violations count into P; hard violations veto; soft defer-violations both count and defer."""
    evidence = [store.get(fid) for fid in h.evidence]
    p, hard, deferring = 0, [], []
    for pol in policies:
        if not pol.applies(h.construct):
            continue
        if all(atom_holds(a, h, evidence, store) for a in pol.requirement):
            continue
        if pol.severity == "hard":
            hard.append(pol.id)
        else:
            p += 1
            if pol.on_violation == "defer":
                deferring.append(pol.id)
    return PolicyResult(p, hard, deferring)


def apply_policies(h: Hypothesis, store: FactStore, policies: Sequence[PolicyAst], cfg: SupportConfig) -> Hypothesis:
    res = evaluate_policies(h, store, policies)
    return with_support(replace(h, p=res.p, vetoes=tuple(res.hard), soft_defers=tuple(res.deferring)), cfg)


@dataclass(frozen=True)
class Decision:
    outcome: Outcome
    hypothesis: Hypothesis | None
    reasons: tuple[str, ...]
    support: float | None
    margin: float | None
    candidate: Hypothesis | None = None

    def __post_init__(self) -> None:
        assert (self.outcome is Outcome.ANSWER) == (not self.reasons)
        assert (self.hypothesis is not None) == (self.outcome is Outcome.ANSWER)

    @property
    def vetoed(self) -> bool:
        """Deferred for a reason other than low support."""
        return any(r != "below_support" for r in self.reasons)

    def to_json(self, rename: dict[str, str] | None = None) -> dict[str, Any]:
        """With ``rename`` entities are pseudonymized and evidence ids (content hashes) reduce to a count."""
        c = self.candidate
        ren = rename or {}
        answer = None
        if self.hypothesis is not None:
            answer = self.hypothesis.id
            if rename is not None:
                subj = ",".join(str(ren.get(v, v)) if isinstance(v, str) else str(v) for v in self.hypothesis.subject)
                answer = f"{self.hypothesis.construct}({subj})"
        d: dict[str, Any] = {
            "outcome": self.outcome.value,
            "reasons": list(self.reasons),
            "support": self.support,
            "margin": self.margin,
            "answer": answer,
        }
        if c is not None:
            d.update(
                construct=c.construct,
                bindings={k: ren.get(v, v) if isinstance(v, str) else v for k, v in c.bindings},
                time={"start": c.anchor.start, "end": c.anchor.end},
                rule=c.rule_id,
            )
            if rename is None:
                d["evidence"] = list(c.evidence)
            else:
                d["evidence_count"] = len(c.evidence)
        return d


def decide(ranked: Sequence[Hypothesis], cfg: GovernanceConfig) -> Decision:
    """ANSWER with the top hypothesis iff support and margin clear their thresholds and nothing vetoes it."""
    if not ranked:
        return Decision(Outcome.DEFER, None, ("no_hypothesis",), None, None)
    top = ranked[0]
    delta = margin(ranked)
    reasons = []
    if top.norm_support < cfg.tau_s:
        reasons.append("below_support")
    if delta < cfg.tau_delta:
        reasons.append("below_margin")
    reasons += [f"hard_policy:{pid}" for pid in top.vetoes]
    reasons += [f"soft_policy:{pid}" for pid in top.soft_defers]
    if reasons:
        return Decision(Outcome.DEFER, None, tuple(reasons), top.norm_support, delta, top)
    return Decision(Outcome.ANSWER, top, (), top.norm_support, delta, top)


def contests(hs: Sequence[Hypothesis]) -> list[list[Hypothesis]]:
    """Group competing hypotheses: same construct and first binding, with chained overlapping anchors."""
    by_key: dict[tuple, list[Hypothesis]] = {}
    for h in hs:
        key = (h.construct, h.subject[:1])
        by_key.setdefault(key, []).append(h)
    groups: list[list[Hypothesis]] = []
    for key in sorted(by_key, key=repr):
        members = sorted(by_key[key], key=lambda h: (h.anchor.start, h.anchor.end, h.evidence))
        current: list[Hypothesis] = []
        reach = -1
        for h in members:
            if current and h.anchor.start > reach:
                groups.append(current)
                current = []
            current.append(h)
            reach = max(reach, h.anchor.end) if len(current) > 1 else h.anchor.end
        if current:
            groups.append(current)
    return groups


def govern(hypotheses: Sequence[Hypothesis], store: FactStore, cfg: GovernanceConfig) -> list[Decision]:
    """Fold policy penalties into support, then decide each contest. Empty input gives one no_hypothesis DEFER."""
    governed = [apply_policies(h, store, cfg.policies, cfg.support) for h in hypotheses]
    if not governed:
        return [decide([], cfg)]
    decisions = [decide(rank_hypotheses(group), cfg) for group in contests(governed)]
    decisions.sort(key=lambda d: (d.candidate.anchor.start, d.candidate.construct, d.candidate.evidence))  # type: ignore[union-attr]
    return decisions


# -- retention exports ------------------------------------------------------------------


def pseudonymize(entities: Iterable[str], seed: int) -> dict[str, str]:
    """Random, seed-determined relabelling of entity ids to p01, p02, ..."""
    ents = sorted(set(entities))
    labels = [f"p{i + 1:02d}" for i in range(len(ents))]
    random.Random(seed).shuffle(labels)
    return dict(zip(ents, labels))


def _binding_entities(decisions: Iterable[Decision]) -> set[str]:
    out: set[str] = set()
    for d in decisions:
        if d.candidate is not None:
            out.update(v for _, v in d.candidate.bindings if isinstance(v, str))
    return out


def export_trace(
    facts: Sequence[Fact],
    hypotheses: Sequence[Hypothesis],
    decisions: Sequence[Decision],
    level: Retention,
    *,
    seed: int = 0,
) -> dict[str, Any]:
    """Export at a retention level.

    L0 keeps raw media references, L1 drops every ``raw_ref`` key and keeps
    the symbolic trace, L2 keeps only aggregates with pseudonymous entity labels.
    """
    level = Retention(level)
    if level is not Retention.L2:
        raw = level is Retention.L0
        return {
            "facts": [f.to_json(raw_refs=raw) for f in facts],
            "hypotheses": [h.to_json() for h in hypotheses],
            "decisions": [d.to_json() for d in decisions],
        }
    answered = [d for d in decisions if d.outcome is Outcome.ANSWER]
    real = [d for d in decisions if d.candidate is not None]
    names = pseudonymize(_binding_entities(decisions), seed)
    per_entity: Counter[str] = Counter()
    for d in answered:
        for _, v in d.hypothesis.bindings:  # type: ignore[union-attr]
            if isinstance(v, str):
                per_entity[names[v]] += 1
    return {
        "answers_per_construct": dict(sorted(Counter(d.hypothesis.construct for d in answered).items())),  # type: ignore[union-attr]
        "hypotheses_per_construct": dict(sorted(Counter(h.construct for h in hypotheses).items())),
        "decisions": len(real),
        "answers": len(answered),
        "coverage": len(answered) / len(real) if real else 0.0,
        "defer_reasons": dict(sorted(Counter(r for d in decisions for r in d.reasons).items())),
        "facts_per_family": dict(sorted(Counter(f.family.value for f in facts).items())),
        "answers_per_pseudonym": dict(sorted(per_entity.items())),
    }


def dumps_canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def dump_decisions_jsonl(decisions: Iterable[Decision], rename: dict[str, str] | None = None) -> str:
    return "".join(json.dumps(d.to_json(rename), separators=(",", ":")) + "\n" for d in decisions)
