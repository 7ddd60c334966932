"""Typed classroom facts, the schema registry, observation abstraction and the fact store."""

from __future__ import annotations

import bisect
import enum
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence, Union

CONF_FLOOR = 1e-6

Value = Union[str, int, float]


class Family(str, enum.Enum):
    OBS = "OBS"
    EVENT = "EVENT"
    REL = "REL"
    CONTEXT = "CONTEXT"
    POLICY = "POLICY"


class Modality(str, enum.Enum):
    VIDEO = "video"
    AUDIO = "audio"
    LANGUAGE = "language"
    METADATA = "metadata"
    DERIVED = "derived"


MODALITIES = frozenset(m.value for m in Modality)

# which parts of the positional form each family carries
HAS_VALUE = {Family.OBS: True, Family.EVENT: False, Family.REL: False,
             Family.CONTEXT: True, Family.POLICY: True}
HAS_TIME = {Family.OBS: True, Family.EVENT: True, Family.REL: True,
            Family.CONTEXT: True, Family.POLICY: False}
HAS_CONF = {Family.OBS: True, Family.EVENT: True, Family.REL: True,
            Family.CONTEXT: False, Family.POLICY: False}


def clamp_conf(c: float, eps: float = CONF_FLOOR) -> float:
    return min(1.0, max(eps, c))


@dataclass(frozen=True, order=True)
class TimeRef:
    start: int
    end: int

    def __post_init__(self) -> None:
        if self.start < 0 or self.end < self.start:
            raise ValueError(f"invalid time reference [{self.start},{self.end}]")

    @classmethod
    def at(cls, tick: int) -> "TimeRef":
        return cls(tick, tick)

    @property
    def is_instant(self) -> bool:
        return self.start == self.end

    @property
    def length(self) -> int:
        return self.end - self.start

    def overlaps(self, other: "TimeRef") -> bool:
        return self.start <= other.end and other.start <= self.end

    def hull(self, other: "TimeRef") -> "TimeRef":
        return TimeRef(min(self.start, other.start), max(self.end, other.end))


def hull(times: Iterable[TimeRef]) -> TimeRef:
    times = list(times)
    return TimeRef(min(t.start for t in times), max(t.end for t in times))


def temporal_iou(a: TimeRef, b: TimeRef) -> float:
    """Continuous-measure IoU of two closed intervals.

    Two instants score 1.0 when equal and 0.0 otherwise; an instant against a
    proper interval has zero measure and scores 0.0.
    """
    inter = max(0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - inter
    if union == 0:
        return 1.0 if a == b else 0.0
    return inter / union


@dataclass(frozen=True)
class Provenance:
    source: str
    modality: str
    raw_ref: str | None = None

    def stripped(self) -> "Provenance":
        return replace(self, raw_ref=None)


@dataclass(frozen=True)
class Fact:
    id: str
    predicate: str
    family: Family
    args: tuple[str, ...]
    value: Value | None
    time: TimeRef
    conf: float
    prov: Provenance

    @property
    def modality(self) -> str:
        return self.prov.modality

    def entities(self) -> tuple[str, ...]:
        return self.args

    def to_json(self, *, raw_refs: bool = True) -> dict[str, Any]:
        prov: dict[str, Any] = {"source": self.prov.source, "modality": self.prov.modality}
        if raw_refs:
            prov["raw_ref"] = self.prov.raw_ref
        return {
            "id": self.id,
            "predicate": self.predicate,
            "family": self.family.value,
            "args": list(self.args),
            "value": self.value,
            "time": {"start": self.time.start, "end": self.time.end},
            "conf": self.conf,
            "prov": prov,
        }

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "Fact":
        p = d["prov"]
        return cls(
            id=d["id"],
            predicate=d["predicate"],
            family=Family(d["family"]),
            args=tuple(d["args"]),
            value=d.get("value"),
            time=TimeRef(d["time"]["start"], d["time"]["end"]),
            conf=float(d["conf"]),
            prov=Provenance(p["source"], p["modality"], p.get("raw_ref")),
        )


@dataclass(frozen=True)
class CandidateObservation:
    kind: str
    entities: tuple[str, ...]
    time: TimeRef
    conf: float
    prov: Provenance
    payload: Mapping[str, Value] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.entities:
            raise ValueError("candidate observation needs at least one entity")
        if not 0.0 <= self.conf <= 1.0:
            raise ValueError(f"confidence {self.conf} outside [0,1]")


# -- registry -----------------------------------------------------------------


@dataclass(frozen=True)
class PredicateSpec:
    name: str
    family: Family
    roles: tuple[str, ...]
    value_role: str | None = None
    modality: str = "derived"

    @property
    def arity(self) -> int:
        return len(self.roles)


@dataclass(frozen=True)
class Exclusion:
    """Functional key: facts selected by ``where`` admit one value per key and instant."""

    predicate: str
    key: tuple[int, ...]
    where: tuple[tuple[int, str], ...] = ()

    def selects(self, fact: Fact) -> bool:
        return all(pos < len(fact.args) and fact.args[pos] == sym for pos, sym in self.where)

    def key_of(self, fact: Fact) -> tuple[str, ...]:
        return tuple(fact.args[i] for i in self.key)


@dataclass(frozen=True)
class ObservationMapping:
    predicate: str
    args: tuple[str, ...]
    value: str | None = None


class RegistryError(ValueError):
    pass


class SchemaRegistry:
    """Predicate families, arities, aliases and functional keys for one deployment."""

    def __init__(
        self,
        predicates: Iterable[PredicateSpec],
        aliases: Mapping[str, tuple[str, str]] | None = None,
        exclusions: Iterable[Exclusion] = (),
        domains: Mapping[str, Sequence[str]] | None = None,
        observations: Mapping[str, ObservationMapping] | None = None,
    ) -> None:
        self.predicates: dict[str, PredicateSpec] = {}
        for spec in predicates:
            if spec.name in self.predicates:
                raise RegistryError(f"predicate {spec.name} registered twice")
            self.predicates[spec.name] = spec
        self.aliases: dict[str, tuple[str, str]] = dict(aliases or {})
        for alias, (target, modality) in self.aliases.items():
            if target not in self.predicates:
                raise RegistryError(f"alias {alias} targets unknown predicate {target}")
            if alias in self.predicates:
                raise RegistryError(f"alias {alias} shadows a predicate")
            if modality not in MODALITIES:
                raise RegistryError(f"alias {alias} has unknown modality {modality}")
        self.exclusions = tuple(exclusions)
        for ex in self.exclusions:
            if ex.predicate not in self.predicates:
                raise RegistryError(f"exclusion on unknown predicate {ex.predicate}")
        self.domains = {k: tuple(v) for k, v in (domains or {}).items()}
        self.observations = dict(observations or {})
        for kind, m in self.observations.items():
            if not self.is_known(m.predicate):
                raise RegistryError(f"observation kind {kind} maps to unknown predicate {m.predicate}")

    # lookups

    def is_known(self, predicate: str) -> bool:
        return predicate in self.predicates or predicate in self.aliases

    def canonical(self, predicate: str) -> str:
        if predicate in self.aliases:
            return self.aliases[predicate][0]
        return predicate

    def spec(self, predicate: str) -> PredicateSpec:
        try:
            return self.predicates[self.canonical(predicate)]
        except KeyError:
            raise KeyError(f"unregistered predicate {predicate}") from None

    def family(self, predicate: str) -> Family:
        return self.spec(predicate).family

    def default_modality(self, predicate: str) -> str:
        if predicate in self.aliases:
            return self.aliases[predicate][1]
        return self.spec(predicate).modality

    def pattern_width(self, predicate: str) -> int:
        """Number of positional terms in a rule/query pattern (args plus value slot)."""
        spec = self.spec(predicate)
        return spec.arity + (1 if HAS_VALUE[spec.family] else 0)

    def role_index(self, predicate: str, role: str) -> int | None:
        spec = self.spec(predicate)
        if role in spec.roles:
            return spec.roles.index(role)
        if spec.value_role is not None and role == spec.value_role:
            return spec.arity
        return None

    def substitution_domain(self, fact: Fact) -> tuple[int | None, tuple[str, ...]]:
        """Slot that noise may substitute (arg position, or None for the value) and its alternatives."""
        canon = self.canonical(fact.predicate)
        fam = self.family(canon)
        if fam is Family.OBS and len(fact.args) > 1:
            return None, self.domains.get(f"{canon}.{fact.args[1]}", ())
        if fam in (Family.EVENT, Family.REL) and len(fact.args) > 1:
            dom = self.domains.get(canon, ())
            return (1, dom) if fact.args[1] in dom else (1, ())
        return None, ()

    # serialization

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SchemaRegistry":
        preds = []
        for name, p in d.get("predicates", {}).items():
            fam = Family(p["family"])
            modality = p.get("modality", "derived")
            if modality not in MODALITIES:
                raise RegistryError(f"predicate {name} has unknown modality {modality}")
            preds.append(PredicateSpec(name, fam, tuple(p["roles"]), p.get("value_role"), modality))
        aliases = {a: (v["target"], v.get("modality", "derived")) for a, v in d.get("aliases", {}).items()}
        exclusions = [
            Exclusion(e["predicate"], tuple(e["key"]),
                      tuple(sorted((int(k), v) for k, v in e.get("where", {}).items())))
            for e in d.get("exclusions", [])
        ]
        observations = {
            k: ObservationMapping(v["predicate"], tuple(v["args"]), v.get("value"))
            for k, v in d.get("observations", {}).items()
        }
        return cls(preds, aliases, exclusions, d.get("domains", {}), observations)

    @classmethod
    def load(cls, path: str | Path) -> "SchemaRegistry":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


_DEFAULT: SchemaRegistry | None = None


def default_registry() -> SchemaRegistry:
    global _DEFAULT
    if _DEFAULT is None:
        text = resources.files("nscr.data").joinpath("registry.json").read_text(encoding="utf-8")
        _DEFAULT = SchemaRegistry.from_dict(json.loads(text))
    return _DEFAULT


# -- fact construction and validation ---------------------------------------------


def _fmt_value(v: Value) -> str:
    return v if isinstance(v, str) else repr(v)


def content_id(predicate: str, args: Sequence[str], value: Value | None, time: TimeRef,
               conf: float, source: str, modality: str) -> str:
    """Deterministic fact id derived from content, so the same fact gets the same id everywhere."""
    key = "|".join([predicate, ",".join(args), "" if value is None else _fmt_value(value),
                    f"{time.start}:{time.end}", repr(float(conf)), source, modality])
    return "f" + hashlib.sha1(key.encode("utf-8")).hexdigest()[:12]


def make_fact(
    predicate: str,
    args: Sequence[str],
    value: Value | None = None,
    time: TimeRef | int | tuple[int, int] = 0,
    conf: float = 1.0,
    *,
    source: str = "fact_file",
    modality: str | None = None,
    raw_ref: str | None = None,
    id: str | None = None,
    registry: SchemaRegistry | None = None,
) -> Fact:
    """Convenience constructor filling family, modality and id from the registry."""
    registry = registry or default_registry()
    if isinstance(time, int):
        time = TimeRef.at(time)
    elif isinstance(time, tuple):
        time = TimeRef(*time)
    family = registry.family(predicate)
    modality = modality or registry.default_modality(predicate)
    if id is None:
        id = content_id(predicate, args, value, time, conf, source, modality)
    return Fact(id, predicate, family, tuple(args), value, time, float(conf),
                Provenance(source, modality, raw_ref))


@dataclass(frozen=True)
class Violation:
    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


def validate_fact(fact: Fact, registry: SchemaRegistry) -> list[Violation]:
    """Check a fact against its own invariants and the registry. Empty list means valid."""
    out: list[Violation] = []
    if not registry.is_known(fact.predicate):
        return [Violation("unregistered_predicate", f"predicate {fact.predicate} is not registered")]
    spec = registry.spec(fact.predicate)
    if fact.family is not spec.family:
        out.append(Violation("family", f"{fact.predicate} belongs to {spec.family.value}, not {fact.family.value}"))
    if len(fact.args) != spec.arity:
        out.append(Violation("arity", f"{fact.predicate} takes {spec.arity} arguments, got {len(fact.args)}"))
    if any(not isinstance(a, str) or not a for a in fact.args):
        out.append(Violation("argument", "arguments must be non-empty symbols"))
    if HAS_VALUE[spec.family]:
        if fact.value is None:
            out.append(Violation("value", f"{spec.family.value} facts need a value"))
    elif fact.value is not None:
        out.append(Violation("value", f"{spec.family.value} facts carry no value"))
    if isinstance(fact.value, float) and not math.isfinite(fact.value):
        out.append(Violation("value", "numeric values must be finite"))
    if not isinstance(fact.conf, (int, float)) or not 0.0 <= fact.conf <= 1.0:
        out.append(Violation("confidence", f"confidence {fact.conf} out of range [0,1]"))
    elif not HAS_CONF[spec.family] and fact.conf != 1.0:
        out.append(Violation("confidence", f"{spec.family.value} facts have confidence fixed at 1.0"))
    if not fact.prov.source:
        out.append(Violation("provenance", "provenance source is empty"))
    if fact.prov.modality not in MODALITIES:
        out.append(Violation("provenance", f"unknown modality {fact.prov.modality}"))
    if not fact.id:
        out.append(Violation("id", "fact id is empty"))
    return out


def facts_conflict(f1: Fact, f2: Fact, registry: SchemaRegistry) -> bool:
    """True when both facts fall under one functional key, overlap in time and disagree on value."""
    canon = registry.canonical(f1.predicate)
    if canon != registry.canonical(f2.predicate) or f1.value == f2.value:
        return False
    if not f1.time.overlaps(f2.time):
        return False
    for ex in registry.exclusions:
        if ex.predicate == canon and ex.selects(f1) and ex.selects(f2) and ex.key_of(f1) == ex.key_of(f2):
            return True
    return False


# -- abstraction --------------------------------------------------------------------


@dataclass(frozen=True)
class Skip:
    kind: str
    reason: str


def _resolve_slot(template: str, obs: CandidateObservation) -> Value | None:
    if template.startswith("$"):
        i = int(template[1:])
        return obs.entities[i] if i < len(obs.entities) else None
    if template.startswith("@"):
        return obs.payload.get(template[1:])
    return template


def abstract_observations(
    obs: Sequence[CandidateObservation],
    context: Sequence[Fact],
    registry: SchemaRegistry,
) -> tuple[list[Fact], list[Skip]]:
    """Map candidate observations to facts, keeping each observation's conf and provenance.

    CONTEXT facts are passed through first. Unmapped kinds and observations
    missing a slot end up in the skip report instead of being dropped silently.
    """
    facts: list[Fact] = list(context)
    skipped: list[Skip] = []
    seen = {f.id for f in facts}
    for o in obs:
        mapping = registry.observations.get(o.kind)
        if mapping is None:
            skipped.append(Skip(o.kind, "unmapped observation kind"))
            continue
        args = [_resolve_slot(t, o) for t in mapping.args]
        value = _resolve_slot(mapping.value, o) if mapping.value is not None else None
        if any(a is None for a in args) or (mapping.value is not None and value is None):
            skipped.append(Skip(o.kind, "observation lacks an entity or payload field"))
            continue
        fid = content_id(mapping.predicate, [str(a) for a in args], value, o.time, o.conf,
                         o.prov.source, o.prov.modality)
        fid = unique_id(fid, seen)
        facts.append(Fact(fid, mapping.predicate, registry.family(mapping.predicate),
                          tuple(str(a) for a in args), value, o.time, o.conf, o.prov))
    return facts, skipped


def unique_id(fid: str, seen: set[str]) -> str:
    base, n = fid, 1
    while fid in seen:
        n += 1
        fid = f"{base}~{n}"
    seen.add(fid)
    return fid


# -- store --------------------------------------------------------------------------


def _start_key(f: Fact) -> int:
    return f.time.start


class FactStore:
    """Append-only fact collection indexed by predicate, entity, argument slot and start time.

    Iteration and query results follow insertion order.
    """

    def __init__(self, facts: Iterable[Fact] = (), registry: SchemaRegistry | None = None) -> None:
        self.registry = registry or default_registry()
        self._facts: list[Fact] = []
        self._by_id: dict[str, int] = {}
        self._by_pred: dict[str, list[int]] = {}
        self._by_entity: dict[str, list[int]] = {}
        # (canonical predicate, position, symbol) -> seq numbers sorted by start tick
        self._by_slot: dict[tuple[str, int, Value], list[int]] = {}
        self._by_start: list[tuple[int, int]] = []
        self._pred_starts: dict[str, list[tuple[int, int]]] = {}
        self._slot_starts: dict[tuple[str, int, Value], list[tuple[int, int]]] = {}
        self._max_len = 0
        self._pred_max_len: dict[str, int] = {}
        for f in facts:
            self.add(f)

    def add(self, fact: Fact) -> None:
        if fact.id in self._by_id:
            raise ValueError(f"duplicate fact id {fact.id}")
        seq = len(self._facts)
        self._facts.append(fact)
        self._by_id[fact.id] = seq
        canon = self.registry.canonical(fact.predicate)
        self._by_pred.setdefault(canon, []).append(seq)
        for ent in dict.fromkeys(fact.args):
            self._by_entity.setdefault(ent, []).append(seq)
        key = (fact.time.start, seq)
        bisect.insort(self._by_start, key)
        bisect.insort(self._pred_starts.setdefault(canon, []), key)
        slots: list[Value] = list(fact.args)
        if fact.value is not None:
            slots.append(fact.value)
        for pos, sym in enumerate(slots):
            skey = (canon, pos, sym)
            self._by_slot.setdefault(skey, []).append(seq)
            bisect.insort(self._slot_starts.setdefault(skey, []), key)
        self._max_len = max(self._max_len, fact.time.length)
        self._pred_max_len[canon] = max(self._pred_max_len.get(canon, 0), fact.time.length)

    def __len__(self) -> int:
        return len(self._facts)

    def __iter__(self) -> Iterator[Fact]:
        return iter(self._facts)

    def __contains__(self, fid: object) -> bool:
        return fid in self._by_id

    def get(self, fid: str) -> Fact:
        return self._facts[self._by_id[fid]]

    def seq(self, fid: str) -> int:
        return self._by_id[fid]

    def query(
        self,
        predicate: str | None = None,
        entity: str | None = None,
        window: TimeRef | None = None,
    ) -> list[Fact]:
        """Facts matching every given filter; a window matches facts overlapping it."""
        candidates: list[set[int]] = []
        if predicate is not None:
            candidates.append(set(self._by_pred.get(self.registry.canonical(predicate), ())))
        if entity is not None:
            candidates.append(set(self._by_entity.get(entity, ())))
        if window is not None:
            candidates.append(set(self._window_seqs(self._by_start, window)))
        if not candidates:
            return list(self._facts)
        seqs = set.intersection(*candidates)
        return [self._facts[s] for s in sorted(seqs)]

    def _window_seqs(self, starts: list[tuple[int, int]], window: TimeRef) -> Iterator[int]:
        lo = bisect.bisect_left(starts, (window.start - self._max_len, -1))
        hi = bisect.bisect_right(starts, (window.end, len(self._facts)))
        for start, seq in starts[lo:hi]:
            if self._facts[seq].time.end >= window.start:
                yield seq

    def candidates(
        self,
        predicate: str,
        slot: tuple[int, Value] | None = None,
        start_range: tuple[int | None, int | None] = (None, None),
    ) -> list[Fact]:
        """Facts of a canonical predicate, optionally with a fixed slot symbol and start tick range.

        Results are ordered by (start tick, insertion order). Used by the matcher.
        """
        canon = self.registry.canonical(predicate)
        if slot is not None:
            starts = self._slot_starts.get((canon, slot[0], slot[1]), [])
        else:
            starts = self._pred_starts.get(canon, [])
        lo_t, hi_t = start_range
        lo = 0 if lo_t is None else bisect.bisect_left(starts, (lo_t, -1))
        hi = len(starts) if hi_t is None else bisect.bisect_right(starts, (hi_t, len(self._facts)))
        facts = self._facts
        return [facts[seq] for _, seq in starts[lo:hi]]

    def narrowest(
        self,
        predicate: str,
        slots: Sequence[tuple[int, Value]],
        start_range: tuple[int | None, int | None] = (None, None),
    ) -> list[Fact]:
        """Like ``candidates`` but scans whichever fixed slot (or the bare predicate) has the
        fewest facts starting in ``start_range``. Callers still have to check the other slots."""
        canon = self.registry.canonical(predicate)
        lo_t, hi_t = start_range
        cap = len(self._facts)
        best: tuple[int, int, list[tuple[int, int]]] | None = None
        for starts in [self._pred_starts.get(canon, [])] + [self._slot_starts.get((canon, p, v), []) for p, v in slots]:
            lo = 0 if lo_t is None else bisect.bisect_left(starts, (lo_t, -1))
            hi = len(starts) if hi_t is None else bisect.bisect_right(starts, (hi_t, cap))
            if best is None or hi - lo < best[1] - best[0]:
                best = (lo, hi, starts)
        assert best is not None
        lo, hi, starts = best
        facts = self._facts
        return [facts[seq] for _, seq in starts[lo:hi]]

    def max_length(self, predicate: str) -> int:
        """Longest interval (end - start) among facts of the predicate; 0 when there are none."""
        return self._pred_max_len.get(self.registry.canonical(predicate), 0)

    def slot_count(self, predicate: str, pos: int, sym: Value) -> int:
        return len(self._by_slot.get((self.registry.canonical(predicate), pos, sym), ()))

    def predicate_count(self, predicate: str) -> int:
        return len(self._by_pred.get(self.registry.canonical(predicate), ()))


# -- JSON-lines I/O ----------------------------------------------------------------


def dump_facts_jsonl(facts: Iterable[Fact], *, raw_refs: bool = True) -> str:
    return "".join(json.dumps(f.to_json(raw_refs=raw_refs), separators=(",", ":")) + "\n" for f in facts)


def load_facts_jsonl(text: str) -> list[Fact]:
    return [Fact.from_json(json.loads(line)) for line in text.splitlines() if line.strip()]
