"""Seeded synthetic classroom episodes.

The generator writes a clean ground-truth script (facts plus construct labels)
and passes every non-metadata fact through a per-modality noise model to get a
candidate-observation stream. Each construct template is the generative
counterpart of the matching bundled rule.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from nscr.facts import (
    CandidateObservation,
    Fact,
    Family,
    Provenance,
    SchemaRegistry,
    TimeRef,
    Value,
    abstract_observations,
    default_registry,
    make_fact,
)

SOURCE = "simgen"
PAD = 25  # minimum idle ticks around every scripted episode
TEACHER = "teacher"
DISCUSSION = "whole_class_discussion"
CONSTRUCTS = ("confusion", "participation", "collaboration", "distractor")
LENGTH = {"confusion": 11, "participation": 16, "collaboration": 21, "distractor": 6}
LABEL_NAME = {
    "confusion": "confusion_candidate",
    "participation": "participation_opportunity",
    "collaboration": "collaboration_episode",
}
CONFIDENCE_MODELS = ("calibrated", "overconfident", "underconfident")


class SimConfigError(ValueError):
    """Invalid or infeasible configuration; the message names the offending field."""


@dataclass(frozen=True)
class NoiseModel:
    miss_rate: float = 0.0
    substitution_rate: float = 0.0
    confidence_model: str = "calibrated"
    delta: float = 0.0

    def __post_init__(self) -> None:
        for name in ("miss_rate", "substitution_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SimConfigError(f"noise.{name} must lie in [0,1], got {v}")
        if self.confidence_model not in CONFIDENCE_MODELS:
            raise SimConfigError(f"noise.confidence_model must be one of {', '.join(CONFIDENCE_MODELS)}")
        if not 0.0 <= self.delta <= 0.5:
            raise SimConfigError(f"noise.delta must lie in [0,0.5], got {self.delta}")

    def report(self, c: float) -> float:
        if self.confidence_model == "overconfident":
            return min(1.0, c + self.delta)
        if self.confidence_model == "underconfident":
            return max(0.0, c - self.delta)
        return c

    def to_json(self) -> dict[str, Any]:
        return {"miss_rate": self.miss_rate, "substitution_rate": self.substitution_rate,
                "confidence_model": self.confidence_model, "delta": self.delta}


ZERO_NOISE = NoiseModel()


@dataclass(frozen=True)
class Segment:
    activity: str
    start: int
    end: int

    @property
    def time(self) -> TimeRef:
        return TimeRef(self.start, self.end)


@dataclass(frozen=True)
class SimConfig:
    seed: int
    n_students: int
    n_groups: int
    duration: int
    timeline: tuple[Segment, ...]
    rates: Mapping[str, float] = field(default_factory=dict)
    noise: Mapping[str, NoiseModel] = field(default_factory=dict)
    gaze_period: int = 0  # 0 turns ambient gaze off
    membership: bool = True

    def __post_init__(self) -> None:
        if self.n_students < 1:
            raise SimConfigError("n_students must be at least 1")
        if self.n_groups < 1:
            raise SimConfigError("n_groups must be at least 1")
        if self.duration < 0:
            raise SimConfigError("duration must be non-negative")
        if self.gaze_period < 0:
            raise SimConfigError("gaze_period must be non-negative")
        if not self.timeline:
            raise SimConfigError("timeline needs at least one segment")
        expect = 0
        for i, seg in enumerate(self.timeline):
            if seg.start != expect or seg.end < seg.start:
                raise SimConfigError(f"timeline[{i}] must start at {expect} and not end before it starts")
            expect = seg.end + 1
        if expect != self.duration + 1:
            raise SimConfigError(f"timeline must end at duration {self.duration}")
        for name, r in self.rates.items():
            if name not in CONSTRUCTS:
                raise SimConfigError(f"rates.{name} is not a known scenario ({', '.join(CONSTRUCTS)})")
            if r < 0:
                raise SimConfigError(f"rates.{name} must be non-negative")

    def noise_for(self, modality: str) -> NoiseModel:
        return self.noise.get(modality, ZERO_NOISE)

    def to_json(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "n_students": self.n_students,
            "n_groups": self.n_groups,
            "duration": self.duration,
            "timeline": [{"activity": s.activity, "start": s.start, "end": s.end} for s in self.timeline],
            "rates": dict(sorted(self.rates.items())),
            "noise": {m: n.to_json() for m, n in sorted(self.noise.items())},
            "gaze_period": self.gaze_period,
            "membership": self.membership,
        }

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "SimConfig":
        try:
            timeline = tuple(Segment(str(s["activity"]), int(s["start"]), int(s["end"])) for s in d["timeline"])
            noise = {m: NoiseModel(**n) for m, n in d.get("noise", {}).items()}
            return cls(
                seed=int(d["seed"]),
                n_students=int(d["n_students"]),
                n_groups=int(d.get("n_groups", 1)),
                duration=int(d["duration"]),
                timeline=timeline,
                rates={k: float(v) for k, v in d.get("rates", {}).items()},
                noise=noise,
                gaze_period=int(d.get("gaze_period", 0)),
                membership=bool(d.get("membership", True)),
            )
        except KeyError as err:
            raise SimConfigError(f"missing config field {err.args[0]}") from None
        except (TypeError, ValueError) as err:
            if isinstance(err, SimConfigError):
                raise
            raise SimConfigError(f"malformed config: {err}") from None

    def with_seed(self, seed: int) -> "SimConfig":
        d = self.to_json()
        d["seed"] = seed
        return SimConfig.from_json(d)


def load_config(path: str | Path) -> SimConfig:
    return SimConfig.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def default_config() -> SimConfig:
    from importlib import resources

    return SimConfig.from_json(json.loads(resources.files("nscr.data").joinpath("sim_default.json").read_text()))


@dataclass(frozen=True)
class Label:
    construct: str
    bindings: tuple[tuple[str, str], ...]
    time: TimeRef
    onset: int

    @property
    def subject(self) -> tuple[str, ...]:
        return tuple(v for _, v in self.bindings)

    def to_json(self) -> dict[str, Any]:
        return {"construct": self.construct, "bindings": dict(self.bindings),
                "time": {"start": self.time.start, "end": self.time.end}, "onset": self.onset}

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "Label":
        t = d["time"]
        return cls(d["construct"], tuple(d["bindings"].items()), TimeRef(t["start"], t["end"]),
                   int(d.get("onset", t["start"])))


@dataclass(frozen=True)
class GroundTruth:
    facts: tuple[Fact, ...]
    labels: tuple[Label, ...]

    @property
    def metadata(self) -> list[Fact]:
        """Noise-free background facts: activity context and group membership."""
        return [f for f in self.facts if f.modality == "metadata"]

    @property
    def observable(self) -> list[Fact]:
        return [f for f in self.facts if f.modality != "metadata"]


@dataclass(frozen=True)
class Episode:
    config: SimConfig
    gt: GroundTruth
    obs: tuple[CandidateObservation, ...]
    obs_facts: tuple[Fact, ...]  # metadata facts plus abstracted observations


def subseed(seed: int, stream: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{stream}".encode()).digest()[:8], "big")


# -- noise ----------------------------------------------------------------------------


def observation_for(fact: Fact, registry: SchemaRegistry) -> tuple[str, tuple[str, ...], dict[str, Value]]:
    """Invert the registry's observation mappings: (kind, entities, payload) that abstracts back to ``fact``."""
    slots: tuple[Value, ...] = fact.args if fact.value is None else fact.args + (fact.value,)
    best = None
    for kind, m in registry.observations.items():
        if m.predicate != fact.predicate:
            continue
        templates = m.args + ((m.value,) if m.value is not None else ())
        if len(templates) != len(slots):
            continue
        if any(not t.startswith(("$", "@")) and t != s for t, s in zip(templates, slots)):
            continue
        consts = sum(1 for t in templates if not t.startswith(("$", "@")))
        if best is None or consts > best[0]:
            best = (consts, kind, templates)
    if best is None:
        raise ValueError(f"no observation kind produces {fact.predicate} facts like {fact.id}")
    _, kind, templates = best
    ents: dict[int, str] = {}
    payload: dict[str, Value] = {}
    for t, s in zip(templates, slots):
        if t.startswith("$"):
            ents[int(t[1:])] = str(s)
        elif t.startswith("@"):
            payload[t[1:]] = s
    return kind, tuple(ents[i] for i in sorted(ents)), payload


def corrupt(
    fact: Fact,
    noise: NoiseModel,
    rng: random.Random,
    registry: SchemaRegistry | None = None,
    raw_ref: str | None = None,
) -> CandidateObservation | None:
    """Pass one true fact through the noise model.

    Miss first; then draw a correctness probability c around 1 - substitution_rate,
    keep the true value with probability c and otherwise substitute a different
    registry-valid value. The reported confidence is c in calibrated mode and
    c shifted by delta (clipped to [0,1]) otherwise.
    """
    registry = registry or default_registry()
    if rng.random() < noise.miss_rate:
        return None
    pos, domain = registry.substitution_domain(fact)
    current = fact.value if pos is None else fact.args[pos]
    alternatives = [v for v in domain if v != current]
    args, value = fact.args, fact.value
    c = 1.0
    if alternatives and current in domain:
        mid = 1.0 - noise.substitution_rate
        r = min(mid, 1.0 - mid, 0.2)
        c = rng.uniform(mid - r, mid + r) if r > 0 else mid
        if rng.random() >= c:
            pick = rng.choice(alternatives)
            if pos is None:
                value = pick
            else:
                args = args[:pos] + (pick,) + args[pos + 1:]
    shown = fact if (args, value) == (fact.args, fact.value) else Fact(
        fact.id, fact.predicate, fact.family, args, value, fact.time, fact.conf, fact.prov)
    kind, ents, payload = observation_for(shown, registry)
    return CandidateObservation(kind, ents, fact.time, noise.report(c),
                                Provenance(SOURCE, fact.modality, raw_ref), payload)


# -- scripting ---------------------------------------------------------------------------


class _Script:
    def __init__(self, cfg: SimConfig, registry: SchemaRegistry) -> None:
        self.cfg = cfg
        self.reg = registry
        self.rng = random.Random(subseed(cfg.seed, "script"))
        self.students = [f"student_{i + 1}" for i in range(cfg.n_students)]
        self.group_of = {s: f"group_{i % cfg.n_groups + 1}" for i, s in enumerate(self.students)}
        self.facts: list[Fact] = []
        self.labels: list[Label] = []
        self.busy: dict[str, list[TimeRef]] = {}

    def fact(self, predicate: str, args: Sequence[str], value: Value | None, time: tuple[int, int],
             modality: str | None = None) -> Fact:
        f = make_fact(predicate, args, value, time, 1.0, source=SOURCE, modality=modality, registry=self.reg)
        self.facts.append(f)
        return f

    def label(self, construct: str, bindings: Sequence[tuple[str, str]], time: TimeRef, onset: int) -> None:
        self.labels.append(Label(LABEL_NAME[construct], tuple(bindings), time, onset))

    # templates -- each places its episode at tick t

    def confusion(self, t: int) -> None:
        s = self.rng.choice(self.students)
        self.fact("EVENT", (TEACHER, "open_question", "class"), None, (t, t + 3), "audio")
        a = self.fact("EVENT", (s, "failed_attempt", "worksheet"), None, (t + 4, t + 7), "video")
        self.fact("UTTER", (s, "help_request", TEACHER), None, (t + 8, t + 10))
        self.fact("OBS", (s, "gaze_target"), "worksheet", (t + 9, t + 9), "video")
        self.busy.setdefault(s, []).append(TimeRef(t, t + LENGTH["confusion"] - 1))
        self.label("confusion", [("S", s)], TimeRef(t, t + 10), a.time.start)

    def participation(self, t: int) -> None:
        end = t + 15
        self.fact("UTTER", (TEACHER, "open_floor", "class"), None, (t, end))
        order = self.students[:]
        self.rng.shuffle(order)
        speaker = order.pop(0) if len(order) > 1 and self.rng.random() < 0.5 else None
        if speaker is not None:
            self.fact("OBS", (speaker, "body_orientation"), "teacher", (t + 2, t + 12), "video")
            self.fact("EVENT", (speaker, "speak_turn", "class"), None, (t + 5, t + 8), "audio")
        for i, s in enumerate(order):
            if i == 0 or self.rng.random() < 0.6:
                self.fact("OBS", (s, "body_orientation"), "teacher", (t + 2, t + 12), "video")
                self.label("participation", [("S", s)], TimeRef(t, end), t)
            else:
                self.fact("OBS", (s, "body_orientation"), "away", (t + 2, t + 12), "video")

    def collaboration(self, t: int) -> None:
        groups: dict[str, list[str]] = {}
        for s in self.students:
            groups.setdefault(self.group_of[s], []).append(s)
        eligible = [g for g in sorted(groups) if len(groups[g]) >= 2]
        if not eligible:
            raise SimConfigError("rates.collaboration needs a group with at least two students")
        g = self.rng.choice(eligible)
        a, b = self.rng.sample(groups[g], 2)
        self.fact("REL", (a, "mutual_orientation", b), None, (t, t + 20), "video")
        self.fact("EVENT", (a, "speak_turn", g), None, (t + 3, t + 5), "audio")
        self.fact("EVENT", (b, "speak_turn", g), None, (t + 8, t + 10), "audio")
        self.fact("EVENT", (a, "artifact_reference", "worksheet"), None, (t + 12, t + 13), "video")
        self.fact("EVENT", (b, "artifact_reference", "worksheet"), None, (t + 15, t + 16), "video")
        self.label("collaboration", [("A", a), ("B", b)], TimeRef(t, t + 20), t)

    def distractor(self, t: int) -> None:
        s = self.rng.choice(self.students)
        kind = self.rng.randrange(5)
        if kind == 0:  # lecture: students face the teacher but the floor is closed
            self.fact("EVENT", (TEACHER, "lecture", "class"), None, (t, t + 5), "audio")
            for s2 in self.students:
                if self.rng.random() < 0.5:
                    self.fact("OBS", (s2, "body_orientation"), "teacher", (t + 1, t + 4), "video")
        elif kind == 1:
            self.fact("EVENT", (s, "hand_raise", TEACHER), None, (t, t + 2), "video")
        elif kind == 2:
            self.fact("UTTER", (s, "off_topic_remark", "peer"), None, (t + 1, t + 3))
        elif kind == 3:
            self.fact("EVENT", (s, "correct_attempt", "worksheet"), None, (t, t + 4), "video")
        else:  # benign look away
            self.fact("OBS", (s, "gaze_target"), "window", (t + 2, t + 2), "video")
            self.busy.setdefault(s, []).append(TimeRef(t, t + LENGTH["distractor"] - 1))

    def plan_segment(self, i: int, seg: Segment) -> None:
        plan: list[str] = []
        for name in CONSTRUCTS:
            rate = self.cfg.rates.get(name, 0.0)
            if name == "participation" and seg.activity != DISCUSSION:
                continue  # the floor only opens in whole-class discussion
            k = int(rate)
            if self.rng.random() < rate - k:
                k += 1
            plan += [name] * k
        self.rng.shuffle(plan)
        need = sum(LENGTH[c] for c in plan) + PAD * (len(plan) + 1)
        span = seg.end - seg.start + 1
        if need > span:
            raise SimConfigError(
                f"timeline[{i}] ({seg.activity} [{seg.start},{seg.end}]) cannot fit {len(plan)} episodes: "
                f"needs {need} ticks, has {span}")
        cuts = sorted(self.rng.randint(0, span - need) for _ in plan)
        t = seg.start + PAD
        for name, cut in zip(plan, cuts):
            getattr(self, name)(t + cut)
            t += LENGTH[name] + PAD

    def ambient_gaze(self) -> None:
        period = self.cfg.gaze_period
        if period <= 0:
            return
        rng = random.Random(subseed(self.cfg.seed, "ambient"))
        domain = self.reg.domains.get("OBS.gaze_target", ())
        for tick in range(rng.randrange(period), self.cfg.duration + 1, period):
            for s in self.students:
                if any(b.start <= tick <= b.end for b in self.busy.get(s, ())):
                    continue
                self.fact("OBS", (s, "gaze_target"), rng.choice(domain), (tick, tick), "video")


def _order(f: Fact) -> tuple:
    return (f.time.start, f.time.end, f.predicate, f.args, str(f.value))


def generate_ground_truth(cfg: SimConfig, registry: SchemaRegistry | None = None) -> GroundTruth:
    reg = registry or default_registry()
    sc = _Script(cfg, reg)
    meta = [make_fact("CONTEXT", ("activity",), seg.activity, (seg.start, seg.end), 1.0,
                      source=SOURCE, registry=reg) for seg in cfg.timeline]
    if cfg.membership:
        meta += [make_fact("REL", (s, "member_of", sc.group_of[s]), None, (0, cfg.duration), 1.0,
                           source=SOURCE, modality="metadata", registry=reg) for s in sc.students]
    for i, seg in enumerate(cfg.timeline):
        sc.plan_segment(i, seg)
    sc.ambient_gaze()
    facts = sorted(sc.facts, key=_order)
    labels = sorted(sc.labels, key=lambda lb: (lb.time.start, lb.construct, lb.subject))
    return GroundTruth(tuple(meta + facts), tuple(labels))


def generate_episode(cfg: SimConfig, registry: SchemaRegistry | None = None) -> tuple[GroundTruth, list[CandidateObservation]]:
    """Deterministic given the config: ground truth plus the noisy observation stream.

    Metadata (activity context, membership) is never corrupted. Each modality
    draws from its own RNG stream so toggling one channel's noise leaves the others unchanged.
    """
    reg = registry or default_registry()
    gt = generate_ground_truth(cfg, reg)
    rngs: dict[str, random.Random] = {}
    obs: list[CandidateObservation] = []
    for f in gt.observable:
        rng = rngs.setdefault(f.modality, random.Random(subseed(cfg.seed, f"noise:{f.modality}")))
        o = corrupt(f, cfg.noise_for(f.modality), rng, reg, raw_ref=f"sim://{cfg.seed}/{f.modality}/{f.id}")
        if o is not None:
            obs.append(o)
    return gt, obs


def simulate(cfg: SimConfig, registry: SchemaRegistry | None = None) -> Episode:
    reg = registry or default_registry()
    gt, obs = generate_episode(cfg, reg)
    facts, skipped = abstract_observations(obs, gt.metadata, reg)
    assert not skipped, skipped
    return Episode(cfg, gt, tuple(obs), tuple(facts))


def is_metadata(f: Fact) -> bool:
    return f.modality == "metadata" or f.family is Family.CONTEXT


def dump_labels_jsonl(labels: Sequence[Label]) -> str:
    return "".join(json.dumps(lb.to_json(), separators=(",", ":")) + "\n" for lb in labels)


def load_labels_jsonl(text: str) -> list[Label]:
    return [Label.from_json(json.loads(line)) for line in text.splitlines() if line.strip()]
