"""Grounding fidelity, selective prediction, calibration and early-warning metrics."""

from __future__ import annotations

import bisect
import csv
import io
import math
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

from nscr.facts import Fact, FactStore, SchemaRegistry, TimeRef, default_registry, facts_conflict, temporal_iou
from nscr.governance import Decision
from nscr.reasoner import Hypothesis

LABEL_IOU = 0.3
SECONDS_PER_HOUR = 3600


class EvaluationError(ValueError):
    pass


# -- level 2: grounding fidelity ------------------------------------------------------


@dataclass(frozen=True)
class MatchCriterion:
    iou_threshold: float = 0.5
    require_args: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.iou_threshold <= 1.0:
            raise EvaluationError(f"IoU threshold must lie in (0,1], got {self.iou_threshold}")


@dataclass(frozen=True)
class Fidelity:
    precision: float
    recall: float
    f1: float
    argument_accuracy: float
    provenance_correctness: float
    matched: int
    n_predicted: int
    n_gold: int

    def to_json(self) -> dict[str, Any]:
        return dict(self.__dict__)


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _greedy(pairs: list[tuple[float, int, int]]) -> list[tuple[int, int]]:
    """One-to-one assignment taking pairs by descending score; ties by index."""
    pairs.sort(key=lambda x: (-x[0], x[1], x[2]))
    used_p: set[int] = set()
    used_g: set[int] = set()
    out = []
    for _, i, j in pairs:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        out.append((i, j))
    return out


def _overlap_pairs(pred: Sequence[TimeRef], gold: Sequence[TimeRef], pi: Sequence[int], gi: Sequence[int],
                   threshold: float) -> list[tuple[float, int, int]]:
    order = sorted(gi, key=lambda j: gold[j].start)
    starts = [gold[j].start for j in order]
    maxlen = max((gold[j].end - gold[j].start for j in order), default=0)
    out = []
    for i in pi:
        t = pred[i]
        lo = bisect.bisect_left(starts, t.start - maxlen)
        hi = bisect.bisect_right(starts, t.end)
        for j in order[lo:hi]:
            iou = temporal_iou(t, gold[j])
            if iou >= threshold:
                out.append((iou, i, j))
    return out


def grounding_fidelity(
    predicted: Sequence[Fact],
    gold: Sequence[Fact],
    crit: MatchCriterion = MatchCriterion(),
    registry: SchemaRegistry | None = None,
) -> Fidelity:
    """Greedy one-to-one fact matching by descending temporal IoU among predicate-equal pairs.

    With ``require_args`` the arguments and value must also agree. With no
    predictions precision is 1; with no gold facts recall is 1.
    """
    reg = registry or default_registry()

    def key(f: Fact) -> tuple:
        canon = reg.canonical(f.predicate)
        return (canon, f.args, repr(f.value)) if crit.require_args else (canon,)

    buckets: dict[tuple, tuple[list[int], list[int]]] = {}
    for i, f in enumerate(predicted):
        buckets.setdefault(key(f), ([], []))[0].append(i)
    for j, f in enumerate(gold):
        buckets.setdefault(key(f), ([], []))[1].append(j)
    ptimes = [f.time for f in predicted]
    gtimes = [f.time for f in gold]
    pairs: list[tuple[float, int, int]] = []
    for pi, gi in buckets.values():
        if pi and gi:
            pairs += _overlap_pairs(ptimes, gtimes, pi, gi, crit.iou_threshold)
    matched = _greedy(pairs)
    n = len(matched)
    precision = n / len(predicted) if predicted else 1.0
    recall = n / len(gold) if gold else 1.0
    args_ok = sum(1 for i, j in matched if predicted[i].args == gold[j].args and predicted[i].value == gold[j].value)
    prov_ok = sum(1 for i, j in matched if predicted[i].modality == gold[j].modality)
    return Fidelity(precision, recall, _f1(precision, recall),
                    args_ok / n if n else 0.0, prov_ok / n if n else 0.0, n, len(predicted), len(gold))


# -- construct labels ---------------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    """Construct-level output: from a decision record, a hypothesis or a label."""

    construct: str
    bindings: tuple[tuple[str, Any], ...]
    time: TimeRef
    support: float = 1.0
    vetoed: bool = False
    answered: bool = True

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "Prediction | None":
        """From a decision-log line (or a label line). Decisions without a candidate give None."""
        if "construct" not in d:
            return None
        t = d["time"]
        reasons = d.get("reasons", [])
        support = d.get("support")
        return cls(
            d["construct"],
            tuple(sorted(d["bindings"].items())),
            TimeRef(t["start"], t["end"]),
            1.0 if support is None else float(support),
            any(r != "below_support" for r in reasons),
            d.get("outcome", "ANSWER") == "ANSWER",
        )


def predictions(decisions: Iterable[Decision | Mapping[str, Any]]) -> list[Prediction]:
    out = []
    for d in decisions:
        p = Prediction.from_json(d.to_json() if isinstance(d, Decision) else d)
        if p is not None:
            out.append(p)
    return out


def _gold_key(label: Any) -> tuple[str, tuple, TimeRef]:
    if isinstance(label, Mapping):
        t = label["time"]
        return label["construct"], tuple(sorted(label["bindings"].items())), TimeRef(t["start"], t["end"])
    return label.construct, tuple(sorted(label.bindings)), label.time


def match_labels(preds: Sequence[Prediction], gold: Sequence[Any], iou: float = LABEL_IOU) -> list[tuple[int, int]]:
    """Equal construct and bindings and temporal IoU >= iou; greedy one-to-one by IoU."""
    keys = [_gold_key(g) for g in gold]
    by_key: dict[tuple, list[int]] = {}
    for j, (c, b, _) in enumerate(keys):
        by_key.setdefault((c, b), []).append(j)
    pairs = []
    for i, p in enumerate(preds):
        for j in by_key.get((p.construct, p.bindings), ()):
            s = temporal_iou(p.time, keys[j][2])
            if s >= iou:
                pairs.append((s, i, j))
    return _greedy(pairs)


def label_scores(preds: Sequence[Prediction], gold: Sequence[Any], iou: float = LABEL_IOU) -> dict[str, float]:
    answered = [p for p in preds if p.answered]
    m = len(match_labels(answered, gold, iou))
    precision = m / len(answered) if answered else 1.0
    recall = m / len(gold) if gold else 1.0
    return {"precision": precision, "recall": recall, "f1": _f1(precision, recall),
            "answered": len(answered), "gold": len(gold), "matched": m}


# -- selective prediction --------------------------------------------------------------


@dataclass(frozen=True)
class Record:
    support: float
    correct: bool
    vetoed: bool = False


def records_from(preds: Sequence[Prediction], gold: Sequence[Any], iou: float = LABEL_IOU) -> list[Record]:
    """One record per construct decision; correct iff it matches a gold label."""
    hit = {i for i, _ in match_labels(preds, gold, iou)}
    return [Record(p.support, i in hit, p.vetoed) for i, p in enumerate(preds)]


@dataclass(frozen=True)
class RiskCoveragePoint:
    tau: float
    coverage: float
    selective_risk: float | None
    n_accepted: int
    n_errors: int

    def to_json(self) -> dict[str, Any]:
        return dict(self.__dict__)


def risk_coverage_curve(records: Sequence[Record], grid: Iterable[float]) -> list[RiskCoveragePoint]:
    """Accept a record iff it is not vetoed and its support is at least tau."""
    if not records:
        raise EvaluationError("risk-coverage needs at least one record")
    n = len(records)
    out = []
    for tau in grid:
        acc = [r for r in records if not r.vetoed and r.support >= tau]
        errs = sum(1 for r in acc if not r.correct)
        out.append(RiskCoveragePoint(tau, len(acc) / n, errs / len(acc) if acc else None, len(acc), errs))
    return out


def tau_grid(lo: float, hi: float, step: float) -> list[float]:
    """Endpoint-inclusive grid; values are rounded to kill float drift."""
    if step <= 0 or hi < lo:
        raise EvaluationError("grid needs step > 0 and hi >= lo")
    n = int(math.floor((hi - lo) / step + 1e-9))
    pts = [round(lo + k * step, 10) for k in range(n + 1)]
    if not math.isclose(pts[-1], hi, abs_tol=1e-9):
        pts.append(hi)
    return pts


def ece(items: Iterable[Record | tuple[float, bool]], n_bins: int = 10) -> float:
    """Expected calibration error over equal-width confidence bins on [0,1]."""
    if n_bins < 1:
        raise EvaluationError("need at least one bin")
    count = [0] * n_bins
    conf_sum = [0.0] * n_bins
    hits = [0] * n_bins
    n = 0
    for it in items:
        c, ok = (it.support, it.correct) if isinstance(it, Record) else it
        b = min(int(c * n_bins), n_bins - 1)
        count[b] += 1
        conf_sum[b] += c
        hits[b] += bool(ok)
        n += 1
    if n == 0:
        raise EvaluationError("ECE needs at least one accepted decision")
    return sum(abs(hits[b] - conf_sum[b]) for b in range(n_bins) if count[b]) / n


# -- level 3 ----------------------------------------------------------------------------


def contradiction_rate(hypotheses: Sequence[Hypothesis], store: FactStore,
                       registry: SchemaRegistry | None = None) -> float:
    """Share of hypotheses whose evidence holds at least one conflicting pair."""
    if not hypotheses:
        return 0.0
    reg = registry or store.registry
    bad = 0
    for h in hypotheses:
        ev = [store.get(fid) for fid in dict.fromkeys(h.evidence)]
        if any(facts_conflict(a, b, reg) for k, a in enumerate(ev) for b in ev[k + 1:]):
            bad += 1
    return bad / len(hypotheses)


# -- early warning ------------------------------------------------------------------------


@dataclass(frozen=True)
class Episode:
    time: TimeRef
    construct: str
    entity: str
    onset: int | None = None

    @property
    def start_of_onset(self) -> int:
        return self.time.start if self.onset is None else self.onset


@dataclass(frozen=True)
class EarlyWarning:
    mean_lead_time: float | None
    false_alert_rate: float | None
    temporal_iou: float | None
    missed_episode_rate: float
    matched: int
    false_alerts: int

    def to_json(self) -> dict[str, Any]:
        return dict(self.__dict__)


def _episode(x: Episode | tuple) -> Episode:
    return x if isinstance(x, Episode) else Episode(*x)


def early_warning_metrics(alerts: Sequence[Episode | tuple], gold: Sequence[Episode | tuple],
                          w: int, duration: int) -> EarlyWarning:
    """An alert matches a gold episode with the same construct and entity when it starts
    within [onset - w, episode end]. Each episode takes the earliest unclaimed qualifying alert.
    False alerts are normalized per hour with one tick per second."""
    al = sorted((_episode(a) for a in alerts), key=lambda a: (a.time.start, a.time.end, a.construct, a.entity))
    gl = sorted((_episode(g) for g in gold), key=lambda g: (g.start_of_onset, g.time.end, g.construct, g.entity))
    claimed: set[int] = set()
    leads, ious = [], []
    for g in gl:
        for k, a in enumerate(al):
            if k in claimed or (a.construct, a.entity) != (g.construct, g.entity):
                continue
            if g.start_of_onset - w <= a.time.start <= g.time.end:
                claimed.add(k)
                leads.append(min(g.start_of_onset - a.time.start, w))
                ious.append(temporal_iou(a.time, g.time))
                break
    false = len(al) - len(claimed)
    hours = duration / SECONDS_PER_HOUR
    return EarlyWarning(
        sum(leads) / len(leads) if leads else None,
        false / hours if hours > 0 else None,
        sum(ious) / len(ious) if ious else None,
        (len(gl) - len(leads)) / len(gl) if gl else 0.0,
        len(leads),
        false,
    )


def warnings_from(preds: Sequence[Prediction], construct: str) -> list[Episode]:
    return [Episode(p.time, p.construct, str(p.bindings[0][1])) for p in preds
            if p.answered and p.construct == construct and p.bindings]


def gold_episodes(labels: Sequence[Any], construct: str) -> list[Episode]:
    out = []
    for lb in labels:
        c, b, t = _gold_key(lb)
        if c == construct and b:
            onset = lb["onset"] if isinstance(lb, Mapping) else lb.onset
            out.append(Episode(t, c, str(b[0][1]), onset))
    return out


def curve_csv(points: Sequence[RiskCoveragePoint]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["tau", "coverage", "selective_risk", "n_accepted", "n_errors"])
    for p in points:
        wr.writerow([repr(p.tau), repr(p.coverage), "" if p.selective_risk is None else repr(p.selective_risk),
                     p.n_accepted, p.n_errors])
    return buf.getvalue()
