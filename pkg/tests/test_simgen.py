from __future__ import annotations

import math
import random
from dataclasses import replace

import pytest

from nscr.facts import dump_facts_jsonl, make_fact
from nscr.simgen import (
    NoiseModel,
    Segment,
    SimConfig,
    SimConfigError,
    ZERO_NOISE,
    corrupt,
    default_config,
    dump_labels_jsonl,
    generate_ground_truth,
    load_labels_jsonl,
    simulate,
)


def small(seed=1, noise=None, **kw):
    base = dict(seed=seed, n_students=6, n_groups=2, duration=899,
                timeline=(Segment("whole_class_discussion", 0, 449), Segment("small_group_work", 450, 899)),
                rates={"confusion": 2, "participation": 1, "collaboration": 1, "distractor": 2},
                noise=noise or {}, gaze_period=20)
    base.update(kw)
    return SimConfig(**base)


def test_same_seed_same_episode():
    a, b = simulate(small(3)), simulate(small(3))
    assert dump_facts_jsonl(a.obs_facts) == dump_facts_jsonl(b.obs_facts)
    assert dump_labels_jsonl(a.gt.labels) == dump_labels_jsonl(b.gt.labels)
    c = simulate(small(4))
    assert dump_facts_jsonl(a.gt.facts) != dump_facts_jsonl(c.gt.facts)


def test_zero_noise_keeps_every_fact():
    ep = simulate(small(5))
    strip = lambda fs: sorted((f.predicate, f.args, f.value, f.time, f.conf) for f in fs)  # noqa: E731
    assert strip(ep.obs_facts) == strip(ep.gt.facts)


def test_full_miss_leaves_only_metadata():
    noise = {m: NoiseModel(miss_rate=1.0) for m in ("video", "audio", "language")}
    ep = simulate(small(5, noise))
    assert ep.obs == ()
    assert all(f.modality == "metadata" for f in ep.obs_facts)


def test_infeasible_timeline_names_segment():
    cfg = small(rates={"confusion": 40})
    with pytest.raises(SimConfigError, match=r"timeline\[0\]"):
        generate_ground_truth(cfg)


@pytest.mark.parametrize(
    "kw, field",
    [
        (dict(n_students=0), "n_students"),
        (dict(timeline=(Segment("a", 0, 10),)), "duration"),
        (dict(timeline=(Segment("a", 0, 10), Segment("b", 12, 899))), r"timeline\[1\]"),
        (dict(rates={"boredom": 1}), "rates.boredom"),
    ],
)
def test_config_errors(kw, field):
    with pytest.raises(SimConfigError, match=field):
        small(**kw)


def test_noise_model_validation():
    with pytest.raises(SimConfigError, match="miss_rate"):
        NoiseModel(miss_rate=1.5)
    with pytest.raises(SimConfigError, match="confidence_model"):
        NoiseModel(confidence_model="optimistic")


def test_config_json_round_trip():
    cfg = default_config()
    assert SimConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(SimConfigError, match="missing config field"):
        SimConfig.from_json({"seed": 1})


def test_participation_only_in_discussion():
    ep = simulate(small(9, rates={"participation": 3}))
    for lb in ep.gt.labels:
        assert lb.time.end <= 449


def test_substitution_rate_is_realised():
    rng = random.Random(0)
    fact = make_fact("OBS", ("s1", "gaze_target"), "worksheet", 5, 1.0, modality="video")
    noise = NoiseModel(substitution_rate=0.6)
    swapped = 0
    for _ in range(2000):
        o = corrupt(fact, noise, rng)
        assert o is not None and o.conf < 1.0
        swapped += o.payload["target"] != "worksheet"
    assert abs(swapped / 2000 - 0.6) <= 3 * math.sqrt(0.24 / 2000)


def test_calibrated_confidences_are_honest():
    rng = random.Random(1)
    fact = make_fact("OBS", ("s1", "gaze_target"), "worksheet", 5, 1.0, modality="video")
    noise = NoiseModel(substitution_rate=0.25)
    hits = []
    for _ in range(20000):
        o = corrupt(fact, noise, rng)
        if 0.7 <= o.conf < 0.8:
            hits.append((o.conf, o.payload["target"] == "worksheet"))
    n = len(hits)
    mean_c = sum(c for c, _ in hits) / n
    acc = sum(ok for _, ok in hits) / n
    assert abs(acc - mean_c) <= 3 * math.sqrt(mean_c * (1 - mean_c) / n)


def test_overconfident_shift():
    assert NoiseModel(confidence_model="overconfident", delta=0.2).report(0.7) == pytest.approx(0.9)
    assert NoiseModel(confidence_model="overconfident", delta=0.2).report(0.95) == 1.0
    assert NoiseModel(confidence_model="underconfident", delta=0.2).report(0.7) == pytest.approx(0.5)
    assert ZERO_NOISE.report(0.3) == 0.3


def test_noise_streams_are_independent():
    noisy_video = {"video": NoiseModel(miss_rate=0.5)}
    a = simulate(small(2))
    b = simulate(small(2, noisy_video))
    audio = lambda ep: [f for f in ep.obs_facts if f.modality == "audio"]  # noqa: E731
    assert audio(a) == audio(b)


def test_labels_round_trip():
    gt = generate_ground_truth(small(6))
    assert tuple(load_labels_jsonl(dump_labels_jsonl(gt.labels))) == gt.labels
    assert {lb.construct for lb in gt.labels} == {"confusion_candidate", "participation_opportunity",
                                                  "collaboration_episode"}


def test_raw_refs_point_at_sources():
    ep = simulate(small(7))
    for f in ep.obs_facts:
        if f.modality != "metadata":
            assert f.prov.raw_ref.startswith("sim://7/")


def test_with_seed_only_changes_seed():
    cfg = small(3)
    assert replace(cfg, seed=11) == cfg.with_seed(11)
