from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import read_data
from gen import rand_fact, rand_policy, rand_query, rand_rule
from nscr.dsl import (
    ParseError,
    parse_facts,
    parse_policies,
    parse_query,
    parse_query_file,
    parse_rules,
    serialize,
    serialize_facts,
    serialize_policies,
    serialize_rules,
)
from nscr.dsl.ast import QUERY_OPERATORS, Var

ROUNDS = settings(max_examples=150, deadline=None)


# -- facts ------------------------------------------------------------------------------


def test_table_row_event(reg):
    (f,), errs = parse_facts("EVENT(teacher, open_question, group_2, [235,238], 0.96)", reg)
    assert errs == []
    assert (f.family.value, f.time.start, f.time.end, f.conf) == ("EVENT", 235, 238, 0.96)


def test_instant_and_context(reg):
    facts, errs = parse_facts("OBS(s1, gaze_target, board, 10, 0.9)\nCONTEXT(activity, guided_proof, [0,9])\n", reg)
    assert errs == []
    assert facts[0].time.is_instant and facts[1].conf == 1.0


def test_bad_confidence_is_located(reg):
    text = "\n" * 7 + "OBS(s1, gaze_target, board, 10, 1.2)\n"
    facts, errs = parse_facts(text, reg)
    assert facts == []
    (e,) = errs
    assert (e.span.line, e.span.column) == (8, 33)
    assert "confidence out of range" in e.message


def test_unknown_predicate_and_wrong_arity(reg):
    _, errs = parse_facts("GAZE(s1, board, 10, 0.9)\nEVENT(a, b, [1,2], 0.5)\n", reg)
    assert [e.span.line for e in errs] == [1, 2]
    assert "unregistered predicate" in errs[0].message


def test_continuation_lines_and_comments(reg):
    facts, errs = parse_facts(read_data("confusion_example.facts"), reg)
    assert errs == [] and len(facts) == 5
    assert serialize_facts(facts) == "".join(serialize(f) for f in facts)


def test_metadata_block(reg):
    text = 'OBS(s1, gaze_target, board, 10, 0.90) {source="pose", modality="derived", raw_ref="clip 3#t=10"}\n'
    (f,), errs = parse_facts(text, reg)
    assert errs == []
    assert (f.prov.source, f.prov.modality, f.prov.raw_ref) == ("pose", "derived", "clip 3#t=10")
    assert serialize_facts([f]) == text


def test_duplicate_facts_get_distinct_ids(reg):
    facts, errs = parse_facts("OBS(s1, gaze_target, board, 10, 0.9)\nOBS(s1, gaze_target, board, 10, 0.9)\n", reg)
    assert errs == [] and facts[0].id != facts[1].id
    again, _ = parse_facts(serialize_facts(facts), reg)
    assert again == facts


@ROUNDS
@given(st.randoms(use_true_random=False), st.integers(1, 8))
def test_fact_round_trip(rnd, n):
    from nscr.facts import default_registry

    reg = default_registry()
    from gen import rand_facts

    facts = rand_facts(rnd, n, predicates=["OBS", "EVENT", "UTTER", "REL", "CONTEXT", "POLICY"], provenance=True)
    text = serialize_facts(facts)
    back, errs = parse_facts(text, reg)
    assert errs == []
    assert back == facts
    assert serialize_facts(back) == text


def test_fact_error_recovery(reg):
    rng = random.Random(3)
    good = [rand_fact(rng) for _ in range(30)]
    lines = serialize_facts(good).splitlines()
    for k in range(0, 30, 7):
        corrupted = list(lines)
        corrupted[k] = corrupted[k].replace("(", "[", 1)
        facts, errs = parse_facts("\n".join(corrupted), reg)
        assert [e.span.line for e in errs] == [k + 1]
        assert len(facts) == 29


# -- rules --------------------------------------------------------------------------------


def test_bundled_rules_parse():
    rules, errs = parse_rules(read_data("classroom.rules"))
    assert errs == []
    assert [r.name for r in rules] == ["confusion_candidate", "participation_opportunity", "collaboration_episode"]
    confusion = rules[0]
    assert len(confusion.matches) == 4 and len(confusion.temporal_constraints) == 3


def test_rule_round_trip_bundled():
    rules, _ = parse_rules(read_data("classroom.rules"))
    text = serialize_rules(rules)
    again, errs = parse_rules(text)
    assert errs == [] and again == rules
    assert serialize_rules(again) == text


@ROUNDS
@given(st.randoms(use_true_random=False))
def test_rule_round_trip(rnd):
    rule = rand_rule(rnd)
    text = serialize(rule)
    (back,), errs = parse_rules(text)
    assert errs == []
    assert back == rule


@pytest.mark.parametrize(
    "body, message",
    [
        ("CONCLUDE c(S)\n  MATCH a: EVENT(T, help_request, ?)\n", "unbound"),
        ("CONCLUDE c(S)\n  MATCH a: EVENT(S, help_request, ?)\n  WHERE before(a, b)\n", "unknown alias"),
        ("CONCLUDE c(S)\n", "MATCH"),
        ("MATCH a: EVENT(S, help_request, ?)\n", "CONCLUDE"),
        ("CONCLUDE c(S)\n  MATCH a: EVENT(S, help_request, ?)\n  WHERE sometime(a, a)\n", "temporal"),
    ],
)
def test_rule_errors(body, message):
    rules, errs = parse_rules(f"RULE r\n  {body}END\n")
    assert rules == []
    assert any(message in e.message for e in errs), errs


def test_rule_error_recovery_keeps_other_rules():
    text = read_data("classroom.rules").replace("MATCH a: EVENT(S, failed_attempt, ?)",
                                                "MATCH a: EVENT(S failed_attempt, ?)")
    rules, errs = parse_rules(text)
    assert [r.name for r in rules] == ["participation_opportunity", "collaboration_episode"]
    assert len(errs) == 1
    bad_line = text.splitlines().index("  MATCH a: EVENT(S failed_attempt, ?)") + 1
    assert errs[0].span.line == bad_line


def test_duplicate_rule_names():
    one = "RULE r\n  CONCLUDE c(S)\n  MATCH a: OBS(S, gaze_target, ?)\nEND\n"
    rules, errs = parse_rules(one + one)
    assert len(rules) == 1 and "duplicate" in errs[0].message and errs[0].span.line == 5


def test_variables_vs_constants():
    (rule,), _ = parse_rules("RULE r\n  CONCLUDE c(S)\n  MATCH a: OBS(S, gaze_target, worksheet)\nEND\n")
    terms = rule.matches[0].pattern.terms
    assert terms[0] == Var("S") and terms[2] == "worksheet"


# -- policies ------------------------------------------------------------------------------


def test_bundled_policies():
    pols, errs = parse_policies(read_data("classroom.policies"))
    assert errs == []
    hard = pols[0]
    assert (hard.id, hard.severity, hard.on_violation) == ("no_single_modality_alert", "hard", "defer")
    assert serialize_policies(pols) == "".join(serialize(p) for p in pols)


def test_hard_penalize_is_rejected():
    line = "POLICY x HARD APPLIES * REQUIRE evidence_count >= 2 ON VIOLATION penalize"
    _, errs = parse_policies(line + "\n")
    (e,) = errs
    assert "defer" in e.message and e.span.column == line.index("penalize") + 1


def test_policy_error_recovery():
    lines = read_data("classroom.policies").splitlines()
    text = "\n".join(lines + ["POLICY broken SOFT APPLIES * REQUIRE min_conf(evidence, smell) >= 0.5 "
                              "ON VIOLATION penalize"])
    pols, errs = parse_policies(text)
    assert len(pols) == 2 and len(errs) == 1 and "modality" in errs[0].message


@ROUNDS
@given(st.randoms(use_true_random=False))
def test_policy_round_trip(rnd):
    pol = rand_policy(rnd)
    (back,), errs = parse_policies(serialize(pol))
    assert errs == [] and back == pol


# -- queries -------------------------------------------------------------------------------


def test_query_examples():
    q = parse_query("COUNT_DISTINCT actor FROM EVENT(?, help_request, ?) WHERE after(this, anchor)")
    assert q.operator == "COUNT_DISTINCT" and q.uses_anchor
    r = parse_query("RANK group BY balance FROM EVENT(?, speak_turn, ?)")
    assert r.rank_key == "balance"


def test_non_whitelisted_operator():
    with pytest.raises(ParseError) as info:
        parse_query("DELETE actor FROM EVENT(?, help_request, ?)")
    assert "operator not permitted" in info.value.message
    assert info.value.span.column == 1


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="ABCDEFGHIJKLMNOPQRSTUVWXYZ_", min_size=1, max_size=14))
def test_only_four_operators(op):
    by = " BY count" if op == "RANK" else ""
    text = f"{op} actor{by} FROM EVENT(?, help_request, ?)"
    if op in QUERY_OPERATORS:
        assert parse_query(text).operator == op
    else:
        with pytest.raises(ParseError):
            parse_query(text)


def test_query_rejects_variables():
    with pytest.raises(ParseError) as info:
        parse_query("SELECT actor FROM EVENT(S, help_request, ?)")
    assert info.value.span.column == 25


def test_query_file_lines():
    qs, errs = parse_query_file("# q\nSELECT actor FROM EVENT(?, speak_turn, ?)\nNOPE x FROM EVENT(?, a, ?)\n")
    assert len(qs) == 1 and errs[0].span.line == 3


@ROUNDS
@given(st.randoms(use_true_random=False))
def test_query_round_trip(rnd):
    q = rand_query(rnd)
    assert parse_query(serialize(q)) == q
