"""Parsers and serializers for facts, rules, policies and queries."""

from __future__ import annotations

from nscr.dsl.ast import PolicyAst, QueryAst, RuleAst
from nscr.dsl.factfile import parse_facts, serialize_fact, serialize_facts
from nscr.dsl.lexer import ParseError, SourceSpan
from nscr.dsl.policies import parse_policies, serialize_policies, serialize_policy
from nscr.dsl.queries import parse_query, parse_query_file, serialize_query
from nscr.dsl.rules import parse_rules, serialize_rule, serialize_rules
from nscr.facts import Fact


def serialize(entity: Fact | RuleAst | PolicyAst | QueryAst) -> str:
    """Canonical text for any of the four languages."""
    if isinstance(entity, Fact):
        return serialize_fact(entity) + "\n"
    if isinstance(entity, RuleAst):
        return serialize_rule(entity)
    if isinstance(entity, PolicyAst):
        return serialize_policy(entity)
    if isinstance(entity, QueryAst):
        return serialize_query(entity)
    raise TypeError(f"cannot serialize {type(entity).__name__}")


__all__ = [
    "ParseError",
    "SourceSpan",
    "parse_facts",
    "parse_policies",
    "parse_query",
    "parse_query_file",
    "parse_rules",
    "serialize",
    "serialize_fact",
    "serialize_facts",
    "serialize_policies",
    "serialize_rules",
]
