"""Turning free-text location expressions into keyword training labels.

A location keyword is positive for a record when the keyword itself, or any
of its trigger replacements, occurs in one of the record's location
expressions.  Matching is whole-word: text is lowercased and split into
alphanumeric runs, and a multi-word trigger must appear as a contiguous run
of those tokens inside a single expression.

Negative keywords are then derived from the positive ones.  Each positive
keyword marks the keywords in its negation list as negative candidates
(mutually exclusive locations), unless some positive keyword shields the
candidate through its prevention list (anatomically adjacent locations).
Keywords that end up neither positive nor negative are ignored, giving
partial labels suitable for masked training losses.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass

from .catalog import Catalog, KeywordRuleSet
from .report_io import AnnotationRecord, atomic_write

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class KeywordLabels:
    """Partition of one abnormality's keywords for one record."""

    positive: frozenset[str]
    negative: frozenset[str]
    ignored: frozenset[str]


def _tokens(text: str) -> tuple[str, ...]:
    return tuple(_TOKEN_RE.findall(text.casefold()))


def _contains_phrase(tokens: tuple[str, ...], phrase: tuple[str, ...]) -> bool:
    if not phrase:
        return False
    span = len(phrase)
    return any(tokens[i:i + span] == phrase
               for i in range(len(tokens) - span + 1))


def map_to_positive_keywords(locations: tuple[str, ...] | list[str],
                             abnormality: str,
                             ruleset: KeywordRuleSet) -> frozenset[str]:
    """Keywords marked positive by any of the location expressions."""
    keywords = ruleset.keywords_for(abnormality)
    token_lists = [_tokens(location) for location in locations]
    positives: set[str] = set()
    for keyword in keywords:
        triggers = [keyword, *ruleset.replacements.get(keyword, ())]
        trigger_tokens = [_tokens(trigger) for trigger in triggers]
        if any(_contains_phrase(tokens, phrase)
               for tokens in token_lists for phrase in trigger_tokens):
            positives.add(keyword)
    return frozenset(positives)


def derive_negatives(positives: frozenset[str] | set[str], abnormality: str,
                     ruleset: KeywordRuleSet) -> KeywordLabels:
    """Split an abnormality's keywords into positive/negative/ignored.

    A keyword is negative when some positive keyword negates it, it is not
    itself positive, and no positive keyword prevents its negation.
    """
    keywords = ruleset.keywords_for(abnormality)
    positives = frozenset(positives)
    unknown = positives - set(keywords)
    if unknown:
        raise ValueError(
            f"positives {sorted(unknown)} are not keywords of {abnormality!r}")
    negated: set[str] = set()
    prevented: set[str] = set()
    for positive in positives:
        negated |= ruleset.negation.get(positive, frozenset())
        prevented |= ruleset.prevention.get(positive, frozenset())
    negatives = frozenset((negated & set(keywords)) - positives - prevented)
    ignored = frozenset(keywords) - positives - negatives
    return KeywordLabels(positive=positives, negative=negatives, ignored=ignored)


def keyword_labels(locations: tuple[str, ...] | list[str], abnormality: str,
                   ruleset: KeywordRuleSet) -> KeywordLabels:
    positives = map_to_positive_keywords(locations, abnormality, ruleset)
    return derive_negatives(positives, abnormality, ruleset)


def export_training_labels(records: list[AnnotationRecord], catalog: Catalog,
                           ruleset: KeywordRuleSet, path: str) -> int:
    """Write the keyword training-label CSV; returns the row count.

    One row per record with at least one positive keyword.  Keyword columns
    hold 1 for positive, -1 for negative, empty for ignored or for keywords
    the record's abnormality does not use.  Records for abnormalities without
    keyword lists are skipped.
    """
    del catalog  # Uniform signature with other exporters; rules live in the set.
    all_keywords = sorted(ruleset.keyword_universe())
    rows: list[dict[str, str]] = []
    for record in sorted(records, key=AnnotationRecord.sort_key):
        if record.abnormality not in ruleset.keywords:
            continue
        labels = keyword_labels(record.locations, record.abnormality, ruleset)
        if not labels.positive:
            continue
        row = {"report_id": record.report_id, "abnormality": record.abnormality}
        for keyword in labels.positive:
            row[keyword] = "1"
        for keyword in labels.negative:
            row[keyword] = "-1"
        rows.append(row)

    def body(fh) -> None:
        writer = csv.DictWriter(fh, fieldnames=["report_id", "abnormality",
                                                *all_keywords])
        writer.writeheader()
        writer.writerows(rows)

    atomic_write(path, body)
    return len(rows)
