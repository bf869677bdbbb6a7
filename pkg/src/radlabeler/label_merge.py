"""Combining member-label annotations into merged umbrella labels.

Merging is a per-field reduction over the member records of a group:

* presence: the strongest verdict wins.  Present beats uncertain beats
  stable beats an explicit absent from a primary member; "not mentioned"
  only loses to an absent stated by a non-primary member, so an umbrella
  label is "absent" only when a primary member was explicitly negative.
* probability: the highest percent wins; "stable" outranks any percent up
  to and including 50 but loses to anything above; a missing value loses
  to everything.
* severity: severe > moderate > mild > none.
* locations: concatenated in member order, case-insensitively deduplicated,
  first occurrence kept.

All reductions are order-insensitive (beyond the documented member-order
location concatenation) and idempotent.
"""

from __future__ import annotations

from dataclasses import dataclass

from .catalog import MergeGroup
from .report_io import STABLE, AnnotationRecord


@dataclass(frozen=True)
class MergeInput:
    """One member's presence verdict plus its primary flag."""

    presence: str
    primary: bool


def _presence_rank(presence: str, primary: bool) -> int:
    if presence == "present":
        return 5
    if presence == "uncertain":
        return 4
    if presence == STABLE:
        return 3
    if presence == "absent":
        return 2 if primary else 0
    if presence == "not mentioned":
        return 1
    raise ValueError(f"invalid presence value {presence!r}")


def merge_presence(inputs: list[MergeInput]) -> str:
    """Strongest presence verdict among the members."""
    if not inputs:
        raise ValueError("merge_presence needs at least one input")
    best = max(inputs, key=lambda i: _presence_rank(i.presence, i.primary))
    return best.presence


def _probability_rank(value: int | str | None) -> float:
    if value is None:
        return -1.0
    if value == STABLE:
        # Between the percents it beats (<= 50) and those that beat it (> 50).
        return 50.5
    if isinstance(value, int) and 0 <= value <= 100:
        return float(value)
    raise ValueError(f"invalid probability value {value!r}")


def merge_probability(values: list[int | str | None]) -> int | str | None:
    if not values:
        raise ValueError("merge_probability needs at least one value")
    return max(values, key=_probability_rank)


_SEVERITY_RANK = {None: 0, "mild": 1, "moderate": 2, "severe": 3}


def merge_severity(values: list[str | None]) -> str | None:
    if not values:
        raise ValueError("merge_severity needs at least one value")
    for value in values:
        if value not in _SEVERITY_RANK:
            raise ValueError(f"invalid severity value {value!r}")
    return max(values, key=_SEVERITY_RANK.get)


def merge_locations(location_lists: list[tuple[str, ...]]) -> tuple[str, ...]:
    """Concatenate member locations, deduplicated case-insensitively."""
    merged: list[str] = []
    seen: set[str] = set()
    for locations in location_lists:
        for location in locations:
            folded = location.casefold()
            if folded not in seen:
                seen.add(folded)
                merged.append(location)
    return tuple(merged)


def merge_records(members: list[tuple[AnnotationRecord, bool]], target: str) -> AnnotationRecord:
    """Merge member records (with their primary flags) into the target row."""
    if not members:
        raise ValueError(f"no member records to merge for {target!r}")
    report_ids = {record.report_id for record, _ in members}
    if len(report_ids) != 1:
        raise ValueError(f"merge for {target!r} spans reports {sorted(report_ids)}")

    with_presence = [(r, primary) for r, primary in members if r.presence is not None]
    presence = merge_presence([MergeInput(r.presence, primary)
                               for r, primary in with_presence]) \
        if with_presence else None

    with_probability = [r.probability for r, _ in members if r.probability is not None]
    probability = merge_probability(with_probability) if with_probability else None

    severity = merge_severity([r.severity for r, _ in members])
    locations = merge_locations([r.locations for r, _ in members])
    if presence in ("absent", "not mentioned", STABLE):
        # Members that individually justified severity/locations lost out to
        # the merged verdict, so those fields cannot stand either.
        severity = None
        locations = ()
    return AnnotationRecord(
        report_id=next(iter(report_ids)),
        abnormality=target,
        presence=presence,
        probability=probability,
        severity=severity,
        locations=locations,
    )


def apply_merge_groups(records: list[AnnotationRecord],
                       groups: tuple[MergeGroup, ...]) -> list[AnnotationRecord]:
    """Apply every merge group per report, replacing each target row.

    Groups read the original member rows (never another group's output), so
    the outcome does not depend on group order.  Member rows other than the
    target pass through unchanged; a group with no member rows for a report
    contributes nothing.
    """
    by_report: dict[str, dict[str, AnnotationRecord]] = {}
    order: list[str] = []
    for record in records:
        if record.report_id not in by_report:
            order.append(record.report_id)
        by_report.setdefault(record.report_id, {})[record.abnormality] = record

    merged_rows: dict[tuple[str, str], AnnotationRecord] = {}
    for report_id in order:
        rows = by_report[report_id]
        for group in groups:
            members = [(rows[name], name in group.primary_members)
                       for name in group.members if name in rows]
            if members:
                merged_rows[(report_id, group.target)] = merge_records(
                    members, group.target)

    out: list[AnnotationRecord] = []
    emitted: set[tuple[str, str]] = set()
    for record in records:
        key = (record.report_id, record.abnormality)
        replacement = merged_rows.get(key)
        if replacement is not None:
            if key not in emitted:
                out.append(replacement)
                emitted.add(key)
            continue
        out.append(record)
        emitted.add(key)
    # Merged targets whose own row never existed are appended at the end.
    for key, record in merged_rows.items():
        if key not in emitted:
            out.append(record)
    return out
