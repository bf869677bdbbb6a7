"""Converting external baseline annotation files to the common schema.

Two source formats are supported:

* ``vqa``: rows of (report_id, label, presence, probability, severity,
  location) where probability and severity hold the dataset's controlled
  wordings.  Wordings map to percents and severity classes through the
  phrase tables in :mod:`radlabeler.eval_stats`.
* ``reflacx``: rows of (report_id, label, certainty) where certainty is one
  of six graded categories.  Categories map to gold probability intervals;
  a row counts as present when its interval reaches above 50%.

Both converters canonicalize source label names onto catalog abnormality
names (case-insensitively, plus a small rename table), apply the source
dataset's umbrella-label merges through the ordinary merge machinery, and
keep only rows for catalog abnormalities.  Severity and locations are
dropped from rows whose presence verdict cannot carry them.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass

from .catalog import Catalog, MergeGroup
from .eval_stats import (ProbabilityInterval, adapt_vqa, reflacx_interval,
                         vqa_phrase_lookup)
from .label_merge import apply_merge_groups
from .report_io import (LOCATION_JOIN, PRESENCE_VALUES, AnnotationRecord,
                        atomic_write)

VQA_MERGE_GROUPS: tuple[MergeGroup, ...] = (
    MergeGroup(target="Cardiomegaly",
               members=("Cardiomegaly", "enlargement of the cardiac silhouette"),
               primary_members=frozenset({"Cardiomegaly"})),
    MergeGroup(target="Edema",
               members=("Edema", "vascular congestion", "heart failure",
                        "hilar congestion"),
               primary_members=frozenset({"Edema"})),
    MergeGroup(target="Lung opacity",
               members=("Lung opacity", "Consolidation", "Edema",
                        "vascular congestion", "Atelectasis", "heart failure",
                        "hilar congestion", "Pneumonia"),
               primary_members=frozenset({"Lung opacity"})),
    MergeGroup(target="Consolidation",
               members=("Consolidation", "Pneumonia"),
               primary_members=frozenset({"Consolidation"})),
)

# The umbrella opacity label is not a source label in either phase, so the
# target appears among the members only to satisfy the group schema.
REFLACX_MERGE_GROUPS: dict[int, tuple[MergeGroup, ...]] = {
    1: (MergeGroup(target="Lung opacity",
                   members=("Lung opacity", "Fibrosis", "Edema", "Consolidation",
                            "Atelectasis", "Groundglass opacity", "Mass", "Nodule"),
                   primary_members=frozenset({"Lung opacity"})),),
    2: (MergeGroup(target="Lung opacity",
                   members=("Lung opacity", "Interstitial lung disease", "Edema",
                            "Consolidation", "Atelectasis", "Enlarged hilum",
                            "Groundglass opacity", "Lung nodule or mass"),
                   primary_members=frozenset({"Lung opacity"})),),
}
REFLACX_MERGE_GROUPS[3] = REFLACX_MERGE_GROUPS[2]

REFLACX_RENAMES = {
    "enlarged cardiac silhouette": "Cardiomegaly",
    "pulmonary edema": "Edema",
}


class BaselineFormatError(ValueError):
    """Raised for unreadable or malformed baseline files."""


@dataclass
class ConversionResult:
    records: list[AnnotationRecord]
    intervals: dict[tuple[str, str], ProbabilityInterval]
    warnings: Counter


def read_baseline_csv(path: str) -> list[dict[str, str]]:
    try:
        with open(path, encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
    except OSError as exc:
        raise BaselineFormatError(f"cannot read baseline file {path!r}: {exc}") from exc
    if not rows:
        raise BaselineFormatError(f"baseline file {path!r} has no rows")
    return rows


def _canonical_label(label: str, catalog: Catalog,
                     renames: dict[str, str] | None = None) -> str:
    folded = " ".join(label.casefold().split())
    if renames and folded in renames:
        return renames[folded]
    for name in catalog.names():
        if name.casefold() == folded:
            return name
    return label.strip()


def _keep_catalog_rows(records: list[AnnotationRecord],
                       catalog: Catalog) -> list[AnnotationRecord]:
    names = set(catalog.names())
    return [record for record in records if record.abnormality in names]


def convert_vqa(rows: list[dict[str, str]], catalog: Catalog) -> ConversionResult:
    """Convert VQA-style rows to merged common-schema records."""
    warnings: Counter = Counter()
    records: list[AnnotationRecord] = []
    for index, row in enumerate(rows):
        where = f"row {index + 2}"
        try:
            report_id = row["report_id"]
            label = _canonical_label(row["label"], catalog)
        except KeyError as exc:
            raise BaselineFormatError(f"{where}: missing column {exc}") from None

        presence = (row.get("presence") or "").strip().lower() or None
        if presence is not None and presence not in PRESENCE_VALUES:
            raise BaselineFormatError(f"{where}: unknown presence {presence!r}")

        probability = None
        probability_text = (row.get("probability") or "").strip()
        if probability_text:
            probability = adapt_vqa(probability_text, "probability")
            if probability is None:
                warnings["unknown_probability_wording"] += 1

        severity = None
        severity_text = (row.get("severity") or "").strip()
        if severity_text:
            matched, severity = vqa_phrase_lookup(severity_text, "severity")
            if not matched:
                warnings["unknown_severity_wording"] += 1

        location_cell = (row.get("location") or "").strip()
        locations = tuple(part.strip() for part in location_cell.split(LOCATION_JOIN)
                          if part.strip()) if location_cell else ()

        if presence not in ("present", "uncertain"):
            severity = None
            locations = ()
        records.append(AnnotationRecord(
            report_id=report_id, abnormality=label, presence=presence,
            probability=probability, severity=severity, locations=locations,
        ))
    merged = apply_merge_groups(records, VQA_MERGE_GROUPS)
    return ConversionResult(records=_keep_catalog_rows(merged, catalog),
                            intervals={}, warnings=warnings)


def convert_reflacx(rows: list[dict[str, str]], catalog: Catalog,
                    phase: int = 3) -> ConversionResult:
    """Convert certainty-graded rows to merged records plus gold intervals."""
    if phase not in REFLACX_MERGE_GROUPS:
        raise BaselineFormatError(f"unknown phase {phase}; expected 1, 2 or 3")
    warnings: Counter = Counter()
    records: list[AnnotationRecord] = []
    intervals: dict[tuple[str, str], ProbabilityInterval] = {}
    for index, row in enumerate(rows):
        where = f"row {index + 2}"
        try:
            report_id = row["report_id"]
            label = _canonical_label(row["label"], catalog, REFLACX_RENAMES)
            certainty = row["certainty"]
        except KeyError as exc:
            raise BaselineFormatError(f"{where}: missing column {exc}") from None
        try:
            interval = reflacx_interval(certainty)
        except ValueError as exc:
            raise BaselineFormatError(f"{where}: {exc}") from None
        presence = "present" if interval.hi > 50 else "absent"
        records.append(AnnotationRecord(
            report_id=report_id, abnormality=label, presence=presence))
        intervals[(report_id, label)] = interval

    groups = REFLACX_MERGE_GROUPS[phase]
    merged = apply_merge_groups(records, groups)
    # The merged row's interval is its most certain member's interval.
    for group in groups:
        per_report: dict[str, list[ProbabilityInterval]] = {}
        for (report_id, label), interval in intervals.items():
            if label in group.members:
                per_report.setdefault(report_id, []).append(interval)
        for report_id, member_intervals in per_report.items():
            best = max(member_intervals, key=lambda iv: (iv.hi, iv.lo))
            intervals[(report_id, group.target)] = best
    kept = _keep_catalog_rows(merged, catalog)
    kept_keys = {(record.report_id, record.abnormality) for record in kept}
    intervals = {key: interval for key, interval in intervals.items()
                 if key in kept_keys}
    return ConversionResult(records=kept, intervals=intervals, warnings=warnings)


def write_converted(result: ConversionResult, path: str) -> None:
    """Write converted records as CSV, with interval columns when present."""
    columns = ["report_id", "abnormality", "presence", "probability",
               "severity", "location"]
    if result.intervals:
        columns += ["prob_lo", "prob_hi"]
    ordered = sorted(result.records, key=AnnotationRecord.sort_key)

    def body(fh) -> None:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for record in ordered:
            row = {
                "report_id": record.report_id,
                "abnormality": record.abnormality,
                "presence": record.presence or "",
                "probability": "" if record.probability is None else str(record.probability),
                "severity": record.severity or "",
                "location": LOCATION_JOIN.join(record.locations),
            }
            interval = result.intervals.get((record.report_id, record.abnormality))
            if result.intervals:
                row["prob_lo"] = "" if interval is None else f"{interval.lo:g}"
                row["prob_hi"] = "" if interval is None else f"{interval.hi:g}"
            writer.writerow(row)

    atomic_write(path, body)
