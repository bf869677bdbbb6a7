"""Report loading, prompt text preparation, and annotation record IO.

Reports come in as JSONL or CSV with an ``id`` column plus free-text sections
(``findings``, ``comparison``, ``impression``, ``other``) and an optional
``modality``.  Annotation records go out as CSV or JSONL with one row per
(report, abnormality) pair, sorted by that pair.  Output files are written to
a temporary file and renamed into place so partial runs never leave a
truncated file behind.
"""

from __future__ import annotations

import csv
import json
import os
import re
import tempfile
from dataclasses import dataclass, field

PRESENCE_VALUES = ("present", "absent", "not mentioned", "uncertain", "stable")
SEVERITY_VALUES = ("mild", "moderate", "severe")
STABLE = "stable"

SECTION_NAMES = ("findings", "comparison", "impression", "other")
# Sections concatenated for chest radiograph prompt text, in this order.
CXR_SECTION_ORDER = ("findings", "comparison", "impression")

CSV_COLUMNS = ("report_id", "abnormality", "presence", "probability",
               "severity", "location")
LOCATION_JOIN = "; "

_UNDERSCORE_RUN = re.compile(r"_{2,}")
_WHITESPACE_RUN = re.compile(r"\s+")


class ReportError(ValueError):
    """Raised for malformed report files or unusable report text."""


@dataclass
class Report:
    id: str
    sections: dict[str, str] = field(default_factory=dict)
    modality: str = "cxr"


@dataclass
class AnnotationRecord:
    """One annotation for one (report, abnormality) pair.

    ``probability`` is an integer percent, the string ``"stable"``, or None.
    ``severity`` and ``locations`` are only ever populated when the presence
    verdict lets them make sense (present or uncertain).
    """

    report_id: str
    abnormality: str
    presence: str | None = None
    probability: int | str | None = None
    severity: str | None = None
    locations: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.presence is not None and self.presence not in PRESENCE_VALUES:
            raise ReportError(f"invalid presence value {self.presence!r}")
        if self.severity is not None and self.severity not in SEVERITY_VALUES:
            raise ReportError(f"invalid severity value {self.severity!r}")
        if isinstance(self.probability, str) and self.probability != STABLE:
            raise ReportError(f"invalid probability value {self.probability!r}")
        if isinstance(self.probability, int) and not 0 <= self.probability <= 100:
            raise ReportError(f"probability {self.probability} outside [0, 100]")
        self.locations = tuple(self.locations)
        if self.presence in ("absent", "not mentioned", "stable"):
            if self.severity is not None or self.locations:
                raise ReportError(
                    f"record {self.report_id}/{self.abnormality}: severity and "
                    f"locations require a present or uncertain verdict")

    def sort_key(self) -> tuple[str, str]:
        return (self.report_id, self.abnormality)


def _detect_format(path: str, fmt: str | None) -> str:
    if fmt:
        return fmt
    if path.endswith(".jsonl"):
        return "jsonl"
    if path.endswith(".csv"):
        return "csv"
    raise ReportError(f"cannot infer format of {path!r}; pass format explicitly")


def _build_report(raw: dict, where: str, seen: set[str]) -> Report:
    report_id = str(raw.get("id") or "").strip()
    if not report_id:
        raise ReportError(f"{where}: missing report id")
    if report_id in seen:
        raise ReportError(f"{where}: duplicate report id {report_id!r}")
    seen.add(report_id)
    sections = {}
    for name in SECTION_NAMES:
        value = raw.get(name)
        if value is not None and str(value).strip():
            sections[name] = str(value)
    if not sections:
        raise ReportError(f"{where}: report {report_id!r} has no text sections")
    modality = str(raw.get("modality") or "cxr").strip().lower()
    if modality not in ("cxr", "ct", "mri", "pet"):
        raise ReportError(f"{where}: unknown modality {modality!r}")
    return Report(id=report_id, sections=sections, modality=modality)


def load_reports(path: str, fmt: str | None = None) -> list[Report]:
    """Load reports from a JSONL or CSV file, in file order.

    Malformed rows raise ReportError naming the offending line/row.
    """
    fmt = _detect_format(path, fmt)
    reports: list[Report] = []
    seen: set[str] = set()
    try:
        with open(path, encoding="utf-8") as fh:
            if fmt == "jsonl":
                for lineno, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    try:
                        raw = json.loads(line)
                    except json.JSONDecodeError as exc:
                        raise ReportError(f"line {lineno}: invalid JSON: {exc}") from None
                    if not isinstance(raw, dict):
                        raise ReportError(f"line {lineno}: expected an object")
                    reports.append(_build_report(raw, f"line {lineno}", seen))
            elif fmt == "csv":
                reader = csv.DictReader(fh)
                if reader.fieldnames is None or "id" not in reader.fieldnames:
                    raise ReportError("CSV report file must have an 'id' column")
                for rownum, raw in enumerate(reader, start=2):
                    reports.append(_build_report(raw, f"row {rownum}", seen))
            else:
                raise ReportError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise ReportError(f"cannot read reports from {path!r}: {exc}") from exc
    return reports


def prepare_prompt_text(report: Report) -> str:
    """Flatten a report into the single text block inserted into prompts.

    Chest radiograph reports concatenate findings, comparison and impression
    (whichever exist); other modalities use findings only.  Runs of two or
    more underscores (de-identification blanks) become the word "thing" and
    whitespace is collapsed.  The transformation is idempotent.
    """
    if report.modality == "cxr":
        parts = [report.sections.get(name) for name in CXR_SECTION_ORDER]
    else:
        parts = [report.sections.get("findings")]
    text = " ".join(p for p in parts if p and p.strip())
    text = _UNDERSCORE_RUN.sub("thing", text)
    text = _WHITESPACE_RUN.sub(" ", text).strip()
    if not text:
        raise ReportError(f"report {report.id!r} has no usable sections for "
                          f"modality {report.modality!r}")
    return text


def _record_to_row(record: AnnotationRecord) -> dict[str, str]:
    if record.probability is None:
        probability = ""
    else:
        probability = str(record.probability)
    return {
        "report_id": record.report_id,
        "abnormality": record.abnormality,
        "presence": record.presence or "",
        "probability": probability,
        "severity": record.severity or "",
        "location": LOCATION_JOIN.join(record.locations),
    }


def _record_from_row(row: dict[str, str], where: str) -> AnnotationRecord:
    probability: int | str | None
    raw_probability = (row.get("probability") or "").strip()
    if not raw_probability:
        probability = None
    elif raw_probability == STABLE:
        probability = STABLE
    else:
        try:
            probability = int(raw_probability)
        except ValueError:
            raise ReportError(f"{where}: bad probability {raw_probability!r}") from None
    location_cell = (row.get("location") or "").strip()
    locations = tuple(part for part in location_cell.split(LOCATION_JOIN) if part) \
        if location_cell else ()
    try:
        return AnnotationRecord(
            report_id=row["report_id"],
            abnormality=row["abnormality"],
            presence=(row.get("presence") or "").strip() or None,
            probability=probability,
            severity=(row.get("severity") or "").strip() or None,
            locations=locations,
        )
    except KeyError as exc:
        raise ReportError(f"{where}: missing column {exc}") from None


def atomic_write(path: str, write_body) -> None:
    """Write a file via a temp file + rename in the destination directory."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            write_body(fh)
        os.replace(tmp_path, path)
    except BaseException:
        try:
            os.unlink(tmp_path)
        except OSError:
            pass
        raise


def write_annotations(records: list[AnnotationRecord], path: str,
                      fmt: str | None = None) -> None:
    """Write records sorted by (report_id, abnormality), atomically."""
    fmt = _detect_format(path, fmt)
    ordered = sorted(records, key=AnnotationRecord.sort_key)

    def body(fh) -> None:
        if fmt == "csv":
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for record in ordered:
                writer.writerow(_record_to_row(record))
        elif fmt == "jsonl":
            for record in ordered:
                fh.write(json.dumps({
                    "report_id": record.report_id,
                    "abnormality": record.abnormality,
                    "presence": record.presence,
                    "probability": record.probability,
                    "severity": record.severity,
                    "locations": list(record.locations),
                }, ensure_ascii=False) + "\n")
        else:
            raise ReportError(f"unknown annotation format {fmt!r}")

    atomic_write(path, body)


def read_annotations(path: str, fmt: str | None = None) -> list[AnnotationRecord]:
    """Read annotation records written by ``write_annotations``."""
    fmt = _detect_format(path, fmt)
    records: list[AnnotationRecord] = []
    try:
        with open(path, encoding="utf-8") as fh:
            if fmt == "csv":
                reader = csv.DictReader(fh)
                for rownum, row in enumerate(reader, start=2):
                    records.append(_record_from_row(row, f"row {rownum}"))
            elif fmt == "jsonl":
                for lineno, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    raw = json.loads(line)
                    probability = raw.get("probability")
                    records.append(AnnotationRecord(
                        report_id=raw["report_id"],
                        abnormality=raw["abnormality"],
                        presence=raw.get("presence"),
                        probability=probability,
                        severity=raw.get("severity"),
                        locations=tuple(raw.get("locations") or ()),
                    ))
            else:
                raise ReportError(f"unknown annotation format {fmt!r}")
    except OSError as exc:
        raise ReportError(f"cannot read annotations from {path!r}: {exc}") from exc
    return records


def read_gold_intervals(path: str,
                        fmt: str | None = None) -> dict[tuple[str, str],
                                                        tuple[float, float]]:
    """Read optional probability intervals from a gold annotation file.

    Returns a map from (report_id, abnormality) to (lo, hi) for rows that
    carry ``prob_lo``/``prob_hi`` columns; rows without them fall back to a
    degenerate interval at the exact ``probability`` value when present, with
    "stable" mapping to (0, 0).
    """
    fmt = _detect_format(path, fmt)
    intervals: dict[tuple[str, str], tuple[float, float]] = {}
    with open(path, encoding="utf-8") as fh:
        if fmt == "jsonl":
            rows = (json.loads(line) for line in fh if line.strip())
        else:
            rows = csv.DictReader(fh)
        def cell(row: dict, column: str) -> str:
            value = row.get(column)
            return "" if value is None else str(value).strip()

        for row in rows:
            key = (str(row["report_id"]), str(row["abnormality"]))
            lo_raw, hi_raw = cell(row, "prob_lo"), cell(row, "prob_hi")
            if lo_raw and hi_raw:
                intervals[key] = (float(lo_raw), float(hi_raw))
                continue
            prob_raw = cell(row, "probability")
            if prob_raw == STABLE:
                intervals[key] = (0.0, 0.0)
            elif prob_raw:
                value = float(prob_raw)
                intervals[key] = (value, value)
    return intervals
