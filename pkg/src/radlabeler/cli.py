"""Command line interface.

Subcommands:

* ``annotate``: run the prompting pipeline over a report file.
* ``merge``: apply a catalog's umbrella-label merges to an annotation file.
* ``derive-keywords``: export location keyword training labels.
* ``evaluate``: score predictions against gold annotations, with bootstrap
  confidence intervals, weighted and macro aggregate rows, optional paired
  comparison p-values, and a rendered score figure next to the CSV report.
* ``convert-baseline``: translate external annotation formats (vqa,
  reflacx) into the common schema.

Exit codes: 0 success, 2 configuration problems (arguments, catalogs,
scripts), 3 invalid input data, 4 backend transport failure.  Each command
writes a ``<out>.summary.json`` run summary with warning counters so long
unattended runs can be audited afterwards.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings as _warnings
from collections import Counter
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import baselines, eval_stats, figures
from .catalog import Catalog, CatalogError, load_catalog
from .eval_stats import MetricResult, MetricUndefined, ProbabilityInterval
from .keyword_labels import export_training_labels
from .label_merge import apply_merge_groups
from .llm_client import (BackendError, HttpChatBackend, LlmClient, MockBackend,
                         TransportError)
from .prompt_engine import TASKS, annotate_report
from .report_io import (STABLE, AnnotationRecord, ReportError, atomic_write,
                        load_reports, read_annotations, read_gold_intervals,
                        write_annotations)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VALIDATION = 3
EXIT_TRANSPORT = 4

EVAL_TASKS = ("presence", "probability", "location", "severity")


class CliError(Exception):
    def __init__(self, message: str, code: int) -> None:
        super().__init__(message)
        self.code = code


def _config_error(message: str) -> CliError:
    return CliError(message, EXIT_CONFIG)


def _validation_error(message: str) -> CliError:
    return CliError(message, EXIT_VALIDATION)


def _load_catalog(name_or_path: str) -> Catalog:
    try:
        return load_catalog(name_or_path)
    except CatalogError as exc:
        raise _config_error(f"catalog: {exc}") from exc


def _write_summary(out_path: str, summary: dict) -> None:
    def body(fh) -> None:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    atomic_write(out_path + ".summary.json", body)


# --------------------------------------------------------------------------
# annotate
# --------------------------------------------------------------------------

def _build_client(args) -> LlmClient:
    if bool(args.mock_script) == bool(args.backend_url):
        raise _config_error("exactly one of --mock-script or --backend-url is required")
    if args.mock_script:
        backend = MockBackend.from_script(args.mock_script)
    else:
        if not args.model:
            raise _config_error("--model is required with --backend-url")
        backend = HttpChatBackend(args.backend_url, args.model)
    return LlmClient(backend, cache_path=args.cache)


def _parse_tasks(raw: str) -> tuple[str, ...]:
    requested = [part.strip() for part in raw.split(",") if part.strip()]
    unknown = [task for task in requested if task not in TASKS]
    if unknown:
        raise _config_error(f"unknown tasks {unknown}; choose from {', '.join(TASKS)}")
    if not requested:
        raise _config_error("--tasks must name at least one task")
    return tuple(task for task in TASKS if task in requested)


def cmd_annotate(args) -> int:
    catalog = _load_catalog(args.catalog)
    tasks = _parse_tasks(args.tasks)
    try:
        reports = load_reports(args.reports)
    except ReportError as exc:
        raise _validation_error(f"reports: {exc}") from exc
    if not reports:
        raise _validation_error(f"no reports found in {args.reports!r}")
    client = _build_client(args)

    def work(report):
        return annotate_report(report, catalog, client, tasks)

    try:
        if args.concurrency > 1:
            with ThreadPoolExecutor(max_workers=args.concurrency) as pool:
                results = list(pool.map(work, reports))
        else:
            results = [work(report) for report in reports]
    finally:
        client.close()

    records = [record for result in results for record in result.records]
    warning_counts = Counter(w for result in results for w in result.warnings)
    write_annotations(records, args.out)

    if args.trace:
        def body(fh) -> None:
            for result in results:
                for entry in result.trace:
                    fh.write(json.dumps(entry.to_dict(), ensure_ascii=False) + "\n")

        atomic_write(args.trace, body)

    _write_summary(args.out, {
        "command": "annotate",
        "catalog": catalog.name,
        "model": client.model,
        "tasks": list(tasks),
        "reports": len(reports),
        "records": len(records),
        "warnings": dict(warning_counts),
    })
    print(f"annotated {len(reports)} reports -> {len(records)} records "
          f"({args.out})", file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------
# merge / derive-keywords / convert-baseline
# --------------------------------------------------------------------------

def cmd_merge(args) -> int:
    catalog = _load_catalog(args.catalog)
    try:
        records = read_annotations(args.input)
    except ReportError as exc:
        raise _validation_error(f"annotations: {exc}") from exc
    merged = apply_merge_groups(records, catalog.merge_groups)
    write_annotations(merged, args.out)
    _write_summary(args.out, {
        "command": "merge", "catalog": catalog.name,
        "rows_in": len(records), "rows_out": len(merged), "warnings": {},
    })
    return EXIT_OK


def cmd_derive_keywords(args) -> int:
    catalog = _load_catalog(args.catalog)
    try:
        ruleset = catalog.ruleset(args.ruleset)
    except CatalogError as exc:
        raise _config_error(str(exc)) from exc
    try:
        records = read_annotations(args.input)
    except ReportError as exc:
        raise _validation_error(f"annotations: {exc}") from exc
    rows = export_training_labels(records, catalog, ruleset, args.out)
    _write_summary(args.out, {
        "command": "derive-keywords", "catalog": catalog.name,
        "ruleset": args.ruleset, "rows_in": len(records), "rows_out": rows,
        "warnings": {},
    })
    print(f"wrote {rows} keyword label rows ({args.out})", file=sys.stderr)
    return EXIT_OK


def cmd_convert_baseline(args) -> int:
    catalog = _load_catalog(args.catalog)
    try:
        rows = baselines.read_baseline_csv(args.input)
        if args.format == "vqa":
            result = baselines.convert_vqa(rows, catalog)
        else:
            result = baselines.convert_reflacx(rows, catalog,
                                               phase=args.reflacx_phase)
    except baselines.BaselineFormatError as exc:
        raise _validation_error(f"baseline: {exc}") from exc
    baselines.write_converted(result, args.out)
    _write_summary(args.out, {
        "command": "convert-baseline", "format": args.format,
        "catalog": catalog.name, "rows_in": len(rows),
        "rows_out": len(result.records), "warnings": dict(result.warnings),
    })
    return EXIT_OK


# --------------------------------------------------------------------------
# evaluate
# --------------------------------------------------------------------------

def _index_records(records: list[AnnotationRecord],
                   label: str) -> dict[tuple[str, str], AnnotationRecord]:
    indexed: dict[tuple[str, str], AnnotationRecord] = {}
    for record in records:
        key = (record.report_id, record.abnormality)
        if key in indexed:
            raise _validation_error(f"{label}: duplicate row for {key}")
        indexed[key] = record
    return indexed


def _read_predictions(path: str, label: str) -> dict[tuple[str, str], AnnotationRecord]:
    try:
        return _index_records(read_annotations(path), label)
    except ReportError as exc:
        raise _validation_error(f"{label}: {exc}") from exc


def _case_stats(task: str, pred: AnnotationRecord, gold: AnnotationRecord,
                interval: ProbabilityInterval | None, warnings: Counter):
    """Per-case statistics for one aligned pair, or None to skip the case."""
    if task == "presence":
        if pred.presence is None or gold.presence is None:
            warnings["missing_presence"] += 1
            return None
        return eval_stats.presence_case_counts([pred.presence], [gold.presence])[0]
    if task == "probability":
        if pred.probability is None:
            warnings["missing_probability_prediction"] += 1
            return None
        if interval is None:
            warnings["missing_probability_gold"] += 1
            return None
        return eval_stats.probability_errors([pred.probability], [interval])
    if task == "severity":
        return eval_stats.severity_case_counts([pred.severity], [gold.severity])[0]
    raise AssertionError(task)


def _row_n_pos(task: str, gold_rows: list[AnnotationRecord],
               intervals: list[ProbabilityInterval | None],
               gold_positive_cases: int) -> int:
    if task == "presence":
        return sum(1 for record in gold_rows
                   if record.presence is not None
                   and eval_stats.presence_positive(record.presence))
    if task == "probability":
        return sum(1 for interval in intervals
                   if interval is not None and interval.lo > 50)
    if task == "severity":
        return sum(1 for record in gold_rows if record.severity is not None)
    return gold_positive_cases


def _collect_rows(task: str, catalog: Catalog, ruleset,
                  pred: dict, gold: dict, compare: dict | None,
                  gold_intervals: dict, warnings: Counter) -> list[dict]:
    """One evaluation row per catalog abnormality with any usable cases."""
    rows = []
    for row_index, abnormality in enumerate(catalog.names()):
        case_ids = sorted(
            report_id for (report_id, abn) in gold if abn == abnormality
            and (report_id, abn) in pred
            and (compare is None or (report_id, abn) in compare))
        missing = sum(1 for (report_id, abn) in gold
                      if abn == abnormality and (report_id, abn) not in pred)
        if missing:
            warnings["cases_without_prediction"] += missing
        if not case_ids:
            continue

        gold_rows = [gold[(rid, abnormality)] for rid in case_ids]
        if task == "location":
            pred_locs = [pred[(rid, abnormality)].locations for rid in case_ids]
            gold_locs = [g.locations for g in gold_rows]
            try:
                stats_a = eval_stats.location_case_counts(
                    pred_locs, gold_locs, abnormality, ruleset)
            except CatalogError:
                # Abnormality without keywords in this rule set.
                continue
            stats_b = eval_stats.location_case_counts(
                [compare[(rid, abnormality)].locations for rid in case_ids],
                gold_locs, abnormality, ruleset) if compare else None
            gold_positive_cases = sum(
                1 for locs in gold_locs
                if eval_stats.map_to_positive_keywords(locs, abnormality, ruleset))
            intervals = []
        else:
            stats_list, stats_list_b, kept_gold, intervals = [], [], [], []
            for rid in case_ids:
                key = (rid, abnormality)
                interval_raw = gold_intervals.get(key)
                interval = None
                if interval_raw is not None:
                    interval = ProbabilityInterval(*interval_raw)
                stat = _case_stats(task, pred[key], gold[key], interval, warnings)
                if stat is None:
                    continue
                if compare is not None:
                    stat_b = _case_stats(task, compare[key], gold[key], interval,
                                         warnings)
                    if stat_b is None:
                        continue
                    stats_list_b.append(stat_b)
                stats_list.append(stat)
                kept_gold.append(gold[key])
                intervals.append(interval)
            if not stats_list:
                continue
            stats_a = np.vstack(stats_list)
            stats_b = np.vstack(stats_list_b) if compare is not None else None
            gold_rows = kept_gold
            gold_positive_cases = 0

        n_pos = _row_n_pos(task, gold_rows, intervals, gold_positive_cases)
        rows.append({
            "abnormality": abnormality,
            "row_index": row_index,
            "stats": stats_a,
            "stats_compare": stats_b,
            "n": int(stats_a.shape[0]),
            "n_pos": n_pos,
        })
    return rows


def _metric_for(task: str):
    if task == "probability":
        return eval_stats.mae_metric, "MAE"
    return eval_stats.f1_metric, "F1"


def _score_rows(task: str, rows: list[dict], args, warnings: Counter) -> None:
    metric, _ = _metric_for(task)
    for row in rows:
        for key, stats, stream in (("result", row["stats"], 0),
                                   ("result_compare", row["stats_compare"], 1)):
            if stats is None:
                row[key] = None
                continue
            try:
                row[key] = eval_stats.bootstrap_ci(
                    metric, stats, n_samples=args.bootstrap_samples,
                    seed=eval_stats.row_rng(args.seed, row["row_index"], stream),
                    n_pos=row["n_pos"])
            except MetricUndefined:
                warnings["undefined_rows"] += 1
                row[key] = None
        if row["stats_compare"] is not None and row["result"] is not None \
                and row["result_compare"] is not None:
            row["p_value"] = eval_stats.permutation_test(
                metric, row["stats"], row["stats_compare"],
                n_samples=args.permutation_samples,
                seed=eval_stats.row_rng(args.seed, row["row_index"], 2))
        else:
            row["p_value"] = None


def _aggregate_rows(task: str, rows: list[dict], catalog: Catalog, args,
                    warnings: Counter) -> list[dict]:
    metric, _ = _metric_for(task)
    scored = [row for row in rows if row["result"] is not None]
    mask = eval_stats.include_row_mask([row["n_pos"] for row in scored])
    included = [row for row, keep in zip(scored, mask) if keep]
    included_ids = {id(row) for row in included}
    for row in rows:
        row["aggregated"] = id(row) in included_ids
    if len(included) < 2:
        warnings["too_few_rows_for_aggregates"] += 1
        return []

    weight_inputs = []
    for row in included:
        pairs = [(row["result"].score, row["result"].variance)]
        if row["result_compare"] is not None:
            pairs.append((row["result_compare"].score, row["result_compare"].variance))
        weight_inputs.append(pairs)
    with _warnings.catch_warnings():
        _warnings.simplefilter("ignore")
        try:
            weights = eval_stats.mvue_weights(weight_inputs)
        except ValueError:
            warnings["unweightable_rows"] += 1
            return []
    for row, weight in zip(included, weights):
        row["weight"] = float(weight)

    row_cases = [row["stats"] for row in included]
    n_rows = len(catalog.names())
    aggregates = []
    for name, combine, stream_base in (
            ("All-W", lambda scores: eval_stats.aggregate_weighted(scores, weights),
             n_rows),
            ("All-M", lambda scores: eval_stats.aggregate_macro(scores), n_rows + 1)):
        entry = {
            "abnormality": name, "weight": None, "p_value": None,
            "n": int(sum(r["n"] for r in included)),
            "n_pos": int(sum(r["n_pos"] for r in included)),
            "aggregated": False,
            "result_compare": None,
        }
        entry["result"] = eval_stats.aggregate_bootstrap_ci(
            metric, row_cases, combine, n_samples=args.bootstrap_samples,
            seed=eval_stats.row_rng(args.seed, stream_base, 0))
        if all(row["result_compare"] is not None for row in included):
            compare_cases = [row["stats_compare"] for row in included]
            entry["result_compare"] = eval_stats.aggregate_bootstrap_ci(
                metric, compare_cases, combine, n_samples=args.bootstrap_samples,
                seed=eval_stats.row_rng(args.seed, stream_base, 1))
        aggregates.append(entry)
    return aggregates


def _format_result(result: MetricResult | None) -> str:
    return result.format() if result is not None else "n/a"


def _print_table(task: str, rows: list[dict], aggregates: list[dict],
                 compare: bool) -> None:
    _, metric_name = _metric_for(task)
    headers = ["abnormality", metric_name, "n", "n+", "weight"]
    if compare:
        headers += [f"{metric_name} (compare)", "p"]
    lines = []
    for row in rows + aggregates:
        cells = [
            row["abnormality"],
            _format_result(row["result"]),
            str(row["n"]),
            str(row["n_pos"]),
            "" if row.get("weight") is None else f"{row['weight']:.3f}",
        ]
        if compare:
            cells.append(_format_result(row["result_compare"]))
            cells.append("" if row["p_value"] is None else f"{row['p_value']:.4f}")
        lines.append(cells)
    widths = [max(len(h), *(len(line[i]) for line in lines)) if lines else len(h)
              for i, h in enumerate(headers)]
    print("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    for cells in lines:
        print("  ".join(c.ljust(w) for c, w in zip(cells, widths)))


def _write_report_csv(task: str, rows: list[dict], aggregates: list[dict],
                      path: str, compare: bool) -> None:
    _, metric_name = _metric_for(task)
    columns = ["abnormality", "metric", "score", "ci_low", "ci_high", "n",
               "n_pos", "weight", "aggregated"]
    if compare:
        columns += ["score_compare", "ci_low_compare", "ci_high_compare", "p_value"]

    def body(fh) -> None:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows + aggregates:
            result = row["result"]
            out = {
                "abnormality": row["abnormality"],
                "metric": metric_name,
                "score": "" if result is None else f"{result.score:.6f}",
                "ci_low": "" if result is None else f"{result.ci_low:.6f}",
                "ci_high": "" if result is None else f"{result.ci_high:.6f}",
                "n": row["n"],
                "n_pos": row["n_pos"],
                "weight": "" if row.get("weight") is None else f"{row['weight']:.6f}",
                "aggregated": "yes" if row.get("aggregated") else "no",
            }
            if compare:
                rc = row["result_compare"]
                out["score_compare"] = "" if rc is None else f"{rc.score:.6f}"
                out["ci_low_compare"] = "" if rc is None else f"{rc.ci_low:.6f}"
                out["ci_high_compare"] = "" if rc is None else f"{rc.ci_high:.6f}"
                out["p_value"] = "" if row["p_value"] is None else f"{row['p_value']:.6f}"
            writer.writerow(out)

    atomic_write(path, body)


def cmd_evaluate(args) -> int:
    catalog = _load_catalog(args.catalog)
    if args.task not in EVAL_TASKS:
        raise _config_error(f"unknown task {args.task!r}")
    ruleset = None
    if args.task == "location":
        ruleset_name = "evaluation_restricted" if args.restrict_keywords \
            else args.ruleset
        try:
            ruleset = catalog.ruleset(ruleset_name)
        except CatalogError as exc:
            raise _config_error(str(exc)) from exc

    warnings: Counter = Counter()
    pred = _read_predictions(args.pred, "predictions")
    gold = _read_predictions(args.gold, "gold")
    compare = _read_predictions(args.compare, "compare") if args.compare else None
    gold_intervals = read_gold_intervals(args.gold) if args.task == "probability" \
        else {}

    rows = _collect_rows(args.task, catalog, ruleset, pred, gold, compare,
                         gold_intervals, warnings)
    if not rows:
        raise _validation_error("no overlapping cases between predictions and gold")
    with _warnings.catch_warnings(record=True) as caught:
        _warnings.simplefilter("always")
        _score_rows(args.task, rows, args, warnings)
        aggregates = _aggregate_rows(args.task, rows, catalog, args, warnings)
    if caught:
        warnings["bootstrap_warnings"] += len(caught)

    for row in rows:
        row["skipped_resamples"] = row["result"].skipped if row["result"] else 0
    total_skipped = sum(row["skipped_resamples"] for row in rows)
    if total_skipped:
        warnings["skipped_resamples"] += total_skipped

    _print_table(args.task, rows, aggregates, compare is not None)
    _write_report_csv(args.task, rows, aggregates, args.out, compare is not None)

    if not args.no_figure:
        _, metric_name = _metric_for(args.task)
        figure_rows = [
            (row["abnormality"], row["result"].score, row["result"].ci_low,
             row["result"].ci_high)
            for row in rows + aggregates if row["result"] is not None
        ]
        figure_path = os.path.splitext(args.out)[0] + ".png"
        figures.render_score_figure(figure_rows, figure_path, metric_name,
                                    title=f"{args.task} ({catalog.name})")

    _write_summary(args.out, {
        "command": "evaluate",
        "task": args.task,
        "catalog": catalog.name,
        "seed": args.seed,
        "bootstrap_samples": args.bootstrap_samples,
        "rows": len(rows),
        "aggregates": [entry["abnormality"] for entry in aggregates],
        "warnings": dict(warnings),
    })
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing and dispatch
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="radlabeler",
        description="Structured radiology report annotation and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    annotate = sub.add_parser("annotate", help="annotate reports with an LLM backend")
    annotate.add_argument("--reports", required=True, help="report JSONL/CSV file")
    annotate.add_argument("--catalog", required=True,
                          help="shipped catalog name or catalog JSON path")
    annotate.add_argument("--out", required=True, help="output annotation file")
    annotate.add_argument("--tasks", default=",".join(TASKS),
                          help="comma-separated subset of: " + ", ".join(TASKS))
    annotate.add_argument("--backend-url", help="OpenAI-compatible endpoint base URL")
    annotate.add_argument("--model", help="model id for the HTTP backend")
    annotate.add_argument("--mock-script", help="scripted mock backend JSON file")
    annotate.add_argument("--concurrency", type=int, default=1,
                          help="parallel reports (default 1)")
    annotate.add_argument("--cache", help="persistent answer cache path")
    annotate.add_argument("--trace", help="write a prompt/answer trace JSONL here")
    annotate.set_defaults(func=cmd_annotate)

    merge = sub.add_parser("merge", help="apply catalog merge groups")
    merge.add_argument("--in", dest="input", required=True)
    merge.add_argument("--catalog", required=True)
    merge.add_argument("--out", required=True)
    merge.set_defaults(func=cmd_merge)

    derive = sub.add_parser("derive-keywords",
                            help="export location keyword training labels")
    derive.add_argument("--in", dest="input", required=True)
    derive.add_argument("--catalog", required=True)
    derive.add_argument("--ruleset", default="training")
    derive.add_argument("--out", required=True)
    derive.set_defaults(func=cmd_derive_keywords)

    evaluate = sub.add_parser("evaluate", help="score predictions against gold")
    evaluate.add_argument("--pred", required=True)
    evaluate.add_argument("--gold", required=True)
    evaluate.add_argument("--task", required=True, choices=EVAL_TASKS)
    evaluate.add_argument("--catalog", required=True)
    evaluate.add_argument("--out", required=True, help="report CSV path")
    evaluate.add_argument("--compare",
                          help="second prediction file for a paired comparison")
    evaluate.add_argument("--ruleset", default="evaluation",
                          help="keyword rule set for the location task")
    evaluate.add_argument("--restrict-keywords", action="store_true",
                          help="use the restricted keyword rule set")
    evaluate.add_argument("--seed", type=int, default=0)
    evaluate.add_argument("--bootstrap-samples", type=int,
                          default=eval_stats.DEFAULT_BOOTSTRAP_SAMPLES)
    evaluate.add_argument("--permutation-samples", type=int,
                          default=eval_stats.DEFAULT_PERMUTATION_SAMPLES)
    evaluate.add_argument("--no-figure", action="store_true",
                          help="skip rendering the score figure")
    evaluate.set_defaults(func=cmd_evaluate)

    convert = sub.add_parser("convert-baseline",
                             help="convert external baseline annotations")
    convert.add_argument("--in", dest="input", required=True)
    convert.add_argument("--format", required=True, choices=("vqa", "reflacx"))
    convert.add_argument("--catalog", required=True)
    convert.add_argument("--out", required=True)
    convert.add_argument("--reflacx-phase", type=int, default=3, choices=(1, 2, 3))
    convert.set_defaults(func=cmd_convert_baseline)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CatalogError, ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
