"""Evaluation metrics and resampling statistics.

Scoring protocol
----------------
Presence labels binarize before scoring: present and uncertain count as
positive, absent / not mentioned / stable as negative.  Probability
predictions are scored against gold intervals with the distance to the
nearest interval endpoint (zero inside the interval); a "stable" prediction
scores as 0%.  Severity is scored as the binary "any severity stated".
Location predictions and gold locations are both mapped to positive keyword
sets through an evaluation rule set, and every (case, keyword) decision is
pooled into one precision/recall/F1 computation.

Metrics operate on per-case sufficient statistics (count rows or error
values) so the same metric callables drive point estimates, bootstrap
resampling, and paired permutation tests.  A metric raises MetricUndefined
when a denominator vanishes; resamples where that happens are skipped and
counted.

Confidence intervals use the bias-corrected and accelerated (BCa) bootstrap:
cases are resampled with replacement, the bias correction comes from the
fraction of resample scores below the point estimate, and the acceleration
from the skewness of leave-one-out jackknife scores.  Paired system
comparisons use a sign-flip permutation test ((hits + 1) / (valid + 1)
smoothing).  Aggregation over table rows uses minimum-variance-unbiased
weighting: each row's normalized bootstrap variance (variance divided by
squared score, averaged over the systems being compared) is inverted and
normalized to yield the row weight.

Randomness is reproducible: every public entry point takes an integer seed
or a numpy Generator, and callers evaluating many table rows derive one
independent child stream per row via ``row_rng(master_seed, row_index)``.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .catalog import KeywordRuleSet
from .keyword_labels import map_to_positive_keywords
from .report_io import STABLE, AnnotationRecord

DEFAULT_BOOTSTRAP_SAMPLES = 2000
DEFAULT_PERMUTATION_SAMPLES = 2000
DEFAULT_CONFIDENCE = 0.95
MIN_POSITIVE_CASES = 10
SKIP_WARNING_FRACTION = 0.10

POSITIVE_PRESENCES = frozenset({"present", "uncertain"})
NEGATIVE_PRESENCES = frozenset({"absent", "not mentioned", STABLE})


class MetricUndefined(ValueError):
    """Raised when a metric's denominator is zero for the given cases."""


@dataclass(frozen=True)
class ProbabilityInterval:
    """Inclusive percent interval a gold probability judgment allows."""

    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not 0 <= self.lo <= self.hi <= 100:
            raise ValueError(f"invalid probability interval [{self.lo}, {self.hi}]")

    def error(self, percent: float) -> float:
        """Distance from the interval (zero inside it)."""
        if self.lo <= percent <= self.hi:
            return 0.0
        return min(abs(percent - self.lo), abs(percent - self.hi))


@dataclass
class MetricResult:
    """A scored table row: point estimate with its BCa interval."""

    score: float
    ci_low: float
    ci_high: float
    n: int
    n_pos: int | None = None
    bootstrap_samples: int = 0
    skipped: int = 0
    variance: float = 0.0

    def format(self, digits: int = 3) -> str:
        return (f"{self.score:.{digits}f} "
                f"[{self.ci_low:.{digits}f}, {self.ci_high:.{digits}f}]")

    def __repr__(self) -> str:
        return f"MetricResult({self.format()}, n={self.n})"


def _rng_from(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(np.random.SeedSequence(seed))


def row_rng(master_seed: int, row_index: int, stream: int = 0) -> np.random.Generator:
    """Independent per-row random stream derived from one master seed.

    ``stream`` separates the uses within one row (own bootstrap, comparison
    bootstrap, permutation test) so adding one use never shifts another.
    """
    return np.random.default_rng(
        np.random.SeedSequence([master_seed, row_index, stream]))


# --------------------------------------------------------------------------
# Per-case statistics and the metrics over them
# --------------------------------------------------------------------------

def presence_positive(label: str) -> bool:
    """Binarize a presence label for scoring."""
    if label in POSITIVE_PRESENCES:
        return True
    if label in NEGATIVE_PRESENCES:
        return False
    raise ValueError(f"invalid presence label {label!r}")


def binary_case_counts(pred: list[bool], gold: list[bool]) -> np.ndarray:
    """Per-case (tp, fp, fn, tn) rows for aligned binary decisions."""
    if len(pred) != len(gold):
        raise ValueError("prediction and gold sequences differ in length")
    counts = np.zeros((len(pred), 4), dtype=float)
    for i, (p, g) in enumerate(zip(pred, gold)):
        if p and g:
            counts[i, 0] = 1
        elif p and not g:
            counts[i, 1] = 1
        elif g:
            counts[i, 2] = 1
        else:
            counts[i, 3] = 1
    return counts


def presence_case_counts(pred_labels: list[str], gold_labels: list[str]) -> np.ndarray:
    return binary_case_counts([presence_positive(p) for p in pred_labels],
                              [presence_positive(g) for g in gold_labels])


def severity_case_counts(pred_severities: list[str | None],
                         gold_severities: list[str | None]) -> np.ndarray:
    return binary_case_counts([s is not None for s in pred_severities],
                              [s is not None for s in gold_severities])


def prf_from_counts(counts: np.ndarray) -> tuple[float, float, float]:
    """Pooled precision, recall and F1 from (tp, fp, fn[, tn]) count rows."""
    totals = np.asarray(counts, dtype=float).sum(axis=0)
    tp, fp, fn = totals[0], totals[1], totals[2]
    if tp + fp == 0:
        raise MetricUndefined("no positive predictions: precision undefined")
    if tp + fn == 0:
        raise MetricUndefined("no positive gold cases: recall undefined")
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    if precision + recall == 0:
        raise MetricUndefined("precision and recall both zero: F1 undefined")
    f1 = 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def precision_metric(counts: np.ndarray) -> float:
    return prf_from_counts(counts)[0]


def recall_metric(counts: np.ndarray) -> float:
    return prf_from_counts(counts)[1]


def f1_metric(counts: np.ndarray) -> float:
    return prf_from_counts(counts)[2]


def presence_prf(pred_labels: list[str],
                 gold_labels: list[str]) -> tuple[float, float, float]:
    return prf_from_counts(presence_case_counts(pred_labels, gold_labels))


def severity_prf(pred_severities: list[str | None],
                 gold_severities: list[str | None]) -> tuple[float, float, float]:
    return prf_from_counts(severity_case_counts(pred_severities, gold_severities))


def probability_errors(preds: list[int | str],
                       intervals: list[ProbabilityInterval]) -> np.ndarray:
    """Per-case interval-distance errors; "stable" predictions count as 0%."""
    if len(preds) != len(intervals):
        raise ValueError("prediction and interval sequences differ in length")
    errors = np.zeros(len(preds), dtype=float)
    for i, (pred, interval) in enumerate(zip(preds, intervals)):
        percent = 0.0 if pred == STABLE else float(pred)
        if not 0 <= percent <= 100:
            raise ValueError(f"probability prediction {pred!r} outside [0, 100]")
        errors[i] = interval.error(percent)
    return errors


def mae_metric(errors: np.ndarray) -> float:
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise MetricUndefined("no cases: MAE undefined")
    return float(errors.mean())


def probability_mae(preds: list[int | str],
                    intervals: list[ProbabilityInterval]) -> float:
    return mae_metric(probability_errors(preds, intervals))


def location_case_counts(pred_locations: list[tuple[str, ...]],
                         gold_locations: list[tuple[str, ...]],
                         abnormality: str,
                         ruleset: KeywordRuleSet) -> np.ndarray:
    """Per-case pooled keyword counts for the location task.

    Both sides map through the rule set; each (case, keyword) pair is one
    binary decision, summed per case into a (tp, fp, fn, tn) row.
    """
    if len(pred_locations) != len(gold_locations):
        raise ValueError("prediction and gold sequences differ in length")
    keywords = ruleset.keywords_for(abnormality)
    counts = np.zeros((len(pred_locations), 4), dtype=float)
    for i, (pred, gold) in enumerate(zip(pred_locations, gold_locations)):
        pred_set = map_to_positive_keywords(pred, abnormality, ruleset)
        gold_set = map_to_positive_keywords(gold, abnormality, ruleset)
        for keyword in keywords:
            p, g = keyword in pred_set, keyword in gold_set
            if p and g:
                counts[i, 0] += 1
            elif p:
                counts[i, 1] += 1
            elif g:
                counts[i, 2] += 1
            else:
                counts[i, 3] += 1
    return counts


def location_prf(pred_records: list[AnnotationRecord],
                 gold_records: list[AnnotationRecord], abnormality: str,
                 ruleset: KeywordRuleSet) -> tuple[float, float, float]:
    """Pooled keyword PRF over aligned prediction/gold records."""
    counts = location_case_counts([r.locations for r in pred_records],
                                  [r.locations for r in gold_records],
                                  abnormality, ruleset)
    return prf_from_counts(counts)


# --------------------------------------------------------------------------
# Resampling
# --------------------------------------------------------------------------

def bootstrap_ci(metric, cases, n_samples: int = DEFAULT_BOOTSTRAP_SAMPLES,
                 seed: int | np.random.Generator = 0,
                 confidence: float = DEFAULT_CONFIDENCE,
                 n_pos: int | None = None) -> MetricResult:
    """Point estimate with a BCa bootstrap confidence interval.

    ``cases`` is an array-like of per-case statistics (first axis indexes
    cases); ``metric`` maps such an array to a float and may raise
    MetricUndefined on degenerate resamples, which are skipped and counted
    (with a warning past 10%).  Resampling, bias correction, acceleration and
    the final clamp keep ci_low <= score <= ci_high.
    """
    arr = np.asarray(cases)
    n = arr.shape[0]
    if n == 0:
        raise MetricUndefined("no cases to score")
    point = float(metric(arr))
    rng = _rng_from(seed)
    indices = rng.integers(0, n, size=(n_samples, n))

    scores = np.empty(n_samples, dtype=float)
    valid = 0
    skipped = 0
    for row in indices:
        try:
            scores[valid] = metric(arr[row])
            valid += 1
        except MetricUndefined:
            skipped += 1
    boot = scores[:valid]
    if skipped > SKIP_WARNING_FRACTION * n_samples:
        warnings.warn(f"{skipped}/{n_samples} bootstrap resamples were degenerate "
                      f"and skipped", stacklevel=2)
    if valid == 0:
        return MetricResult(score=point, ci_low=point, ci_high=point, n=n,
                            n_pos=n_pos, bootstrap_samples=0, skipped=skipped)

    variance = float(boot.var())
    if np.ptp(boot) == 0:
        return MetricResult(score=point, ci_low=point, ci_high=point, n=n,
                            n_pos=n_pos, bootstrap_samples=valid,
                            skipped=skipped, variance=variance)

    eps = 1.0 / (2 * valid)
    frac_below = float(np.clip(np.mean(boot < point), eps, 1 - eps))
    z0 = norm.ppf(frac_below)

    jack = []
    for i in range(n):
        try:
            jack.append(metric(np.delete(arr, i, axis=0)))
        except MetricUndefined:
            continue
    if len(jack) >= 2:
        deviations = np.mean(jack) - np.asarray(jack, dtype=float)
        denominator = float(np.sum(deviations ** 2) ** 1.5)
        acceleration = float(np.sum(deviations ** 3) / (6 * denominator)) \
            if denominator > 0 else 0.0
    else:
        acceleration = 0.0

    alpha = (1 - confidence) / 2

    def adjusted(z: float) -> float:
        num = z0 + z
        return float(norm.cdf(z0 + num / (1 - acceleration * num)))

    lo_q = adjusted(norm.ppf(alpha))
    hi_q = adjusted(norm.ppf(1 - alpha))
    ci_low, ci_high = np.quantile(boot, [lo_q, hi_q])
    return MetricResult(
        score=point,
        ci_low=float(min(ci_low, point)),
        ci_high=float(max(ci_high, point)),
        n=n, n_pos=n_pos, bootstrap_samples=valid, skipped=skipped,
        variance=variance,
    )


def permutation_test(metric, cases_a, cases_b,
                     n_samples: int = DEFAULT_PERMUTATION_SAMPLES,
                     seed: int | np.random.Generator = 0) -> float:
    """Paired sign-flip permutation p-value for a metric difference.

    ``cases_a`` and ``cases_b`` are aligned per-case statistics of the two
    systems against the same gold.  Each permutation swaps the two systems'
    rows independently per case with probability one half; the p-value is the
    smoothed fraction of permutations whose absolute score difference reaches
    the observed one.  Symmetric in its arguments for a fixed seed.
    """
    a = np.asarray(cases_a, dtype=float)
    b = np.asarray(cases_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("case arrays of the two systems differ in shape")
    observed = abs(float(metric(a)) - float(metric(b)))
    rng = _rng_from(seed)
    shape = (len(a),) + (1,) * (a.ndim - 1)
    hits = 0
    valid = 0
    for _ in range(n_samples):
        mask = (rng.random(len(a)) < 0.5).reshape(shape)
        swapped_a = np.where(mask, b, a)
        swapped_b = np.where(mask, a, b)
        try:
            delta = abs(float(metric(swapped_a)) - float(metric(swapped_b)))
        except MetricUndefined:
            continue
        valid += 1
        if delta >= observed - 1e-12:
            hits += 1
    return (hits + 1) / (valid + 1)


# --------------------------------------------------------------------------
# Aggregation across table rows
# --------------------------------------------------------------------------

def mvue_weights(rows: list[list[tuple[float, float]]]) -> np.ndarray:
    """Minimum-variance row weights from per-system (score, variance) pairs.

    Each row's variances are normalized by its squared scores and averaged
    across systems; weights are the normalized inverses.  Rows containing a
    zero score are excluded (weight 0) with a warning; rows with zero
    normalized variance split all the weight between them.
    """
    inverses = np.zeros(len(rows))
    exact = np.zeros(len(rows), dtype=bool)
    excluded = []
    for i, row in enumerate(rows):
        scores = np.array([score for score, _ in row], dtype=float)
        variances = np.array([variance for _, variance in row], dtype=float)
        if scores.size == 0 or np.any(scores == 0):
            excluded.append(i)
            continue
        mean_normalized = float(np.mean(variances / scores ** 2))
        if mean_normalized == 0:
            exact[i] = True
        else:
            inverses[i] = 1 / mean_normalized
    if excluded:
        warnings.warn(f"rows {excluded} have zero scores and were excluded "
                      f"from weighting", stacklevel=2)
    if exact.any():
        weights = np.zeros(len(rows))
        weights[exact] = 1.0 / exact.sum()
        return weights
    total = inverses.sum()
    if total == 0:
        raise ValueError("no rows left to weight")
    return inverses / total


def aggregate_weighted(scores, weights) -> float:
    """Weighted combination of row scores (the All-W table row)."""
    scores = np.asarray(scores, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if scores.shape != weights.shape:
        raise ValueError("scores and weights differ in shape")
    return float(np.dot(scores, weights))


def aggregate_macro(scores, groups=None, weights=None) -> float:
    """Unweighted mean over per-group combinations (the All-M table row).

    ``groups`` labels each row (e.g. its abnormality); rows sharing a label
    are first combined, with renormalized ``weights`` when given, otherwise
    averaged.  Without groups every row is its own group.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("no scores to aggregate")
    if groups is None:
        return float(scores.mean())
    groups = list(groups)
    if len(groups) != scores.size:
        raise ValueError("groups and scores differ in length")
    order = sorted(set(groups), key=groups.index)
    combined = []
    for group in order:
        idx = [i for i, g in enumerate(groups) if g == group]
        if weights is None:
            combined.append(scores[idx].mean())
        else:
            w = np.asarray(weights, dtype=float)[idx]
            if w.sum() == 0:
                combined.append(scores[idx].mean())
            else:
                combined.append(float(np.dot(scores[idx], w / w.sum())))
    return float(np.mean(combined))


def include_row_mask(n_pos_values, min_positives: int = MIN_POSITIVE_CASES) -> np.ndarray:
    """Rows eligible for aggregation: strictly more than ``min_positives``."""
    return np.asarray([n is not None and n > min_positives for n in n_pos_values])


def aggregate_bootstrap_ci(metric, row_cases: list, combine,
                           n_samples: int = DEFAULT_BOOTSTRAP_SAMPLES,
                           seed: int | np.random.Generator = 0,
                           confidence: float = DEFAULT_CONFIDENCE) -> MetricResult:
    """CI for a combination of per-row metric scores (All-W / All-M rows).

    ``row_cases`` holds each included row's per-case statistics; ``combine``
    maps the vector of row scores to the aggregate (a weighted sum or macro
    mean with weights already bound).  Rows are resampled independently
    (stratified, so every resample keeps each row's case count); a resampled
    row whose metric is degenerate falls back to its point score.  The
    interval is a bias-corrected percentile interval.
    """
    rng = _rng_from(seed)
    arrays = [np.asarray(cases) for cases in row_cases]
    point_scores = np.array([metric(arr) for arr in arrays], dtype=float)
    point = float(combine(point_scores))
    boot = np.empty(n_samples, dtype=float)
    fallbacks = 0
    for b in range(n_samples):
        scores = np.empty(len(arrays), dtype=float)
        for i, arr in enumerate(arrays):
            indices = rng.integers(0, arr.shape[0], size=arr.shape[0])
            try:
                scores[i] = metric(arr[indices])
            except MetricUndefined:
                scores[i] = point_scores[i]
                fallbacks += 1
        boot[b] = combine(scores)
    total_n = int(sum(arr.shape[0] for arr in arrays))
    variance = float(boot.var())
    if np.ptp(boot) == 0:
        return MetricResult(score=point, ci_low=point, ci_high=point, n=total_n,
                            bootstrap_samples=n_samples, variance=variance)
    eps = 1.0 / (2 * n_samples)
    z0 = norm.ppf(float(np.clip(np.mean(boot < point), eps, 1 - eps)))
    alpha = (1 - confidence) / 2
    lo_q = float(norm.cdf(2 * z0 + norm.ppf(alpha)))
    hi_q = float(norm.cdf(2 * z0 + norm.ppf(1 - alpha)))
    ci_low, ci_high = np.quantile(boot, [lo_q, hi_q])
    return MetricResult(score=point, ci_low=float(min(ci_low, point)),
                        ci_high=float(max(ci_high, point)), n=total_n,
                        bootstrap_samples=n_samples, skipped=fallbacks,
                        variance=variance)


# --------------------------------------------------------------------------
# Baseline adapter tables
# --------------------------------------------------------------------------

# Gold probability intervals for the six certainty phrasings used by the
# sentence-level annotation dataset.
REFLACX_INTERVALS: dict[str, tuple[float, float]] = {
    "absent": (0, 5),
    "unlikely (<10%)": (0, 15),
    "less likely (25%)": (10, 40),
    "possibly (50%)": (35, 65),
    "suspicious for/probably (75%)": (60, 90),
    "consistent with (>90%)": (85, 100),
}

_REFLACX_ALIASES: dict[str, str] = {
    "unlikely": "unlikely (<10%)",
    "less likely": "less likely (25%)",
    "possibly": "possibly (50%)",
    "suspicious for": "suspicious for/probably (75%)",
    "probably": "suspicious for/probably (75%)",
    "suspicious for/probably": "suspicious for/probably (75%)",
    "consistent with": "consistent with (>90%)",
}


def reflacx_interval(category: str) -> ProbabilityInterval:
    """Gold interval for one certainty category (case-insensitive)."""
    key = " ".join(category.casefold().split())
    key = _REFLACX_ALIASES.get(key, key)
    try:
        lo, hi = REFLACX_INTERVALS[key]
    except KeyError:
        raise ValueError(f"unknown certainty category {category!r}") from None
    return ProbabilityInterval(lo, hi)


# Phrase tables mapping the VQA dataset's controlled wording to percents and
# severity classes.  Matching is longest-trigger-first; a trigger matches
# when its tokens appear, in order, as substrings of the expression's tokens
# (so the "possibl" stem covers "possible"/"possibly", and "not exclude"
# covers "cannot be excluded").
VQA_PROBABILITY_PHRASES: list[tuple[int, tuple[str, ...]]] = [
    (100, ("positive", "change in")),
    (70, ("probable", "probabl", "likely", "may", "could", "potential")),
    (50, ("might", "possibl", "possible")),
    (30, ("unlikely", "not exclude", "cannot be verified", "difficult rule out",
          "not ruled out", "cannot be accurately assessed", "not rule out",
          "impossible exclude", "cannot accurately assesses", "cannot be assessed",
          "cannot be identified", "cannot be confirmed", "cannot be evaluated",
          "difficult exclude")),
    (0, ("no", "without", "negative", "clear of", "exclude", "lack of",
         "rule out", "ruled out")),
]

VQA_SEVERITY_PHRASES: list[tuple[str | None, tuple[str, ...]]] = [
    ("mild", ("mild", "minimal", "small", "subtle", "minimally", "mildly",
              "trace", "minor")),
    ("moderate", ("moderate", "mild to moderate", "moderately")),
    ("severe", ("massive", "severe", "moderate to severe", "moderate to large")),
    (None, ("increasing", "decreasing", "acute")),
]

_WORD_RE = re.compile(r"[a-z0-9]+")


def _trigger_matches(expression_tokens: list[str], trigger: str) -> bool:
    position = 0
    for trigger_token in _WORD_RE.findall(trigger):
        while (position < len(expression_tokens)
               and trigger_token not in expression_tokens[position]):
            position += 1
        if position == len(expression_tokens):
            return False
        position += 1
    return True


def _lookup_phrases(expression: str, table) -> tuple[bool, object]:
    tokens = _WORD_RE.findall(expression.casefold())
    flattened = [(value, trigger) for value, triggers in table for trigger in triggers]
    flattened.sort(key=lambda pair: -len(pair[1]))
    for value, trigger in flattened:
        if _trigger_matches(tokens, trigger):
            return True, value
    return False, None


def vqa_phrase_lookup(expression: str, kind: str) -> tuple[bool, object]:
    """Table lookup with an explicit matched flag.

    The severity table maps some phrasings (pure change descriptions) to no
    severity at all, which callers must tell apart from an unknown wording.
    """
    if kind == "probability":
        return _lookup_phrases(expression, VQA_PROBABILITY_PHRASES)
    if kind == "severity":
        return _lookup_phrases(expression, VQA_SEVERITY_PHRASES)
    raise ValueError(f"unknown adaptation kind {kind!r}")


def adapt_vqa(expression: str, kind: str):
    """Map one VQA wording to a percent (kind="probability") or severity
    class (kind="severity").  Returns None when no table phrase matches."""
    matched, value = vqa_phrase_lookup(expression, kind)
    return value if matched else None
