"""Prompt templates, answer parsers, and decision-tree execution.

The annotation pipeline asks an LLM a sequence of short constrained
questions about one report and one abnormality at a time.  Thirteen numbered
templates cover four tasks:

* presence: yes/no prompts 1 (possible presence), 2 (stability),
  4 (might be present), 6 (characterized as normal), 8 (stated absence),
  walked as a decision tree that ends in one of five presence labels.
* probability: prompts 3/5/7 ask for a percent likelihood, phrased
  neutrally, conditioned on possible presence, or conditioned on stated
  absence; which one runs depends on the branch the presence walk took.
* location: prompt 9 gates, prompt 10 lists candidate localizing
  expressions, prompt 11 classifies each candidate (only "anatomical
  location" answers survive).
* severity: prompt 12 gates, prompt 13 picks mild/moderate/severe.

Templates substitute ``<report>``, ``<label>`` and ``<expression>``
placeholders.  Presence prompts use the abnormality's presence denomination;
the other prompts use its probability/location/severity denomination.  For
non-radiograph catalogs, "Given the full report"/"Given the complete report"
gain the modality word ("Given the full ct report").  Two wording variants
exist: abnormalities flagged ``stable_normal_variant`` drop "specifically"
in prompts 2 and 6, and abnormalities flagged ``always_might_be_present``
replace prompt 4 by a forced yes.

Yes/no answers that parse as neither yes nor no take the "No" branch and are
reported as warnings rather than aborting a long annotation run.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

from .catalog import (AbnormalitySpec, Catalog, DecisionTree, is_terminal,
                      terminal_label, terminal_prompt)
from .llm_client import LlmClient, LlmRequest, QueryMeta
from .report_io import AnnotationRecord, Report, prepare_prompt_text

SYSTEM_PROMPT = (
    "A chat between a radiologist and an artificial intelligence assistant trained "
    "to understand radiology reports and any synonyms and word equivalency of "
    "findings and medical terms that may appear in the report. The assistant gives "
    "helpful structured answers to the radiologist."
)

_PROBABILITY_PREAMBLE = (
    "Consider in your answer: 1) radiologists might skip some findings because of "
    "their low priority 2) explore all range of probabilities, giving preference "
    "to non-round probabilities 3) medical wording synonyms, subtypes of "
    "abnormalities 4) radiologists might express their uncertainty using words "
    "such as \"or\", \"possibly\", \"can't exclude\", etc... "
)
_PROBABILITY_CLOSING = (
    " estimate from the report wording how likely another radiologist is to "
    "observe the presence of any type of \"<label>\" in the same imaging. Respond "
    "with the template \"___% likely.\" and no other words."
)

TEMPLATES: dict[int, str] = {
    1: ("Given the full report \"<report>\", use a one sentence logical deductive "
        "reasoning to infer if the radiologist observed possible presence of "
        "evidence of \"<label>\". Respond only with \"Yes\" or \"No\"."),
    2: ("Given the full report \"<report>\", use a one sentence logical deductive "
        "reasoning to infer if the radiologist characterized specifically "
        "\"<label>\" as stable or unchanged. Respond only with \"Yes\" or \"No\"."),
    3: (_PROBABILITY_PREAMBLE + "Given the complete report \"<report>\","
        + _PROBABILITY_CLOSING),
    4: ("Given the full report \"<report>\", use a one sentence logical deductive "
        "reasoning to infer if \"<label>\" might be present. Respond only with "
        "\"Yes\" or \"No\"."),
    5: (_PROBABILITY_PREAMBLE + "Given the complete report \"<report>\", "
        "consistent with the radiologist observing \"<label>\","
        + _PROBABILITY_CLOSING),
    6: ("Given the full report \"<report>\", use a one sentence logical deductive "
        "reasoning to infer if the radiologist characterized specifically "
        "\"<label>\" as normal. Respond only with \"Yes\" or \"No\"."),
    7: (_PROBABILITY_PREAMBLE + "Given the complete report \"<report>\", "
        "consistent with the radiologist stating the absence of evidence "
        "\"<label>\"," + _PROBABILITY_CLOSING),
    8: ("Given the full report \"<report>\", use a one sentence logical deductive "
        "reasoning to infer if the radiologist stated the absence of evidence of "
        "\"<label>\". Respond only with \"Yes\" or \"No\"."),
    9: ("Given the complete report \"<report>\", does it mention a location for "
        "specifically \"<label>\"? Respond only with \"Yes\" or \"No\"."),
    10: ("Given the report \"<report>\", list the localizing expressions "
         "characterizing specifically the \"<label>\" finding. Each adjective "
         "expression should be between quotes, broken down into each and every one "
         "of the localizing adjectives and each independent localiziation "
         "prepositional phrase, and separated by comma. Output an empty list "
         "(\"[]\" is an empty list) if there are 0 locations mentioned for "
         "\"<label>\". Do not mention the central nouns identified as \"<label>\". "
         "Do not mention any nouns that are not part of an adjective. Only include "
         "in your answer location adjectives adjacent to the mention of the "
         "\"<label>\" finding. Exclude from your answer adjectives for other "
         "findings. Use very short answers without complete sentences. Start the "
         "list (0+ elements) of only localizing adjectives or localizing "
         "expressions (preposition + noun) right here: ["),
    11: ("Consider in your answer: 1) medical wording synonyms, subtypes of "
         "abnormalities 2) abreviations of the medical vocabulary. Given the "
         "complete report \"<report>\", is the isolated adjective \"<expression>\", "
         "on its own, characterizing a medical finding in what way? Respond only "
         "with \"_\" where _ is the number corresponding to the correct answer.\n"
         "(1) Anatomical location of \"<label>\"\n"
         "(2) Comparison with a previous report for \"<label>\"\n"
         "(3) Severity of \"<label>\"\n"
         "(4) Size of \"<label>\"\n"
         "(5) Probability of presence of \"<label>\"\n"
         "(6) Visual texture description of \"<label>\"\n"
         "(7) It is not characterizing the \"<label>\" mention noun\n"
         "(8) A type of support device\n"
         "Answer:\""),
    12: ("Given the complete report \"<report>\", would you be able to "
         "characterize the severity of \"<label>\", as either \"Mild\", "
         "\"Moderate\" or \"Severe\" only from the words of the report? Respond "
         "only with \"Yes\" or \"No\"."),
    13: ("Given the complete report \"<report>\", characterize the severity of "
         "\"<label>\" as either \"Mild\", \"Moderate\" or \"Severe\" or "
         "\"Undefined\" only from the words of the report, and not from "
         "comparisons or changes. Do not add extra words to your answer and "
         "exclusively use the words from one of those four options."),
}

# Wording variants: prompts 2 and 6 without "specifically" (used for labels
# whose stability/normality wording reads better without it), and the forced
# affirmative replacing prompt 4.
STABLE_VARIANT_TEMPLATES: dict[int, str] = {
    2: ("Given the full report \"<report>\", use a one sentence logical deductive "
        "reasoning to infer if the radiologist characterized \"<label>\" as "
        "stable or unchanged. Respond only with \"Yes\" or \"No\"."),
    6: ("Given the full report \"<report>\", use a one sentence logical deductive "
        "reasoning to infer if the radiologist characterized \"<label>\" as "
        "normal. Respond only with \"Yes\" or \"No\"."),
}
FORCED_YES_TEMPLATE = "Say \"Yes\"."

PROMPT_IDS = tuple(sorted(TEMPLATES))
PRESENCE_PROMPTS = frozenset({1, 2, 4, 6, 8})
PROBABILITY_PROMPTS = frozenset({3, 5, 7})
LOCATION_PROMPTS = frozenset({9, 10, 11})
SEVERITY_PROMPTS = frozenset({12, 13})

YES_NO_PROMPTS = frozenset({1, 2, 4, 6, 8, 9, 12})

# Answer budgets: tiny for yes/no and category picks, a little more for the
# templated percent/severity answers, generous for the location list.
MAX_NEW_TOKENS: dict[int, int] = {
    1: 4, 2: 4, 4: 4, 6: 4, 8: 4, 9: 4, 11: 4, 12: 4,
    3: 8, 5: 8, 7: 8, 13: 8,
    10: 256,
}

TASKS = ("presence", "probability", "location", "severity")

_MODALITY_PREFIXES = ("Given the full report", "Given the complete report")


def render_prompt(template_id: int, report_text: str, spec: AbnormalitySpec,
                  modality: str = "cxr", expression: str | None = None) -> str:
    """Render one template for one abnormality and report."""
    if template_id not in TEMPLATES:
        raise ValueError(f"unknown template id {template_id}")
    if template_id == 4 and spec.always_might_be_present:
        return FORCED_YES_TEMPLATE
    if template_id in STABLE_VARIANT_TEMPLATES and spec.stable_normal_variant:
        template = STABLE_VARIANT_TEMPLATES[template_id]
    else:
        template = TEMPLATES[template_id]
    if modality != "cxr":
        for prefix in _MODALITY_PREFIXES:
            head, _, tail = prefix.rpartition(" ")
            template = template.replace(prefix, f"{head} {modality} {tail}")
    if template_id in PRESENCE_PROMPTS:
        label = spec.denomination_presence
    else:
        label = spec.denomination_pls
    if expression is not None:
        template = template.replace("<expression>", expression)
    template = template.replace("<label>", label)
    # The report text is substituted last so its content is never treated as
    # a placeholder.
    return template.replace("<report>", report_text)


_YES_NO_RE = re.compile(r"\b(yes|no)\b", re.IGNORECASE)
_PERCENT_RE = re.compile(r"(\d+)%")
_CATEGORY_RE = re.compile(r"[1-8]")
_SEVERITY_RE = re.compile(r"\b(mild|moderate|severe|undefined)\b", re.IGNORECASE)
_QUOTED_RE = re.compile(r"\"([^\"]*)\"")


def parse_yes_no(text: str) -> str | None:
    """First standalone yes/no in the answer, lowercased; None if neither."""
    match = _YES_NO_RE.search(text)
    return match.group(1).lower() if match else None


def parse_percentage(text: str) -> int | None:
    """First integer immediately preceding '%'; None if absent or not 0-100."""
    match = _PERCENT_RE.search(text)
    if not match:
        return None
    value = int(match.group(1))
    return value if 0 <= value <= 100 else None


def parse_category(text: str) -> int | None:
    """First digit 1-8 in the answer; None if there is none."""
    match = _CATEGORY_RE.search(text)
    return int(match.group(0)) if match else None


def parse_severity(text: str) -> str | None:
    """First of mild/moderate/severe/undefined in the answer; None otherwise."""
    match = _SEVERITY_RE.search(text)
    return match.group(1).lower() if match else None


def parse_expression_list(text: str) -> tuple[list[str], bool]:
    """Parse the answer continuing prompt 10's opened list.

    Reads quoted strings up to the first ']' (or end of text), lowercasing
    and stripping each.  Returns (expressions, warning): the warning flag is
    set for unterminated quotes or for completely unquoted content, where a
    best-effort comma split is used instead.
    """
    region = text.split("]", 1)[0]
    expressions = [m.strip().lower() for m in _QUOTED_RE.findall(region)]
    expressions = [e for e in expressions if e]
    warning = False
    remainder = _QUOTED_RE.sub("", region)
    if remainder.count("\"") % 2 == 1:
        # An opening quote was never closed; salvage what follows it.
        tail = remainder.rsplit("\"", 1)[1].strip().lower()
        if tail:
            expressions.append(tail)
        warning = True
    elif not expressions and "\"" not in region and region.strip():
        expressions = [part.strip().lower() for part in region.split(",")
                       if part.strip()]
        warning = True
    return expressions, warning


@dataclass
class TraceEntry:
    """One backend interaction (or forced answer) during annotation."""

    report_id: str
    abnormality: str
    stage: str
    prompt_id: int
    prompt_sha256: str
    raw_answer: str
    parsed: str
    expression: str | None = None
    warning: str | None = None
    forced: bool = False

    def to_dict(self) -> dict:
        out = {
            "report_id": self.report_id,
            "abnormality": self.abnormality,
            "stage": self.stage,
            "prompt_id": self.prompt_id,
            "prompt_sha256": self.prompt_sha256,
            "raw_answer": self.raw_answer,
            "parsed": self.parsed,
        }
        if self.expression is not None:
            out["expression"] = self.expression
        if self.warning is not None:
            out["warning"] = self.warning
        if self.forced:
            out["forced"] = True
        return out


@dataclass
class TreeResult:
    label: str
    answers: dict[int, str]
    trace: list[TraceEntry] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


@dataclass
class _Context:
    report_id: str
    report_text: str
    spec: AbnormalitySpec
    modality: str
    client: LlmClient

    def ask(self, prompt_id: int, stage: str, expression: str | None = None,
            refresh: bool = False) -> tuple[str, TraceEntry]:
        prompt = render_prompt(prompt_id, self.report_text, self.spec,
                               self.modality, expression)
        request = LlmRequest(system_prompt=SYSTEM_PROMPT, user_prompt=prompt,
                             max_new_tokens=MAX_NEW_TOKENS[prompt_id])
        meta = QueryMeta(report_id=self.report_id, prompt_id=prompt_id,
                         abnormality=self.spec.name, expression=expression)
        raw = self.client.query(request, meta, refresh=refresh)
        entry = TraceEntry(
            report_id=self.report_id, abnormality=self.spec.name, stage=stage,
            prompt_id=prompt_id,
            prompt_sha256=hashlib.sha256(prompt.encode("utf-8")).hexdigest(),
            raw_answer=raw, parsed="", expression=expression,
        )
        return raw, entry

    def forced_entry(self, prompt_id: int, stage: str) -> TraceEntry:
        prompt = render_prompt(prompt_id, self.report_text, self.spec, self.modality)
        return TraceEntry(
            report_id=self.report_id, abnormality=self.spec.name, stage=stage,
            prompt_id=prompt_id,
            prompt_sha256=hashlib.sha256(prompt.encode("utf-8")).hexdigest(),
            raw_answer="Yes", parsed="yes", forced=True,
        )


def _ask_yes_no(ctx: _Context, prompt_id: int, stage: str) -> tuple[str, TraceEntry]:
    """Ask a yes/no prompt; unparseable answers fall to "no" with a warning."""
    if prompt_id == 4 and ctx.spec.always_might_be_present:
        entry = ctx.forced_entry(prompt_id, stage)
        return "yes", entry
    raw, entry = ctx.ask(prompt_id, stage)
    parsed = parse_yes_no(raw)
    if parsed is None:
        entry.warning = "unparseable_yes_no"
        parsed = "no"
    entry.parsed = parsed
    return parsed, entry


def run_presence_tree(ctx: _Context, tree: DecisionTree) -> TreeResult:
    """Walk the presence tree and return the terminal label plus the trace."""
    result = TreeResult(label="", answers={})
    node_id = tree.entry
    while True:
        node = tree.nodes[node_id]
        answer, entry = _ask_yes_no(ctx, node.prompt_id, stage=node_id)
        if entry.warning:
            result.warnings.append(entry.warning)
        result.trace.append(entry)
        result.answers[node.prompt_id] = answer
        target = node.on_yes if answer == "yes" else node.on_no
        if is_terminal(target):
            label = terminal_label(target)
            if label is None:
                raise ValueError(f"presence tree reached non-label terminal {target!r}")
            result.label = label
            return result
        node_id = target


def _walk_shared_tree(ctx: _Context, tree: DecisionTree, answers: dict[int, str],
                      result: TreeResult, stage_prefix: str) -> str:
    """Walk a tree reusing prior yes/no answers, asking only for gaps."""
    node_id = tree.entry
    while True:
        node = tree.nodes[node_id]
        answer = answers.get(node.prompt_id)
        if answer is None:
            answer, entry = _ask_yes_no(ctx, node.prompt_id,
                                        stage=f"{stage_prefix}:{node_id}")
            if entry.warning:
                result.warnings.append(entry.warning)
            result.trace.append(entry)
            answers[node.prompt_id] = answer
        target = node.on_yes if answer == "yes" else node.on_no
        if is_terminal(target):
            return target
        node_id = target


def run_probability(ctx: _Context, tree: DecisionTree,
                    presence_answers: dict[int, str]) -> TreeResult:
    """Resolve the probability value for one abnormality.

    The tree reuses the yes/no answers recorded by the presence walk, so the
    shared prefix costs no extra backend calls.  A stable terminal yields the
    value "stable"; an ask terminal runs that percent prompt, retrying once
    (bypassing the cache) when the answer fails to parse.
    """
    result = TreeResult(label="", answers=dict(presence_answers))
    target = _walk_shared_tree(ctx, tree, result.answers, result, "probability")
    label = terminal_label(target)
    if label is not None:
        if label != "stable":
            raise ValueError(f"probability tree reached unexpected label {label!r}")
        result.label = "stable"
        return result
    prompt_id = terminal_prompt(target)
    for attempt in range(2):
        raw, entry = ctx.ask(prompt_id, stage=f"probability:{prompt_id}",
                             refresh=attempt > 0)
        value = parse_percentage(raw)
        entry.parsed = "" if value is None else str(value)
        if value is None:
            entry.warning = "unparseable_percentage"
            result.warnings.append(entry.warning)
        result.trace.append(entry)
        if value is not None:
            result.label = str(value)
            return result
    result.warnings.append("probability_missing")
    result.label = ""
    return result


def run_location(ctx: _Context) -> tuple[list[str], list[TraceEntry], list[str]]:
    """Gate, list, and verify localizing expressions for one abnormality."""
    trace: list[TraceEntry] = []
    warnings: list[str] = []
    answer, entry = _ask_yes_no(ctx, 9, stage="location:gate")
    if entry.warning:
        warnings.append(entry.warning)
    trace.append(entry)
    if answer == "no":
        return [], trace, warnings

    raw, entry = ctx.ask(10, stage="location:list")
    expressions, malformed = parse_expression_list(raw)
    entry.parsed = ", ".join(expressions)
    if malformed:
        entry.warning = "malformed_expression_list"
        warnings.append(entry.warning)
    trace.append(entry)

    name = ctx.spec.name.casefold()
    kept: list[str] = []
    seen: set[str] = set()
    for expression in expressions:
        if expression == name or expression in seen:
            continue
        seen.add(expression)
        raw, entry = ctx.ask(11, stage="location:verify", expression=expression)
        category = parse_category(raw)
        entry.parsed = "" if category is None else str(category)
        if category is None:
            entry.warning = "unparseable_category"
            warnings.append(entry.warning)
        trace.append(entry)
        if category == 1:
            kept.append(expression)
    return kept, trace, warnings


def run_severity(ctx: _Context) -> tuple[str | None, list[TraceEntry], list[str]]:
    """Gate and resolve the severity class for one abnormality."""
    trace: list[TraceEntry] = []
    warnings: list[str] = []
    answer, entry = _ask_yes_no(ctx, 12, stage="severity:gate")
    if entry.warning:
        warnings.append(entry.warning)
    trace.append(entry)
    if answer == "no":
        return None, trace, warnings
    raw, entry = ctx.ask(13, stage="severity:class")
    severity = parse_severity(raw)
    entry.parsed = severity or ""
    if severity is None:
        entry.warning = "unparseable_severity"
        warnings.append(entry.warning)
    trace.append(entry)
    if severity in (None, "undefined"):
        return None, trace, warnings
    return severity, trace, warnings


@dataclass
class AnnotationResult:
    records: list[AnnotationRecord]
    trace: list[TraceEntry]
    warnings: list[str]


def annotate_report(report: Report, catalog: Catalog, client: LlmClient,
                    tasks: tuple[str, ...] = TASKS) -> AnnotationResult:
    """Annotate one report for every catalog abnormality.

    The presence tree always runs (probability branching and the
    location/severity gates depend on it); the returned records only carry
    the fields named in ``tasks``.
    """
    for task in tasks:
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}; expected subset of {TASKS}")
    presence_tree = catalog.trees.get("presence")
    if presence_tree is None:
        raise ValueError(f"catalog {catalog.name!r} has no presence tree")
    probability_tree = catalog.trees.get("probability")
    if "probability" in tasks and probability_tree is None:
        raise ValueError(f"catalog {catalog.name!r} has no probability tree")

    report_text = prepare_prompt_text(report)
    result = AnnotationResult(records=[], trace=[], warnings=[])
    for spec in catalog.abnormalities:
        ctx = _Context(report_id=report.id, report_text=report_text, spec=spec,
                       modality=catalog.modality, client=client)
        presence = run_presence_tree(ctx, presence_tree)
        result.trace.extend(presence.trace)
        result.warnings.extend(presence.warnings)

        probability: int | str | None = None
        if "probability" in tasks:
            prob = run_probability(ctx, probability_tree, presence.answers)
            result.trace.extend(prob.trace)
            result.warnings.extend(prob.warnings)
            if prob.label == "stable":
                probability = "stable"
            elif prob.label:
                probability = int(prob.label)

        locations: list[str] = []
        severity: str | None = None
        if presence.label in ("present", "uncertain"):
            if "location" in tasks:
                locations, trace, warnings = run_location(ctx)
                result.trace.extend(trace)
                result.warnings.extend(warnings)
            if "severity" in tasks:
                severity, trace, warnings = run_severity(ctx)
                result.trace.extend(trace)
                result.warnings.extend(warnings)

        result.records.append(AnnotationRecord(
            report_id=report.id,
            abnormality=spec.name,
            presence=presence.label if "presence" in tasks else None,
            probability=probability,
            severity=severity,
            locations=tuple(locations),
        ))
    return result
