import hashlib
import os

import pytest

from radlabeler.catalog import catalog_from_dict
from radlabeler.llm_client import BackendError, LlmClient, MockBackend
from radlabeler.prompt_engine import (MAX_NEW_TOKENS, SYSTEM_PROMPT,
                                      annotate_report, parse_category,
                                      parse_expression_list, parse_percentage,
                                      parse_severity, parse_yes_no,
                                      render_prompt)
from radlabeler.report_io import Report

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "golden", "prompts")
REPORT_TEXT = ("Heart size is enlarged. Small right pleural effusion. "
               "No pneumothorax.")


def golden(name):
    with open(os.path.join(GOLDEN_DIR, name), encoding="utf-8") as fh:
        return fh.read()


# -- prompt fidelity against the hand-written goldens -------------------------

def test_system_prompt_matches_golden():
    assert SYSTEM_PROMPT == golden("system.txt")


CXR_CASES = [
    ("p01_pleural_effusion_cxr.txt", 1, "Pleural effusion", None),
    ("p01_support_devices_cxr.txt", 1, "Support devices", None),
    ("p02_pleural_effusion_cxr.txt", 2, "Pleural effusion", None),
    ("p02_cardiomegaly_cxr.txt", 2, "Cardiomegaly", None),
    ("p03_edema_cxr.txt", 3, "Edema", None),
    ("p04_pleural_effusion_cxr.txt", 4, "Pleural effusion", None),
    ("p04_support_devices_cxr.txt", 4, "Support devices", None),
    ("p05_edema_cxr.txt", 5, "Edema", None),
    ("p06_pleural_effusion_cxr.txt", 6, "Pleural effusion", None),
    ("p06_enlarged_cardiomediastinum_cxr.txt", 6,
     "Enlarged cardiomediastinum", None),
    ("p07_edema_cxr.txt", 7, "Edema", None),
    ("p08_pleural_effusion_cxr.txt", 8, "Pleural effusion", None),
    ("p09_pleural_effusion_cxr.txt", 9, "Pleural effusion", None),
    ("p09_pleural_other_cxr.txt", 9, "Pleural other", None),
    ("p10_pleural_effusion_cxr.txt", 10, "Pleural effusion", None),
    ("p11_pleural_effusion_right_cxr.txt", 11, "Pleural effusion", "right"),
    ("p12_edema_cxr.txt", 12, "Edema", None),
    ("p13_edema_cxr.txt", 13, "Edema", None),
    ("p13_support_devices_cxr.txt", 13, "Support devices", None),
]


@pytest.mark.parametrize("filename,prompt_id,abnormality,expression", CXR_CASES)
def test_cxr_prompts_match_goldens(cxr_catalog, filename, prompt_id,
                                   abnormality, expression):
    rendered = render_prompt(prompt_id, REPORT_TEXT,
                             cxr_catalog.spec(abnormality),
                             expression=expression)
    assert rendered == golden(filename)


MODALITY_CASES = [
    ("p01_liver_lesion_ct.txt", 1, "ct", "Liver lesion"),
    ("p03_liver_lesion_ct.txt", 3, "ct", "Liver lesion"),
    ("p10_liver_lesion_ct.txt", 10, "ct", "Liver lesion"),
]


@pytest.mark.parametrize("filename,prompt_id,modality,abnormality",
                         MODALITY_CASES)
def test_modality_prompts_match_goldens(ct_catalog, filename, prompt_id,
                                        modality, abnormality):
    rendered = render_prompt(prompt_id, REPORT_TEXT,
                             ct_catalog.spec(abnormality), modality=modality)
    assert rendered == golden(filename)


def test_mri_prompt_matches_golden():
    from radlabeler import load_catalog
    mri = load_catalog("mri")
    rendered = render_prompt(5, REPORT_TEXT, mri.spec("Kidney lesion"),
                             modality="mri")
    assert rendered == golden("p05_kidney_lesion_mri.txt")


def test_prompt_10_keeps_bare_report_phrase_for_ct(ct_catalog):
    rendered = render_prompt(10, REPORT_TEXT, ct_catalog.spec("Liver lesion"),
                             modality="ct")
    assert rendered.startswith("Given the report ")
    assert " ct " not in rendered


def test_report_text_substituted_verbatim(cxr_catalog):
    tricky = 'She said "<label> is <expression>" twice.'
    rendered = render_prompt(1, tricky, cxr_catalog.spec("Edema"))
    assert tricky in rendered


def test_unknown_template_id(cxr_catalog):
    with pytest.raises(ValueError):
        render_prompt(14, REPORT_TEXT, cxr_catalog.spec("Edema"))


# -- answer parsers ------------------------------------------------------------

@pytest.mark.parametrize("text,expected", [
    ("Yes", "yes"),
    ("no.", "no"),
    ("Possibly", None),
    (" YES, clearly", "yes"),
    ("The answer is No", "no"),
    ("yesterday", None),
    ("no, yes", "no"),
    ("", None),
])
def test_parse_yes_no(text, expected):
    assert parse_yes_no(text) == expected


@pytest.mark.parametrize("text,expected", [
    ("85% likely.", 85),
    ("probability 100%.", 100),
    ("likely", None),
    ("0% likely.", 0),
    ("150% likely.", None),
    ("about 40 percent", None),
    ("12%30%", 12),
    ("", None),
])
def test_parse_percentage(text, expected):
    assert parse_percentage(text) == expected


@pytest.mark.parametrize("text,expected", [
    ("1", 1),
    ("(3) Severity", 3),
    ("none", None),
    ("answer: 7", 7),
    ("9", None),
    ("", None),
])
def test_parse_category(text, expected):
    assert parse_category(text) == expected


@pytest.mark.parametrize("text,expected", [
    ("Severe", "severe"),
    ("mild.", "mild"),
    ("unknown", None),
    ("Moderate to severe", "moderate"),
    ("Undefined", "undefined"),
    ("mildly", None),
])
def test_parse_severity(text, expected):
    assert parse_severity(text) == expected


@pytest.mark.parametrize("text,expected,warning", [
    ('"right", "lower"] extra', ["right", "lower"], False),
    ("]", [], False),
    ('"in the left lung"]', ["in the left lung"], False),
    ('"Right", "LOWER"]', ["right", "lower"], False),
    ('"right", "incomplete', ["right", "incomplete"], True),
    ("right, left]", ["right", "left"], True),
    ('""]', [], False),
    ('"a"] "b"', ["a"], False),
])
def test_parse_expression_list(text, expected, warning):
    got, got_warning = parse_expression_list(text)
    assert got == expected
    assert got_warning is warning


# -- decision tree execution ---------------------------------------------------

def one_abn_catalog(**flags):
    from conftest import DEFAULT_TREES
    return catalog_from_dict({
        "name": "solo",
        "modality": "cxr",
        "abnormalities": [{
            "name": "Alpha",
            "denomination_presence": "alpha finding",
            "denomination_pls": "alpha finding (any kind)",
            "stable_normal_variant": flags.get("stable_normal_variant", False),
            "always_might_be_present": flags.get("always_might_be_present", False),
        }],
        "merge_groups": [],
        "trees": DEFAULT_TREES,
        "keyword_rulesets": {},
    })


class RecordingBackend:
    """Wraps a MockBackend, remembering every request it served."""

    model = "mock"

    def __init__(self, answers, default=None):
        prepared = {}
        for (prompt_id, expression), value in answers.items():
            key = ("r1", prompt_id, "Alpha", expression)
            prepared[key] = [value] if isinstance(value, str) else list(value)
        self.inner = MockBackend(prepared, default=default)
        self.requests = []

    def complete(self, request, meta=None):
        self.requests.append((meta.prompt_id, meta.expression,
                              request.max_new_tokens, request.system_prompt))
        return self.inner.complete(request, meta)

    def prompts_asked(self):
        return [prompt_id for prompt_id, _, _, _ in self.requests]


REPORT = Report(id="r1", sections={"findings": "Alpha findings text."})


def run(answers, tasks=("presence",), default=None, **flags):
    backend = RecordingBackend(answers, default=default)
    catalog = one_abn_catalog(**flags)
    result = annotate_report(REPORT, catalog, LlmClient(backend), tasks=tasks)
    assert len(result.records) == 1
    return result.records[0], result, backend


PRESENCE_WALKS = [
    ({(1, None): "Yes", (2, None): "Yes"}, "stable", [1, 2]),
    ({(1, None): "Yes", (2, None): "No", (4, None): "Yes"}, "present",
     [1, 2, 4]),
    ({(1, None): "Yes", (2, None): "No", (4, None): "No"}, "uncertain",
     [1, 2, 4]),
    ({(1, None): "No", (6, None): "Yes"}, "absent", [1, 6]),
    ({(1, None): "No", (6, None): "No", (8, None): "Yes"}, "absent",
     [1, 6, 8]),
    ({(1, None): "No", (6, None): "No", (8, None): "No"}, "not mentioned",
     [1, 6, 8]),
]


@pytest.mark.parametrize("answers,expected,asked", PRESENCE_WALKS)
def test_presence_walks(answers, expected, asked):
    record, result, backend = run(answers)
    assert record.presence == expected
    assert backend.prompts_asked() == asked
    assert len(asked) <= 4
    assert record.probability is None
    assert record.severity is None
    assert record.locations == ()


def test_presence_trace_is_complete():
    record, result, backend = run(
        {(1, None): "Yes", (2, None): "No", (4, None): "Yes"})
    assert [e.prompt_id for e in result.trace] == [1, 2, 4]
    assert [e.parsed for e in result.trace] == ["yes", "no", "yes"]
    for entry in result.trace:
        assert len(entry.prompt_sha256) == 64
        assert entry.report_id == "r1"
        assert entry.abnormality == "Alpha"


def test_every_call_carries_the_system_prompt():
    record, result, backend = run(
        {(1, None): "Yes", (2, None): "No", (4, None): "Yes"})
    assert all(sp == SYSTEM_PROMPT for _, _, _, sp in backend.requests)


def test_unparseable_yes_no_takes_no_branch():
    record, result, backend = run(
        {(1, None): "hard to say", (6, None): "Yes"})
    assert record.presence == "absent"
    assert result.warnings.count("unparseable_yes_no") == 1
    warned = [e for e in result.trace if e.warning == "unparseable_yes_no"]
    assert [e.prompt_id for e in warned] == [1]
    assert warned[0].parsed == "no"


def test_forced_yes_skips_backend_call():
    record, result, backend = run(
        {(1, None): "Yes", (2, None): "No"}, always_might_be_present=True)
    assert record.presence == "present"
    assert backend.prompts_asked() == [1, 2]
    forced = [e for e in result.trace if e.forced]
    assert len(forced) == 1
    assert forced[0].prompt_id == 4
    assert forced[0].parsed == "yes"
    assert forced[0].raw_answer == "Yes"


PROBABILITY_WALKS = [
    ({(1, None): "Yes", (2, None): "Yes"}, "stable", [1, 2], "stable"),
    ({(1, None): "Yes", (2, None): "No", (4, None): "Yes",
      (5, None): "62% likely."}, 62, [1, 2, 4, 5], "present"),
    ({(1, None): "No", (6, None): "No", (8, None): "Yes",
      (7, None): "5% likely."}, 5, [1, 6, 8, 7], "absent"),
    ({(1, None): "No", (6, None): "Yes", (3, None): "0% likely."}, 0,
     [1, 6, 3], "absent"),
    ({(1, None): "No", (6, None): "No", (8, None): "No",
      (3, None): "15% likely."}, 15, [1, 6, 8, 3], "not mentioned"),
]


@pytest.mark.parametrize("answers,expected,asked,presence", PROBABILITY_WALKS)
def test_probability_walks_reuse_presence_answers(answers, expected, asked,
                                                  presence):
    record, result, backend = run(answers, tasks=("presence", "probability"))
    assert record.presence == presence
    assert record.probability == expected
    # Shared prefix answers must not be asked twice.
    assert backend.prompts_asked() == asked


def test_probability_retry_once_then_value():
    record, result, backend = run(
        {(1, None): "Yes", (2, None): "No", (4, None): "Yes",
         (5, None): ["eh?", "40% likely."]},
        tasks=("presence", "probability"))
    assert record.probability == 40
    assert backend.prompts_asked() == [1, 2, 4, 5, 5]
    assert result.warnings.count("unparseable_percentage") == 1


def test_probability_retry_bypasses_cache(tmp_path):
    backend = RecordingBackend(
        {(1, None): "Yes", (2, None): "No", (4, None): "Yes",
         (5, None): ["eh?", "40% likely."]})
    client = LlmClient(backend, cache_path=str(tmp_path / "cache.jsonl"))
    result = annotate_report(REPORT, one_abn_catalog(), client,
                             tasks=("presence", "probability"))
    client.close()
    assert result.records[0].probability == 40
    assert backend.prompts_asked().count(5) == 2


def test_probability_missing_after_two_failures():
    record, result, backend = run(
        {(1, None): "Yes", (2, None): "No", (4, None): "Yes",
         (5, None): ["eh?", "still no"]},
        tasks=("presence", "probability"))
    assert record.probability is None
    assert result.warnings.count("unparseable_percentage") == 2
    assert result.warnings.count("probability_missing") == 1


def test_location_gate_no():
    record, result, backend = run(
        {(1, None): "Yes", (2, None): "No", (4, None): "Yes", (9, None): "No"},
        tasks=("presence", "location"))
    assert record.locations == ()
    assert backend.prompts_asked() == [1, 2, 4, 9]


def test_location_list_and_verify():
    record, result, backend = run(
        {(1, None): "Yes", (2, None): "No", (4, None): "Yes",
         (9, None): "Yes", (10, None): '"right", "left"] and more',
         (11, "right"): "1", (11, "left"): "(7) other"},
        tasks=("presence", "location"))
    assert record.locations == ("right",)
    assert backend.prompts_asked() == [1, 2, 4, 9, 10, 11, 11]


def test_location_dedup_preserves_first_occurrence_order():
    record, result, backend = run(
        {(1, None): "Yes", (2, None): "No", (4, None): "Yes",
         (9, None): "Yes", (10, None): '"Right", "right", "LEFT"]',
         (11, "right"): "1", (11, "left"): "1"},
        tasks=("presence", "location"))
    assert record.locations == ("right", "left")
    assert backend.prompts_asked().count(11) == 2


def test_location_drops_expression_matching_abnormality_name():
    record, result, backend = run(
        {(1, None): "Yes", (2, None): "No", (4, None): "Yes",
         (9, None): "Yes", (10, None): '"Alpha", "right"]',
         (11, "right"): "1"},
        tasks=("presence", "location"))
    assert record.locations == ("right",)
    assert (11, "alpha") not in [(p, e) for p, e, _, _ in backend.requests]


def test_location_unparseable_category_drops_expression():
    record, result, backend = run(
        {(1, None): "Yes", (2, None): "No", (4, None): "Yes",
         (9, None): "Yes", (10, None): '"right"]', (11, "right"): "dunno"},
        tasks=("presence", "location"))
    assert record.locations == ()
    assert result.warnings.count("unparseable_category") == 1


def test_location_malformed_list_salvaged():
    record, result, backend = run(
        {(1, None): "Yes", (2, None): "No", (4, None): "Yes",
         (9, None): "Yes", (10, None): "right, left]",
         (11, "right"): "1", (11, "left"): "1"},
        tasks=("presence", "location"))
    assert record.locations == ("right", "left")
    assert result.warnings.count("malformed_expression_list") == 1


def test_location_skipped_unless_present_or_uncertain():
    record, result, backend = run(
        {(1, None): "No", (6, None): "Yes"},
        tasks=("presence", "location", "severity"))
    assert record.presence == "absent"
    assert record.locations == ()
    assert record.severity is None
    assert backend.prompts_asked() == [1, 6]


def test_location_runs_for_uncertain():
    record, result, backend = run(
        {(1, None): "Yes", (2, None): "No", (4, None): "No",
         (9, None): "Yes", (10, None): '"upper"]', (11, "upper"): "1"},
        tasks=("presence", "location"))
    assert record.presence == "uncertain"
    assert record.locations == ("upper",)


def test_severity_gate_no():
    record, result, backend = run(
        {(1, None): "Yes", (2, None): "No", (4, None): "Yes",
         (12, None): "No"},
        tasks=("presence", "severity"))
    assert record.severity is None
    assert backend.prompts_asked() == [1, 2, 4, 12]


@pytest.mark.parametrize("raw,expected", [
    ("Moderate", "moderate"),
    ("mild.", "mild"),
    ("Severe", "severe"),
    ("Undefined", None),
])
def test_severity_classification(raw, expected):
    record, result, backend = run(
        {(1, None): "Yes", (2, None): "No", (4, None): "Yes",
         (12, None): "Yes", (13, None): raw},
        tasks=("presence", "severity"))
    assert record.severity == expected
    assert backend.prompts_asked() == [1, 2, 4, 12, 13]


def test_severity_unparseable_warns():
    record, result, backend = run(
        {(1, None): "Yes", (2, None): "No", (4, None): "Yes",
         (12, None): "Yes", (13, None): "catastrophic"},
        tasks=("presence", "severity"))
    assert record.severity is None
    assert result.warnings.count("unparseable_severity") == 1


def test_max_new_tokens_budgets():
    record, result, backend = run(
        {(1, None): "Yes", (2, None): "No", (4, None): "Yes",
         (5, None): "70% likely.", (9, None): "Yes", (10, None): '"right"]',
         (11, "right"): "1", (12, None): "Yes", (13, None): "mild"},
        tasks=("presence", "probability", "location", "severity"))
    budgets = {prompt_id: tokens for prompt_id, _, tokens, _ in backend.requests}
    assert budgets == {1: 4, 2: 4, 4: 4, 5: 8, 9: 4, 10: 256, 11: 4, 12: 4,
                       13: 8}
    assert MAX_NEW_TOKENS[3] == 8 and MAX_NEW_TOKENS[7] == 8


def test_tasks_subset_presence_only_asks_nothing_else():
    record, result, backend = run(
        {(1, None): "Yes", (2, None): "No", (4, None): "Yes"},
        tasks=("presence",))
    assert set(backend.prompts_asked()) <= {1, 2, 4}
    assert record.probability is None and record.severity is None


def test_unknown_task_rejected(tiny_catalog):
    with pytest.raises(ValueError, match="unknown task"):
        annotate_report(REPORT, tiny_catalog, LlmClient(MockBackend({}, "No")),
                        tasks=("presence", "vibes"))


def test_catalog_without_probability_tree_rejected_for_probability():
    from conftest import DEFAULT_TREES
    doc = {
        "name": "solo", "modality": "cxr",
        "abnormalities": [{"name": "Alpha", "denomination_presence": "a",
                           "denomination_pls": "a"}],
        "trees": {"presence": DEFAULT_TREES["presence"]},
    }
    catalog = catalog_from_dict(doc)
    client = LlmClient(MockBackend({}, default="No"))
    annotate_report(REPORT, catalog, client, tasks=("presence",))
    with pytest.raises(ValueError, match="probability tree"):
        annotate_report(REPORT, catalog, client,
                        tasks=("presence", "probability"))


def test_records_follow_catalog_order(tiny_catalog):
    client = LlmClient(MockBackend({}, default="No"))
    result = annotate_report(REPORT, tiny_catalog, client, tasks=("presence",))
    assert [r.abnormality for r in result.records] == ["Alpha", "Bravo",
                                                       "Gadget"]


def test_trace_replay_reproduces_the_walk():
    answers = {
        (1, None): "Yes", (2, None): "No", (4, None): "Yes",
        (5, None): ["eh?", "40% likely."], (9, None): "Yes",
        (10, None): '"right", "left"]', (11, "right"): "1",
        (11, "left"): "(7)", (12, None): "Yes", (13, None): "mild",
    }
    tasks = ("presence", "probability", "location", "severity")
    record, result, backend = run(answers, tasks=tasks)

    # Rebuild a script from the trace alone and run it again.
    replay_answers = {}
    for entry in result.trace:
        if entry.forced:
            continue
        key = (entry.report_id, entry.prompt_id, entry.abnormality,
               entry.expression)
        replay_answers.setdefault(key, []).append(entry.raw_answer)
    replay_client = LlmClient(MockBackend(replay_answers))
    replayed = annotate_report(REPORT, one_abn_catalog(), replay_client,
                               tasks=tasks)
    assert replayed.records == [record]
    assert [e.to_dict() for e in replayed.trace] == \
        [e.to_dict() for e in result.trace]
    assert replayed.warnings == result.warnings


def test_missing_script_answer_is_loud():
    with pytest.raises(BackendError, match="prompt=6"):
        run({(1, None): "No"})
