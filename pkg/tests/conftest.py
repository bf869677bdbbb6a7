import pytest

from radlabeler import load_catalog
from radlabeler.catalog import catalog_from_dict
from radlabeler.llm_client import LlmClient, MockBackend
from radlabeler.report_io import Report

DEFAULT_TREES = {
    "presence": {
        "entry": "possible",
        "nodes": {
            "possible": {"prompt_id": 1, "on_yes": "stable_check",
                         "on_no": "normal_check"},
            "stable_check": {"prompt_id": 2, "on_yes": "label:stable",
                             "on_no": "might_check"},
            "might_check": {"prompt_id": 4, "on_yes": "label:present",
                            "on_no": "label:uncertain"},
            "normal_check": {"prompt_id": 6, "on_yes": "label:absent",
                             "on_no": "absence_check"},
            "absence_check": {"prompt_id": 8, "on_yes": "label:absent",
                              "on_no": "label:not mentioned"},
        },
    },
    "probability": {
        "entry": "possible",
        "nodes": {
            "possible": {"prompt_id": 1, "on_yes": "stable_check",
                         "on_no": "normal_check"},
            "stable_check": {"prompt_id": 2, "on_yes": "label:stable",
                             "on_no": "ask:5"},
            "normal_check": {"prompt_id": 6, "on_yes": "ask:3",
                             "on_no": "absence_check"},
            "absence_check": {"prompt_id": 8, "on_yes": "ask:7",
                              "on_no": "ask:3"},
        },
    },
}

TINY_CATALOG = {
    "name": "tiny",
    "modality": "cxr",
    "abnormalities": [
        {"name": "Alpha", "denomination_presence": "alpha finding",
         "denomination_pls": "alpha finding (any kind)",
         "stable_normal_variant": False, "always_might_be_present": False},
        {"name": "Bravo", "denomination_presence": "bravo finding",
         "denomination_pls": "bravo finding",
         "stable_normal_variant": True, "always_might_be_present": False},
        {"name": "Gadget", "denomination_presence": "gadget equipment",
         "denomination_pls": "gadget equipment",
         "stable_normal_variant": False, "always_might_be_present": True},
    ],
    "merge_groups": [
        {"target": "Alpha", "members": ["Alpha", "Bravo"],
         "primary_members": ["Alpha"]},
    ],
    "trees": DEFAULT_TREES,
    "keyword_rulesets": {
        "training": {
            "keywords": {"Alpha": ["left", "right", "upper"]},
            "replacements": {"left": ["bilateral"], "right": ["bilateral"]},
            "prevention": {},
            "negation": {"left": ["right"], "right": ["left"]},
        },
    },
}


@pytest.fixture(scope="session")
def cxr_catalog():
    return load_catalog("cxr")


@pytest.fixture(scope="session")
def ct_catalog():
    return load_catalog("ct")


@pytest.fixture()
def tiny_catalog():
    return catalog_from_dict(TINY_CATALOG)


@pytest.fixture()
def sample_report():
    return Report(id="r1", sections={
        "findings": "Heart size is enlarged. Small right pleural effusion.",
        "impression": "No pneumothorax.",
    })


def make_client(answers=None, default="No", **kwargs):
    """LlmClient over a scripted MockBackend.

    ``answers`` maps (report_id, prompt_id, abnormality, expression) to an
    answer string or a list of strings consumed one per call.
    """
    prepared = {}
    for key, value in (answers or {}).items():
        prepared[key] = [value] if isinstance(value, str) else list(value)
    return LlmClient(MockBackend(prepared, default=default), **kwargs)
