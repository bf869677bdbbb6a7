"""Structured annotation of radiology report text with LLM prompt trees.

The package extracts, for a configurable catalog of abnormalities, whether
each one is present, how likely it is, how severe it is, and where it sits
anatomically, by walking small yes/no decision trees of prompts against any
OpenAI-compatible chat backend.  It also ships the downstream tooling those
annotations feed: umbrella-label merging, location keyword training labels,
baseline format converters, and a bootstrap/permutation evaluation harness.
"""

from .catalog import (AbnormalitySpec, Catalog, CatalogError, DecisionTree,
                      KeywordRuleSet, MergeGroup, PRESENCE_LABELS, TreeNode,
                      load_catalog, validate_tree)
from .eval_stats import (MetricResult, MetricUndefined, ProbabilityInterval,
                         adapt_vqa, bootstrap_ci, mvue_weights,
                         permutation_test, reflacx_interval)
from .keyword_labels import KeywordLabels, keyword_labels
from .label_merge import apply_merge_groups, merge_records
from .llm_client import (AnswerCache, BackendError, HttpChatBackend,
                         LlmClient, LlmRequest, MockBackend, QueryMeta,
                         TransportError)
from .prompt_engine import (AnnotationResult, SYSTEM_PROMPT, TEMPLATES,
                            annotate_report, render_prompt)
from .report_io import (AnnotationRecord, Report, ReportError, load_reports,
                        prepare_prompt_text, read_annotations,
                        write_annotations)

__version__ = "0.1.0"

__all__ = [
    "AbnormalitySpec",
    "AnnotationRecord",
    "AnnotationResult",
    "AnswerCache",
    "BackendError",
    "Catalog",
    "CatalogError",
    "DecisionTree",
    "HttpChatBackend",
    "KeywordLabels",
    "KeywordRuleSet",
    "LlmClient",
    "LlmRequest",
    "MergeGroup",
    "MetricResult",
    "MetricUndefined",
    "MockBackend",
    "PRESENCE_LABELS",
    "ProbabilityInterval",
    "QueryMeta",
    "Report",
    "ReportError",
    "SYSTEM_PROMPT",
    "TEMPLATES",
    "TransportError",
    "TreeNode",
    "adapt_vqa",
    "annotate_report",
    "apply_merge_groups",
    "bootstrap_ci",
    "keyword_labels",
    "load_catalog",
    "load_reports",
    "merge_records",
    "mvue_weights",
    "permutation_test",
    "prepare_prompt_text",
    "read_annotations",
    "reflacx_interval",
    "render_prompt",
    "validate_tree",
    "write_annotations",
    "__version__",
]
