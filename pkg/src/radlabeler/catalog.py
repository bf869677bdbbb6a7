"""Catalog configuration: which abnormalities to annotate and how.

A catalog is a single JSON document that bundles everything the annotation
pipeline needs to know about one report type:

* ``abnormalities``: the labels to extract, each with the exact denomination
  text inserted into prompts.  Presence prompts and the
  probability/location/severity prompts may use different denominations.
* ``merge_groups``: post-hoc label merges (e.g. an umbrella label combining
  several finer ones).  ``primary_members`` marks the members whose explicit
  negative statements outrank missing mentions when merging.
* ``trees``: declarative yes/no decision trees.  Node transitions either name
  another node, or a terminal of the form ``label:<presence label>`` /
  ``ask:<prompt id>``.  The ``presence`` tree ends in presence labels; the
  ``probability`` tree ends in ``label:stable`` or a probability prompt id.
* ``keyword_rulesets``: location keyword tables, keyed by rule set name.
  Each rule set carries per-abnormality keyword lists, per-keyword trigger
  word replacements, and negation/prevention tables used when deriving
  negative keywords from positive ones.

Catalogs shipped with the package (``cxr``, ``cxr_generic``, ``ct``, ``mri``,
``pet``) are loaded by name; anything else is treated as a file path.
Catalog objects are treated as immutable after loading.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

PRESENCE_LABELS = ("present", "absent", "not mentioned", "uncertain", "stable")
MODALITIES = ("cxr", "ct", "mri", "pet")

LABEL_TERMINAL = "label:"
ASK_TERMINAL = "ask:"


class CatalogError(ValueError):
    """Raised when a catalog file violates the schema or an invariant."""


@dataclass(frozen=True)
class AbnormalitySpec:
    """One abnormality entry.

    ``denomination_presence`` is substituted into the presence prompts;
    ``denomination_pls`` into the probability, location and severity prompts.
    ``stable_normal_variant`` selects the prompt wording that drops
    "specifically" in the stability and normality questions.
    ``always_might_be_present`` forces the might-be-present check to "Yes"
    without consulting the backend.
    """

    name: str
    denomination_presence: str
    denomination_pls: str
    stable_normal_variant: bool = False
    always_might_be_present: bool = False

    def __post_init__(self) -> None:
        if not self.name:
            raise CatalogError("abnormality name must be non-empty")
        if not self.denomination_presence or not self.denomination_pls:
            raise CatalogError(
                f"abnormality {self.name!r}: denominations must be non-empty")


@dataclass(frozen=True)
class MergeGroup:
    """A merged label built from several member labels.

    The merged row replaces the ``target`` row; members listed in
    ``primary_members`` are the ones whose "absent" verdicts outrank a
    missing mention when presences are combined.
    """

    target: str
    members: tuple[str, ...]
    primary_members: frozenset[str]

    def __post_init__(self) -> None:
        if self.target not in self.members:
            raise CatalogError(
                f"merge group {self.target!r}: target must be listed as a member")
        if not self.primary_members <= set(self.members):
            raise CatalogError(
                f"merge group {self.target!r}: primary members must be members")
        if len(set(self.members)) != len(self.members):
            raise CatalogError(
                f"merge group {self.target!r}: duplicate members")


@dataclass(frozen=True)
class KeywordRuleSet:
    """Location keyword tables for one usage (training or evaluation).

    ``keywords`` maps abnormality name to its ordered keyword list.
    ``replacements`` maps keyword to extra trigger words that also mark it
    positive.  ``negation`` maps a positive keyword to keywords it marks
    negative; ``prevention`` maps a positive keyword to keywords it shields
    from negation.
    """

    name: str
    keywords: dict[str, tuple[str, ...]]
    replacements: dict[str, tuple[str, ...]]
    prevention: dict[str, frozenset[str]]
    negation: dict[str, frozenset[str]]

    def keyword_universe(self) -> frozenset[str]:
        return frozenset(k for kws in self.keywords.values() for k in kws)

    def keywords_for(self, abnormality: str) -> tuple[str, ...]:
        try:
            return self.keywords[abnormality]
        except KeyError:
            raise CatalogError(
                f"rule set {self.name!r} has no keywords for {abnormality!r}") from None

    def validate(self) -> None:
        universe = self.keyword_universe()
        for table_name, table in (("replacements", self.replacements),
                                  ("prevention", self.prevention),
                                  ("negation", self.negation)):
            for key in table:
                if key not in universe:
                    raise CatalogError(
                        f"rule set {self.name!r}: {table_name} key {key!r} is not a "
                        f"keyword of any abnormality")
        for key, values in self.prevention.items():
            if key in values:
                raise CatalogError(
                    f"rule set {self.name!r}: {key!r} appears in its own prevention list")
            self._check_values("prevention", key, values, universe)
        for key, values in self.negation.items():
            if key in values:
                raise CatalogError(f"rule set {self.name!r}: {key!r} negates itself")
            self._check_values("negation", key, values, universe)

    def _check_values(self, table_name: str, key: str, values: frozenset[str],
                      universe: frozenset[str]) -> None:
        for value in values:
            if value not in universe:
                raise CatalogError(
                    f"rule set {self.name!r}: {table_name}[{key!r}] references "
                    f"{value!r}, which is not a keyword of any abnormality")


@dataclass(frozen=True)
class TreeNode:
    prompt_id: int
    on_yes: str
    on_no: str


@dataclass(frozen=True)
class DecisionTree:
    """A yes/no decision tree over prompt templates."""

    entry: str
    nodes: dict[str, TreeNode]

    def transitions(self, node_id: str) -> tuple[str, str]:
        node = self.nodes[node_id]
        return node.on_yes, node.on_no


def is_terminal(target: str) -> bool:
    return target.startswith(LABEL_TERMINAL) or target.startswith(ASK_TERMINAL)


def terminal_label(target: str) -> str | None:
    """Presence label of a ``label:`` terminal, or None."""
    if target.startswith(LABEL_TERMINAL):
        return target[len(LABEL_TERMINAL):]
    return None


def terminal_prompt(target: str) -> int | None:
    """Prompt id of an ``ask:`` terminal, or None."""
    if target.startswith(ASK_TERMINAL):
        return int(target[len(ASK_TERMINAL):])
    return None


def validate_tree(tree: DecisionTree, prompt_ids: set[int],
                  kind: str = "presence") -> list[str]:
    """Check a tree for structural problems.

    Returns a list of human-readable violations (empty when the tree is
    valid): dangling transitions, cycles, unreachable nodes, unknown prompt
    ids, bad terminals, and, for presence trees, missing terminal coverage of
    the five presence labels.
    """
    violations: list[str] = []
    if tree.entry not in tree.nodes:
        violations.append(f"entry node {tree.entry!r} is not defined")
        return violations

    labels_seen: set[str] = set()
    for node_id, node in tree.nodes.items():
        if node.prompt_id not in prompt_ids:
            violations.append(f"node {node_id!r} uses unknown prompt id {node.prompt_id}")
        for target in (node.on_yes, node.on_no):
            if is_terminal(target):
                label = terminal_label(target)
                if label is not None:
                    if label not in PRESENCE_LABELS:
                        violations.append(
                            f"node {node_id!r} ends in unknown label {label!r}")
                    labels_seen.add(label)
                else:
                    try:
                        prompt = terminal_prompt(target)
                    except ValueError:
                        prompt = None
                    if prompt is None or prompt not in prompt_ids:
                        violations.append(
                            f"node {node_id!r} ends in unknown prompt terminal {target!r}")
            elif target not in tree.nodes:
                violations.append(f"node {node_id!r} has dangling transition {target!r}")

    # Reachability and cycle detection over the node graph.
    reached: set[str] = set()
    path: list[str] = []

    def visit(node_id: str) -> None:
        if node_id in path:
            violations.append(
                "cycle detected: " + " -> ".join(path[path.index(node_id):] + [node_id]))
            return
        if node_id in reached:
            return
        reached.add(node_id)
        path.append(node_id)
        for target in tree.transitions(node_id):
            if not is_terminal(target) and target in tree.nodes:
                visit(target)
        path.pop()

    visit(tree.entry)
    for node_id in tree.nodes:
        if node_id not in reached:
            violations.append(f"node {node_id!r} is unreachable from the entry")

    if kind == "presence":
        missing = set(PRESENCE_LABELS) - labels_seen
        if missing:
            violations.append(
                "presence tree lacks terminals for: " + ", ".join(sorted(missing)))
    return violations


@dataclass(frozen=True)
class Catalog:
    name: str
    modality: str
    abnormalities: tuple[AbnormalitySpec, ...]
    merge_groups: tuple[MergeGroup, ...] = ()
    trees: dict[str, DecisionTree] = field(default_factory=dict)
    keyword_rulesets: dict[str, KeywordRuleSet] = field(default_factory=dict)

    def names(self) -> tuple[str, ...]:
        return tuple(spec.name for spec in self.abnormalities)

    def spec(self, name: str) -> AbnormalitySpec:
        for spec in self.abnormalities:
            if spec.name == name:
                return spec
        raise CatalogError(f"catalog {self.name!r} has no abnormality {name!r}")

    def ruleset(self, name: str) -> KeywordRuleSet:
        try:
            return self.keyword_rulesets[name]
        except KeyError:
            raise CatalogError(
                f"catalog {self.name!r} has no keyword rule set {name!r}; "
                f"available: {sorted(self.keyword_rulesets)}") from None


SHIPPED_CATALOGS = ("cxr", "cxr_generic", "ct", "mri", "pet")


def _ruleset_from_dict(name: str, raw: dict) -> KeywordRuleSet:
    ruleset = KeywordRuleSet(
        name=name,
        keywords={abn: tuple(kws) for abn, kws in raw.get("keywords", {}).items()},
        replacements={k: tuple(v) for k, v in raw.get("replacements", {}).items()},
        prevention={k: frozenset(v) for k, v in raw.get("prevention", {}).items()},
        negation={k: frozenset(v) for k, v in raw.get("negation", {}).items()},
    )
    ruleset.validate()
    return ruleset


def _tree_from_dict(raw: dict) -> DecisionTree:
    nodes = {
        node_id: TreeNode(prompt_id=int(node["prompt_id"]),
                          on_yes=str(node["on_yes"]), on_no=str(node["on_no"]))
        for node_id, node in raw["nodes"].items()
    }
    return DecisionTree(entry=str(raw["entry"]), nodes=nodes)


def catalog_from_dict(raw: dict, prompt_ids: set[int] | None = None) -> Catalog:
    """Build and validate a Catalog from parsed JSON."""
    if prompt_ids is None:
        # Imported lazily to keep catalog loading independent of the engine.
        from .prompt_engine import PROMPT_IDS
        prompt_ids = set(PROMPT_IDS)
    try:
        abnormalities = tuple(
            AbnormalitySpec(
                name=entry["name"],
                denomination_presence=entry["denomination_presence"],
                denomination_pls=entry["denomination_pls"],
                stable_normal_variant=bool(entry.get("stable_normal_variant", False)),
                always_might_be_present=bool(entry.get("always_might_be_present", False)),
            )
            for entry in raw["abnormalities"]
        )
        merge_groups = tuple(
            MergeGroup(target=entry["target"], members=tuple(entry["members"]),
                       primary_members=frozenset(entry["primary_members"]))
            for entry in raw.get("merge_groups", [])
        )
        trees = {name: _tree_from_dict(t) for name, t in raw.get("trees", {}).items()}
        rulesets = {name: _ruleset_from_dict(name, r)
                    for name, r in raw.get("keyword_rulesets", {}).items()}
        catalog = Catalog(
            name=raw["name"], modality=raw["modality"],
            abnormalities=abnormalities, merge_groups=merge_groups,
            trees=trees, keyword_rulesets=rulesets,
        )
    except KeyError as exc:
        raise CatalogError(f"catalog is missing required field {exc}") from None

    if catalog.modality not in MODALITIES:
        raise CatalogError(f"unknown modality {catalog.modality!r}; "
                           f"expected one of {MODALITIES}")
    names = catalog.names()
    if len(set(names)) != len(names):
        raise CatalogError("duplicate abnormality names in catalog")
    for group in catalog.merge_groups:
        for member in group.members:
            if member not in names:
                raise CatalogError(
                    f"merge group {group.target!r}: member {member!r} is not a "
                    f"catalog abnormality")
    for tree_name, tree in catalog.trees.items():
        kind = "presence" if tree_name == "presence" else "other"
        violations = validate_tree(tree, prompt_ids, kind=kind)
        if violations:
            raise CatalogError(
                f"tree {tree_name!r} is invalid: " + "; ".join(violations))
    return catalog


def catalog_to_dict(catalog: Catalog) -> dict:
    """Serialize a Catalog back to the JSON document structure."""
    return {
        "name": catalog.name,
        "modality": catalog.modality,
        "abnormalities": [
            {
                "name": spec.name,
                "denomination_presence": spec.denomination_presence,
                "denomination_pls": spec.denomination_pls,
                "stable_normal_variant": spec.stable_normal_variant,
                "always_might_be_present": spec.always_might_be_present,
            }
            for spec in catalog.abnormalities
        ],
        "merge_groups": [
            {
                "target": group.target,
                "members": list(group.members),
                "primary_members": sorted(group.primary_members),
            }
            for group in catalog.merge_groups
        ],
        "trees": {
            name: {
                "entry": tree.entry,
                "nodes": {
                    node_id: {"prompt_id": node.prompt_id,
                              "on_yes": node.on_yes, "on_no": node.on_no}
                    for node_id, node in tree.nodes.items()
                },
            }
            for name, tree in catalog.trees.items()
        },
        "keyword_rulesets": {
            name: {
                "keywords": {abn: list(kws) for abn, kws in ruleset.keywords.items()},
                "replacements": {k: list(v) for k, v in ruleset.replacements.items()},
                "prevention": {k: sorted(v) for k, v in ruleset.prevention.items()},
                "negation": {k: sorted(v) for k, v in ruleset.negation.items()},
            }
            for name, ruleset in catalog.keyword_rulesets.items()
        },
    }


def load_catalog(name_or_path: str) -> Catalog:
    """Load a shipped catalog by name, or any catalog from a JSON file path."""
    if name_or_path in SHIPPED_CATALOGS:
        text = resources.files("radlabeler.data").joinpath(
            f"{name_or_path}.json").read_text(encoding="utf-8")
    else:
        try:
            with open(name_or_path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise CatalogError(f"cannot read catalog {name_or_path!r}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CatalogError(f"catalog {name_or_path!r} is not valid JSON: {exc}") from exc
    return catalog_from_dict(raw)
