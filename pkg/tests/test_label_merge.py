import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from radlabeler.catalog import MergeGroup
from radlabeler.label_merge import (MergeInput, apply_merge_groups,
                                    merge_locations, merge_presence,
                                    merge_probability, merge_records,
                                    merge_severity)
from radlabeler.report_io import AnnotationRecord

PRESENCES = ("present", "uncertain", "stable", "absent", "not mentioned")


def oracle_presence(inputs):
    """Priority list written out longhand, independent of the ranking trick."""
    verdicts = {i.presence for i in inputs}
    if "present" in verdicts:
        return "present"
    if "uncertain" in verdicts:
        return "uncertain"
    if "stable" in verdicts:
        return "stable"
    if any(i.presence == "absent" and i.primary for i in inputs):
        return "absent"
    if "not mentioned" in verdicts:
        return "not mentioned"
    return "absent"


def oracle_probability(values):
    best = None
    best_rank = -1.0
    for value in values:
        rank = 50.5 if value == "stable" else float(value)
        if rank > best_rank:
            best, best_rank = value, rank
    return best


# -- worked examples -----------------------------------------------------------

def test_present_beats_everything():
    inputs = [MergeInput("absent", True), MergeInput("present", False),
              MergeInput("stable", False)]
    assert merge_presence(inputs) == "present"


def test_primary_absent_beats_not_mentioned():
    inputs = [MergeInput("not mentioned", False), MergeInput("absent", True)]
    assert merge_presence(inputs) == "absent"


def test_secondary_absent_loses_to_not_mentioned():
    inputs = [MergeInput("not mentioned", False), MergeInput("absent", False)]
    assert merge_presence(inputs) == "not mentioned"


def test_all_secondary_absent_stays_absent():
    assert merge_presence([MergeInput("absent", False)] * 3) == "absent"


def test_stable_beats_absent_and_not_mentioned():
    inputs = [MergeInput("absent", True), MergeInput("stable", False),
              MergeInput("not mentioned", False)]
    assert merge_presence(inputs) == "stable"


def test_invalid_presence_rejected():
    with pytest.raises(ValueError):
        merge_presence([MergeInput("perhaps", False)])
    with pytest.raises(ValueError):
        merge_presence([])


def test_probability_highest_percent_wins():
    assert merge_probability([10, 85, 40]) == 85


def test_probability_stable_beats_fifty():
    assert merge_probability([50, "stable"]) == "stable"
    assert merge_probability(["stable", 50]) == "stable"


def test_probability_fifty_one_beats_stable():
    assert merge_probability(["stable", 51]) == 51


def test_probability_zero_still_beats_nothing_else():
    assert merge_probability([0]) == 0


def test_probability_invalid_values_rejected():
    with pytest.raises(ValueError):
        merge_probability([101])
    with pytest.raises(ValueError):
        merge_probability(["likely"])
    with pytest.raises(ValueError):
        merge_probability([])


def test_severity_ladder():
    assert merge_severity(["mild", "severe", None]) == "severe"
    assert merge_severity([None, "mild"]) == "mild"
    assert merge_severity([None, None]) is None
    assert merge_severity(["moderate", "mild"]) == "moderate"


def test_severity_invalid_rejected():
    with pytest.raises(ValueError):
        merge_severity(["grave"])
    with pytest.raises(ValueError):
        merge_severity([])


def test_locations_concatenate_and_dedup():
    merged = merge_locations([("right", "Lower"), ("LEFT", "right"),
                              ("lower",)])
    assert merged == ("right", "Lower", "LEFT")


def test_locations_empty():
    assert merge_locations([]) == ()
    assert merge_locations([(), ()]) == ()


# -- exhaustive small-multiset oracles ------------------------------------------

def all_presence_inputs():
    return [MergeInput(p, primary) for p in PRESENCES
            for primary in (False, True)]


def test_presence_oracle_all_multisets_up_to_three():
    pool = all_presence_inputs()
    checked = 0
    for size in (1, 2, 3):
        for combo in itertools.combinations_with_replacement(pool, size):
            inputs = list(combo)
            assert merge_presence(inputs) == oracle_presence(inputs)
            checked += 1
    assert checked == len(pool) + 55 + 220


def test_presence_permutation_invariance_exhaustive():
    pool = all_presence_inputs()
    for combo in itertools.combinations_with_replacement(pool, 3):
        results = {merge_presence(list(p)) for p in itertools.permutations(combo)}
        assert len(results) == 1


def test_probability_oracle_all_multisets_up_to_three():
    pool = [0, 1, 49, 50, 51, 99, 100, "stable"]
    for size in (1, 2, 3):
        for combo in itertools.combinations_with_replacement(pool, size):
            values = list(combo)
            assert merge_probability(values) == oracle_probability(values)


@given(st.lists(st.one_of(st.integers(0, 100), st.just("stable")),
                min_size=1, max_size=6))
def test_probability_permutation_and_idempotence(values):
    merged = merge_probability(values)
    assert merge_probability(list(reversed(values))) == merged
    assert merge_probability([merged]) == merged
    assert merge_probability(values + [merged]) == merged


@given(st.lists(st.tuples(st.sampled_from(PRESENCES), st.booleans()),
                min_size=1, max_size=6))
def test_presence_idempotence(raw):
    inputs = [MergeInput(p, primary) for p, primary in raw]
    merged = merge_presence(inputs)
    # Feeding the result back (as a primary member) cannot change it.
    assert merge_presence(inputs + [MergeInput(merged, True)]) == merged


@given(st.lists(st.sampled_from([None, "mild", "moderate", "severe"]),
                min_size=1, max_size=5))
def test_severity_order_free_and_idempotent(values):
    merged = merge_severity(values)
    assert merge_severity(list(reversed(values))) == merged
    assert merge_severity([merged, merged]) == merged


# -- record-level merging --------------------------------------------------------

def rec(abnormality, presence, probability=None, severity=None, locations=()):
    return AnnotationRecord(report_id="r1", abnormality=abnormality,
                            presence=presence, probability=probability,
                            severity=severity, locations=tuple(locations))


def test_merge_records_combines_every_field():
    members = [
        (rec("A", "present", probability=40, severity="mild",
             locations=("right",)), True),
        (rec("B", "uncertain", probability=80, severity="severe",
             locations=("left", "Right")), False),
    ]
    merged = merge_records(members, "Umbrella")
    assert merged.abnormality == "Umbrella"
    assert merged.report_id == "r1"
    assert merged.presence == "present"
    assert merged.probability == 80
    assert merged.severity == "severe"
    assert merged.locations == ("right", "left")


@pytest.mark.parametrize("presences,expected", [
    (["absent", "absent"], "absent"),
    (["not mentioned", "not mentioned"], "not mentioned"),
    (["stable", "not mentioned"], "stable"),
])
def test_merge_records_drops_fields_for_negative_presence(presences, expected):
    members = [(rec(name, p, severity=None, locations=()), True)
               for name, p in zip("AB", presences)]
    # Severity/locations sneak in via a member whose own presence allowed them.
    members.append((rec("C", presences[0], severity=None, locations=()), False))
    merged = merge_records(members, "U")
    assert merged.presence == expected
    assert merged.severity is None
    assert merged.locations == ()


def test_merge_records_keeps_probability_for_negative_presence():
    members = [(rec("A", "absent", probability=10), True),
               (rec("B", "not mentioned", probability=5), False)]
    merged = merge_records(members, "U")
    assert merged.presence == "absent"
    assert merged.probability == 10


def test_merge_records_ignores_missing_optionals():
    members = [(rec("A", "present"), True),
               (rec("B", "uncertain", probability=30), False)]
    merged = merge_records(members, "U")
    assert merged.probability == 30
    assert merged.severity is None


def test_merge_records_mixed_reports_rejected():
    a = rec("A", "present")
    b = AnnotationRecord(report_id="r2", abnormality="B", presence="absent")
    with pytest.raises(ValueError, match="r1"):
        merge_records([(a, True), (b, False)], "U")


def test_merge_records_empty_rejected():
    with pytest.raises(ValueError, match="U"):
        merge_records([], "U")


# -- applying catalog merge groups ------------------------------------------------

GROUP_AB = MergeGroup(target="A", members=("A", "B"),
                      primary_members=frozenset({"A"}))


def test_apply_merge_groups_replaces_target_in_place():
    records = [rec("A", "not mentioned"), rec("B", "present"),
               rec("C", "absent")]
    out = apply_merge_groups(records, (GROUP_AB,))
    assert [r.abnormality for r in out] == ["A", "B", "C"]
    assert out[0].presence == "present"
    assert out[1].presence == "present"
    assert out[2].presence == "absent"


def test_apply_merge_groups_appends_missing_target_row():
    group = MergeGroup(target="A", members=("A", "B", "C"),
                       primary_members=frozenset({"A", "B"}))
    records = [rec("B", "absent"), rec("C", "not mentioned")]
    out = apply_merge_groups(records, (group,))
    assert [r.abnormality for r in out] == ["B", "C", "A"]
    assert out[2].presence == "absent"


def test_apply_merge_groups_reads_original_rows_not_other_merges():
    # B's merged value would be "present"; A's group must still see the
    # original "absent" B row, so group order cannot matter.
    group_b = MergeGroup(target="B", members=("B", "C"),
                         primary_members=frozenset({"B"}))
    records = [rec("A", "not mentioned"), rec("B", "absent"),
               rec("C", "present")]
    for groups in ((GROUP_AB, group_b), (group_b, GROUP_AB)):
        out = apply_merge_groups(records, groups)
        by_name = {r.abnormality: r for r in out}
        assert by_name["B"].presence == "present"
        assert by_name["A"].presence == "not mentioned"


def test_apply_merge_groups_handles_multiple_reports():
    records = [rec("A", "not mentioned"), rec("B", "present")]
    r2 = [AnnotationRecord(report_id="r2", abnormality="A", presence="absent"),
          AnnotationRecord(report_id="r2", abnormality="B",
                           presence="not mentioned")]
    out = apply_merge_groups(records + r2, (GROUP_AB,))
    by_key = {(r.report_id, r.abnormality): r for r in out}
    assert by_key[("r1", "A")].presence == "present"
    assert by_key[("r2", "A")].presence == "absent"
    assert len(out) == 4


def test_apply_merge_groups_skips_group_with_no_member_rows():
    group = MergeGroup(target="X", members=("X", "Y"),
                       primary_members=frozenset({"X"}))
    records = [rec("A", "present")]
    out = apply_merge_groups(records, (group,))
    assert out == records


def test_apply_merge_groups_partial_membership():
    records = [rec("B", "uncertain")]
    out = apply_merge_groups(records, (GROUP_AB,))
    assert [r.abnormality for r in out] == ["B", "A"]
    assert out[1].presence == "uncertain"


def test_apply_merge_groups_cxr_catalog_shape(cxr_catalog, sample_report):
    presences = itertools.cycle(["present", "absent", "not mentioned",
                                 "uncertain", "stable"])
    records = [AnnotationRecord(report_id="r9", abnormality=spec.name,
                                presence=next(presences))
               for spec in cxr_catalog.abnormalities]
    out = apply_merge_groups(records, cxr_catalog.merge_groups)
    assert [r.abnormality for r in out] == [r.abnormality for r in records]
    by_name = {r.abnormality: r for r in records}
    for group in cxr_catalog.merge_groups:
        merged = next(r for r in out if r.abnormality == group.target)
        members = [(by_name[m], m in group.primary_members)
                   for m in group.members]
        assert merged == merge_records(members, group.target)
