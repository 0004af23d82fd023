"""Demographic binning, stratification partitions and fold planning."""

import numpy as np
import pytest

from sleepstager.data import (
    AgeGroup,
    AhiSeverity,
    Cohort,
    Demographics,
    Gender,
    SubjectRecord,
    classify_demographics,
)
from sleepstager.stratify import (
    ALL_AXES,
    PlanError,
    StratAxis,
    SubgroupKey,
    load_plan,
    plan_phase1,
    plan_phase2,
    save_plan,
    stratify,
    subgroup_key_for,
    verify_no_leakage,
)
from sleepstager.stratify import Phase1Fold, Phase1Plan, FinetuneFold, Phase2Plan


def _demo(gender, age, ahi):
    return Demographics(Gender(gender), age, ahi)


def make_demo_cohort(cells):
    """Cohort with dummy 1-epoch signals; cells = (gender, age, ahi, count)."""
    subjects = []
    idx = 0
    for gender, age, ahi, count in cells:
        for _ in range(count):
            subjects.append(SubjectRecord(
                subject_id=f"S{idx:03d}", demographics=_demo(gender, age, ahi),
                signals=np.zeros((1, 1, 4), dtype=np.float32),
                labels=np.zeros(1, dtype=np.uint8)))
            idx += 1
    return Cohort(subjects=subjects, n_channels=1, samples_per_epoch=4)


# Age representative per bin, AHI representative per bin.
_AGES = {"u": 30, "m": 55, "o": 70}
_AHIS = {"n": 2.0, "mi": 10.0, "mo": 20.0, "s": 40.0}


# ---------------------------------------------------------------------------
# demographic classification
# ---------------------------------------------------------------------------

BOUNDARY_TABLE = [
    (49, AgeGroup.UNDER_50), (50, AgeGroup.FROM_50_TO_65),
    (65, AgeGroup.FROM_50_TO_65), (66, AgeGroup.OVER_65),
]

AHI_BOUNDARY_TABLE = [
    (4.9, AhiSeverity.NORMAL), (5.0, AhiSeverity.MILD),
    (14.9, AhiSeverity.MILD), (15.0, AhiSeverity.MODERATE),
    (29.9, AhiSeverity.MODERATE), (30.0, AhiSeverity.SEVERE),
]


@pytest.mark.parametrize("age,expected", BOUNDARY_TABLE)
def test_age_boundaries(age, expected):
    group, _ = classify_demographics(_demo("M", age, 0.0))
    assert group == expected


@pytest.mark.parametrize("ahi,expected", AHI_BOUNDARY_TABLE)
def test_ahi_boundaries(ahi, expected):
    _, severity = classify_demographics(_demo("M", 40, ahi))
    assert severity == expected


def test_classify_worked_examples():
    assert classify_demographics(_demo("M", 49, 4.9)) == (
        AgeGroup.UNDER_50, AhiSeverity.NORMAL)
    # cohort means: age 56.2, AHI 22.1 land mid-bin / Moderate
    assert classify_demographics(_demo("F", 56, 22.1)) == (
        AgeGroup.FROM_50_TO_65, AhiSeverity.MODERATE)
    assert classify_demographics(_demo("M", 65, 30.0)) == (
        AgeGroup.FROM_50_TO_65, AhiSeverity.SEVERE)


def test_classify_is_total_over_randoms():
    rng = np.random.default_rng(0)
    for _ in range(200):
        d = _demo("M" if rng.random() < 0.5 else "F",
                  int(rng.integers(0, 110)), float(rng.uniform(0, 120)))
        group, severity = classify_demographics(d)
        assert isinstance(group, AgeGroup) and isinstance(severity, AhiSeverity)


# ---------------------------------------------------------------------------
# stratification
# ---------------------------------------------------------------------------

def test_gender_axis_fixture_45_55():
    cohort = make_demo_cohort([("M", 40, 2.0, 45), ("F", 40, 2.0, 55)])
    groups = stratify(cohort, StratAxis.GENDER)
    sizes = {key.label: len(v) for key, v in groups.items()}
    assert sizes == {"Male": 45, "Female": 55}


def test_gender_x_ahi_fixture_matches_reported_counts():
    # Cell counts whose margins also reproduce the AHI severity totals
    # 26/25/24/25 and the 45/55 gender split.
    cells = [
        ("M", 40, _AHIS["n"], 11), ("M", 40, _AHIS["mi"], 13),
        ("M", 40, _AHIS["mo"], 8), ("M", 40, _AHIS["s"], 13),
        ("F", 40, _AHIS["n"], 15), ("F", 40, _AHIS["mi"], 12),
        ("F", 40, _AHIS["mo"], 16), ("F", 40, _AHIS["s"], 12),
    ]
    cohort = make_demo_cohort(cells)
    two_way = stratify(cohort, StratAxis.GENDER_X_AHI)
    labels = [key.label for key in two_way]
    assert labels == ["M-Normal", "M-Mild", "M-Moderate", "M-Severe",
                      "F-Normal", "F-Mild", "F-Moderate", "F-Severe"]
    assert [len(v) for v in two_way.values()] == [11, 13, 8, 13, 15, 12, 16, 12]
    ahi = stratify(cohort, StratAxis.AHI)
    assert [len(v) for v in ahi.values()] == [26, 25, 24, 25]


def test_age_axis_fixture_counts():
    cells = [("M", _AGES["u"], 2.0, 13), ("M", _AGES["m"], 2.0, 13),
             ("M", _AGES["o"], 2.0, 19), ("F", _AGES["u"], 2.0, 20),
             ("F", _AGES["m"], 2.0, 21), ("F", _AGES["o"], 2.0, 14)]
    cohort = make_demo_cohort(cells)
    age = stratify(cohort, StratAxis.AGE)
    assert {k.label: len(v) for k, v in age.items()} == {
        "Under-50": 33, "50-65": 34, "Over-65": 33}
    gender_age = stratify(cohort, StratAxis.GENDER_X_AGE)
    assert [len(v) for v in gender_age.values()] == [13, 13, 19, 20, 21, 14]


def test_stratify_partition_law_all_axes():
    rng = np.random.default_rng(1)
    cells = [("M" if rng.random() < 0.5 else "F", int(rng.integers(20, 90)),
              float(rng.uniform(0, 60)), 1) for _ in range(73)]
    cohort = make_demo_cohort(cells)
    everyone = set(cohort.subject_ids())
    for axis in ALL_AXES:
        groups = stratify(cohort, axis)
        union = set()
        total = 0
        for members in groups.values():
            assert not union & members  # disjoint
            union |= members
            total += len(members)
            assert members  # empties omitted
        assert union == everyone
        assert total == len(everyone)


def test_subgroup_key_validation_and_labels():
    with pytest.raises(ValueError, match="populated fields"):
        SubgroupKey(StratAxis.GENDER, age_group=AgeGroup.UNDER_50)
    key = SubgroupKey(StratAxis.AGE_X_AHI, age_group=AgeGroup.UNDER_50,
                      ahi_severity=AhiSeverity.NORMAL)
    assert key.label == "Under-50-Normal"
    assert subgroup_key_for(StratAxis.GENDER_X_AGE,
                            _demo("M", 30, 1.0)).label == "M-Under-50"


# ---------------------------------------------------------------------------
# phase-1 planning
# ---------------------------------------------------------------------------

def _uniform_cohort(n):
    return make_demo_cohort([("M", 40, 2.0, n)])


def test_phase1_100_subjects_five_folds_of_20():
    plan = plan_phase1(_uniform_cohort(100), k=5, seed=7)
    assert [len(f.test) for f in plan.folds] == [20] * 5
    assert [len(f.train) for f in plan.folds] == [72] * 5
    assert [len(f.validation) for f in plan.folds] == [8] * 5


def test_phase1_round_robin_remainders():
    plan = plan_phase1(_uniform_cohort(11), k=5, seed=0)
    assert sorted(len(f.test) for f in plan.folds) == [2, 2, 2, 2, 3]


def test_phase1_partition_and_verification():
    plan = plan_phase1(_uniform_cohort(37), k=5, seed=3)
    assert verify_no_leakage(plan) == []
    tests = [s for f in plan.folds for s in f.test]
    assert sorted(tests) == sorted(set(tests))
    assert len(tests) == 37


def test_phase1_too_small_cohort_errors():
    with pytest.raises(PlanError, match="cannot fill"):
        plan_phase1(_uniform_cohort(3), k=5)


def test_phase1_determinism_and_seed_sensitivity():
    cohort = _uniform_cohort(30)
    a = plan_phase1(cohort, seed=5)
    b = plan_phase1(cohort, seed=5)
    assert a == b
    c = plan_phase1(cohort, seed=6)
    assert a != c


# ---------------------------------------------------------------------------
# phase-2 planning
# ---------------------------------------------------------------------------

def test_phase2_spread_subgroup_uses_matching_checkpoints():
    cohort = _uniform_cohort(50)
    phase1 = plan_phase1(cohort, k=5, seed=1)
    subgroup = [f.test[0] for f in phase1.folds] + [f.test[1] for f in phase1.folds]
    plan = plan_phase2(subgroup, phase1, max_folds=5, seed=2)
    assert len(plan.folds) == 5
    for fold in plan.folds:
        held_out = set(phase1.folds[fold.checkpoint_index].test)
        assert set(fold.test) <= held_out
    assert verify_no_leakage(phase1, [plan]) == []
    assert plan.untested == ()


def test_phase2_single_fold_subgroup_splits_on_one_checkpoint():
    cohort = _uniform_cohort(40)
    phase1 = plan_phase1(cohort, k=5, seed=4)
    subgroup = list(phase1.folds[2].test)[:6]  # entirely inside fold 2
    plan = plan_phase2(subgroup, phase1, max_folds=5, seed=0)
    assert len(plan.folds) >= 2
    assert all(f.checkpoint_index == 2 for f in plan.folds)
    assert all(f.train for f in plan.folds)
    covered = sorted(s for f in plan.folds for s in f.test)
    assert covered == sorted(subgroup)
    assert verify_no_leakage(phase1, [plan]) == []


def test_phase2_max_folds_keeps_largest_and_reports_untested():
    cohort = _uniform_cohort(60)
    phase1 = plan_phase1(cohort, k=5, seed=5)
    # 3, 2, 2, 1 and 1 subjects in folds 0..4
    sizes = [3, 2, 2, 1, 1]
    subgroup = [s for fold, n in zip(phase1.folds, sizes) for s in fold.test[:n]]
    plan = plan_phase2(subgroup, phase1, max_folds=3, seed=0)
    assert len(plan.folds) == 3
    assert sorted(len(f.test) for f in plan.folds) == [2, 2, 3]
    assert len(plan.untested) == 2
    assert verify_no_leakage(phase1, [plan]) == []


def test_phase2_insufficient_subjects_errors():
    cohort = _uniform_cohort(20)
    phase1 = plan_phase1(cohort, k=5, seed=6)
    with pytest.raises(PlanError, match="insufficient subjects"):
        plan_phase2([phase1.folds[0].test[0]], phase1, max_folds=5)
    with pytest.raises(PlanError, match="empty subgroup"):
        plan_phase2([], phase1, max_folds=5)
    with pytest.raises(PlanError, match="not in the phase-1 plan"):
        plan_phase2(["ghost"], phase1, max_folds=5)


def test_phase2_fuzz_plans_always_verify():
    rng = np.random.default_rng(9)
    for trial in range(30):
        n = int(rng.integers(10, 120))
        cells = [("M" if rng.random() < 0.5 else "F",
                  int(rng.integers(20, 90)), float(rng.uniform(0, 60)), 1)
                 for _ in range(n)]
        cohort = make_demo_cohort(cells)
        phase1 = plan_phase1(cohort, k=5, seed=trial)
        plans = []
        for axis in ALL_AXES:
            max_folds = 3 if axis.is_two_way else 5
            for key, members in stratify(cohort, axis).items():
                try:
                    plans.append(plan_phase2(members, phase1, max_folds,
                                             seed=trial))
                except PlanError:
                    continue  # too small or too concentrated: legitimately skipped
        assert verify_no_leakage(phase1, plans) == []


# ---------------------------------------------------------------------------
# verification catches injected faults
# ---------------------------------------------------------------------------

def _toy_phase1():
    return Phase1Plan(seed=0, k=2, folds=(
        Phase1Fold(index=0, test=("a", "b"), validation=("c",), train=("d", "e", "f")),
        Phase1Fold(index=1, test=("c", "d"), validation=("a",), train=("b", "e", "f")),
    ))


def test_verify_passes_sound_hand_built_plan():
    phase1 = Phase1Plan(seed=0, k=2, folds=(
        Phase1Fold(index=0, test=("a", "b"), validation=("c",), train=("d",)),
        Phase1Fold(index=1, test=("c", "d"), validation=("a",), train=("b",)),
    ))
    assert verify_no_leakage(phase1) == []


def test_verify_flags_test_subject_in_checkpoint_training():
    phase1 = _toy_phase1()
    bad = Phase2Plan(subgroup=None, seed=0, folds=(
        FinetuneFold(index=0, checkpoint_index=0, test=("a", "e"),
                     validation=(), train=("b",)),
    ))
    violations = verify_no_leakage(phase1, [bad])
    leaks = [v for v in violations if v.kind == "phase2-leakage"]
    assert len(leaks) == 1
    assert leaks[0].subjects == ("e",)


def test_verify_flags_duplicate_phase2_test_subjects():
    phase1 = _toy_phase1()
    bad = Phase2Plan(subgroup=None, seed=0, folds=(
        FinetuneFold(index=0, checkpoint_index=0, test=("a",),
                     validation=(), train=("b",)),
        FinetuneFold(index=1, checkpoint_index=0, test=("a", "b"),
                     validation=(), train=()),
    ))
    kinds = {v.kind for v in verify_no_leakage(phase1, [bad])}
    assert "phase2-duplicate-test" in kinds


def test_verify_flags_phase1_overlap():
    phase1 = Phase1Plan(seed=0, k=2, folds=(
        Phase1Fold(index=0, test=("a", "b"), validation=("b",), train=("c", "d")),
        Phase1Fold(index=1, test=("c", "d"), validation=(), train=("a", "b")),
    ))
    violations = verify_no_leakage(phase1)
    assert any(v.kind == "phase1-overlap" and v.subjects == ("b",)
               for v in violations)


# ---------------------------------------------------------------------------
# plan files
# ---------------------------------------------------------------------------

def test_plan_files_round_trip_and_stable_bytes(tmp_path):
    cohort = _uniform_cohort(25)
    phase1 = plan_phase1(cohort, k=5, seed=11)
    p1 = save_plan(phase1, tmp_path / "phase1.json")
    subgroup = sorted(cohort.subject_ids())[:10]
    phase2 = plan_phase2(subgroup, phase1, max_folds=5, seed=11)
    p2 = save_plan(phase2, tmp_path / "sub.json")
    assert load_plan(p1) == phase1
    assert load_plan(p2) == phase2
    first = p1.read_bytes()
    save_plan(phase1, p1)
    assert p1.read_bytes() == first


def test_load_plan_rejects_malformed(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(PlanError, match="cannot parse"):
        load_plan(path)
    path.write_text('{"kind": "phase9"}', encoding="utf-8")
    with pytest.raises(PlanError, match="unknown plan kind"):
        load_plan(path)
