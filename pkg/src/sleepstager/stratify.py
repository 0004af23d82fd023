"""Demographic stratification and leakage-constrained fold planning.

Phase-1 plans split the whole cohort into k test folds with a
subject-level validation carve-out on the training side. Phase-2 plans
derive fine-tuning folds for one demographic subgroup such that every
fine-tune test set is contained in the held-out test fold of the
checkpoint that initializes it; that containment is the anti-leakage
contract, and verify_no_leakage re-checks it from the plan data alone.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .data import (
    AgeGroup,
    AhiSeverity,
    Gender,
    classify_demographics,
)

PLAN_FORMAT_VERSION = 1


class PlanError(ValueError):
    """A fold plan cannot be constructed from the given inputs."""


class StratAxis(str, Enum):
    GENDER = "gender"
    AGE = "age"
    AHI = "ahi"
    GENDER_X_AHI = "gender_x_ahi"
    GENDER_X_AGE = "gender_x_age"
    AGE_X_AHI = "age_x_ahi"

    @property
    def is_two_way(self):
        return self in (StratAxis.GENDER_X_AHI, StratAxis.GENDER_X_AGE,
                        StratAxis.AGE_X_AHI)


SINGLE_AXES = (StratAxis.GENDER, StratAxis.AGE, StratAxis.AHI)
TWO_WAY_AXES = (StratAxis.GENDER_X_AHI, StratAxis.GENDER_X_AGE,
                StratAxis.AGE_X_AHI)
ALL_AXES = SINGLE_AXES + TWO_WAY_AXES

_GENDER_LABEL = {Gender.MALE: "Male", Gender.FEMALE: "Female"}


@dataclass(frozen=True)
class SubgroupKey:
    axis: StratAxis
    gender: Gender | None = None
    age_group: AgeGroup | None = None
    ahi_severity: AhiSeverity | None = None

    def __post_init__(self):
        expected = {
            StratAxis.GENDER: (True, False, False),
            StratAxis.AGE: (False, True, False),
            StratAxis.AHI: (False, False, True),
            StratAxis.GENDER_X_AHI: (True, False, True),
            StratAxis.GENDER_X_AGE: (True, True, False),
            StratAxis.AGE_X_AHI: (False, True, True),
        }[self.axis]
        actual = (self.gender is not None, self.age_group is not None,
                  self.ahi_severity is not None)
        if actual != expected:
            raise ValueError(
                f"populated fields {actual} do not match axis {self.axis.value}")

    @property
    def label(self):
        if self.axis is StratAxis.GENDER:
            return _GENDER_LABEL[self.gender]
        if self.axis is StratAxis.AGE:
            return self.age_group.value
        if self.axis is StratAxis.AHI:
            return self.ahi_severity.value
        if self.axis is StratAxis.GENDER_X_AHI:
            return f"{self.gender.value}-{self.ahi_severity.value}"
        if self.axis is StratAxis.GENDER_X_AGE:
            return f"{self.gender.value}-{self.age_group.value}"
        return f"{self.age_group.value}-{self.ahi_severity.value}"

    @property
    def slug(self):
        return f"{self.axis.value}_{self.label.lower().replace(' ', '-')}"

    def to_dict(self):
        return {
            "axis": self.axis.value,
            "gender": self.gender.value if self.gender else None,
            "age_group": self.age_group.value if self.age_group else None,
            "ahi_severity": self.ahi_severity.value if self.ahi_severity else None,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            axis=StratAxis(d["axis"]),
            gender=Gender(d["gender"]) if d.get("gender") else None,
            age_group=AgeGroup(d["age_group"]) if d.get("age_group") else None,
            ahi_severity=AhiSeverity(d["ahi_severity"]) if d.get("ahi_severity") else None)


def subgroup_key_for(axis, demographics):
    """The subgroup a subject belongs to along one axis."""
    age_group, severity = classify_demographics(demographics)
    gender = demographics.gender
    if axis is StratAxis.GENDER:
        return SubgroupKey(axis, gender=gender)
    if axis is StratAxis.AGE:
        return SubgroupKey(axis, age_group=age_group)
    if axis is StratAxis.AHI:
        return SubgroupKey(axis, ahi_severity=severity)
    if axis is StratAxis.GENDER_X_AHI:
        return SubgroupKey(axis, gender=gender, ahi_severity=severity)
    if axis is StratAxis.GENDER_X_AGE:
        return SubgroupKey(axis, gender=gender, age_group=age_group)
    if axis is StratAxis.AGE_X_AHI:
        return SubgroupKey(axis, age_group=age_group, ahi_severity=severity)
    raise ValueError(f"unknown axis {axis!r}")


# Canonical ordering of subgroup keys within an axis (report row order).
_GENDER_ORDER = (Gender.MALE, Gender.FEMALE)
_AGE_ORDER = (AgeGroup.UNDER_50, AgeGroup.FROM_50_TO_65, AgeGroup.OVER_65)
_AHI_ORDER = (AhiSeverity.NORMAL, AhiSeverity.MILD, AhiSeverity.MODERATE,
              AhiSeverity.SEVERE)


def axis_subgroups(axis):
    """Every possible subgroup key of an axis, in report order."""
    if axis is StratAxis.GENDER:
        return [SubgroupKey(axis, gender=g) for g in _GENDER_ORDER]
    if axis is StratAxis.AGE:
        return [SubgroupKey(axis, age_group=a) for a in _AGE_ORDER]
    if axis is StratAxis.AHI:
        return [SubgroupKey(axis, ahi_severity=s) for s in _AHI_ORDER]
    if axis is StratAxis.GENDER_X_AHI:
        return [SubgroupKey(axis, gender=g, ahi_severity=s)
                for g in _GENDER_ORDER for s in _AHI_ORDER]
    if axis is StratAxis.GENDER_X_AGE:
        return [SubgroupKey(axis, gender=g, age_group=a)
                for g in _GENDER_ORDER for a in _AGE_ORDER]
    if axis is StratAxis.AGE_X_AHI:
        return [SubgroupKey(axis, age_group=a, ahi_severity=s)
                for a in _AGE_ORDER for s in _AHI_ORDER]
    raise ValueError(f"unknown axis {axis!r}")


def stratify(cohort, axis):
    """Partition the cohort along one axis; empty subgroups are omitted."""
    groups: dict[SubgroupKey, set[str]] = {}
    for rec in cohort.subjects:
        key = subgroup_key_for(axis, rec.demographics)
        groups.setdefault(key, set()).add(rec.subject_id)
    ordered = {}
    for key in axis_subgroups(axis):
        if key in groups:
            ordered[key] = frozenset(groups[key])
    return ordered


# ---------------------------------------------------------------------------
# fold plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Phase1Fold:
    index: int
    test: tuple[str, ...]
    validation: tuple[str, ...]
    train: tuple[str, ...]


@dataclass(frozen=True)
class Phase1Plan:
    seed: int
    k: int
    folds: tuple[Phase1Fold, ...]

    def all_subjects(self):
        out = set()
        for fold in self.folds:
            out.update(fold.test)
        return frozenset(out)

    def to_dict(self):
        return {
            "kind": "phase1",
            "version": PLAN_FORMAT_VERSION,
            "seed": self.seed,
            "k": self.k,
            "folds": [{"index": f.index, "test": list(f.test),
                       "validation": list(f.validation), "train": list(f.train)}
                      for f in self.folds],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("kind") != "phase1":
            raise PlanError(f"not a phase-1 plan: kind={d.get('kind')!r}")
        folds = tuple(Phase1Fold(index=f["index"], test=tuple(f["test"]),
                                 validation=tuple(f["validation"]),
                                 train=tuple(f["train"]))
                      for f in d["folds"])
        return cls(seed=d["seed"], k=d["k"], folds=folds)


@dataclass(frozen=True)
class FinetuneFold:
    index: int
    checkpoint_index: int
    test: tuple[str, ...]
    validation: tuple[str, ...]
    train: tuple[str, ...]


@dataclass(frozen=True)
class Phase2Plan:
    subgroup: SubgroupKey
    seed: int
    folds: tuple[FinetuneFold, ...]
    untested: tuple[str, ...] = ()

    def to_dict(self):
        return {
            "kind": "phase2",
            "version": PLAN_FORMAT_VERSION,
            "subgroup": self.subgroup.to_dict() if self.subgroup else None,
            "seed": self.seed,
            "untested": list(self.untested),
            "folds": [{"index": f.index, "checkpoint_index": f.checkpoint_index,
                       "test": list(f.test), "validation": list(f.validation),
                       "train": list(f.train)}
                      for f in self.folds],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("kind") != "phase2":
            raise PlanError(f"not a phase-2 plan: kind={d.get('kind')!r}")
        folds = tuple(FinetuneFold(
            index=f["index"], checkpoint_index=f["checkpoint_index"],
            test=tuple(f["test"]), validation=tuple(f["validation"]),
            train=tuple(f["train"])) for f in d["folds"])
        subgroup = d.get("subgroup")
        return cls(subgroup=SubgroupKey.from_dict(subgroup) if subgroup else None,
                   seed=d["seed"], folds=folds,
                   untested=tuple(d.get("untested", ())))


def _carve_validation(train_ids, validation_fraction, rng, keep_at_least=1):
    """Move ceil(fraction * n) subjects from train into validation.

    Never empties the training side; tiny folds get a smaller (possibly
    empty) validation set instead.
    """
    pool = sorted(train_ids)
    rng.shuffle(pool)
    n_val = math.ceil(validation_fraction * len(pool))
    n_val = min(n_val, max(len(pool) - keep_at_least, 0))
    validation = pool[:n_val]
    train = pool[n_val:]
    return tuple(sorted(train)), tuple(sorted(validation))


def plan_phase1(cohort, k=5, validation_fraction=0.10, seed=0):
    """Round-robin k-fold assignment after a seeded shuffle.

    Test folds partition the cohort with sizes differing by at most one;
    each fold's validation subjects are carved from its training side at
    the subject level.
    """
    ids = sorted(cohort.subject_ids())
    if len(ids) < k:
        raise PlanError(f"cohort of {len(ids)} subjects cannot fill {k} folds")
    if k < 2:
        raise PlanError("phase-1 planning needs k >= 2")
    shuffled = list(ids)
    random.Random(seed).shuffle(shuffled)
    folds = []
    for i in range(k):
        test = shuffled[i::k]
        rest = [s for s in shuffled if s not in set(test)]
        rng = random.Random(seed * 100003 + i + 1)
        train, validation = _carve_validation(rest, validation_fraction, rng)
        folds.append(Phase1Fold(index=i, test=tuple(sorted(test)),
                                validation=validation, train=train))
    return Phase1Plan(seed=seed, k=k, folds=tuple(folds))


def plan_phase2(subgroup_ids, phase1, max_folds, validation_fraction=0.10,
                seed=0):
    """Fine-tuning folds for one subgroup, compatible with Phase-1 checkpoints.

    Test folds are the non-empty intersections of the subgroup with the
    Phase-1 test folds, so each fold has exactly one checkpoint whose
    Phase-1 training never saw its test subjects. When the subgroup sits
    entirely inside a single Phase-1 fold, that intersection is split
    round-robin into smaller folds (all compatible with the same
    checkpoint) so the training side stays non-empty. If there are more
    intersections than max_folds, the largest are kept and the rest
    reported as untested.
    """
    subgroup = sorted(set(subgroup_ids))
    if not subgroup:
        raise PlanError("empty subgroup")
    known = phase1.all_subjects()
    unknown = [s for s in subgroup if s not in known]
    if unknown:
        raise PlanError(f"subjects not in the phase-1 plan: {unknown}")
    if len(subgroup) < 2:
        raise PlanError(
            "insufficient subjects for leakage-safe fine-tuning: a single "
            "subject would leave an empty train set")
    if max_folds < 1:
        raise PlanError("max_folds must be >= 1")

    subgroup_set = set(subgroup)
    intersections = []
    for fold in phase1.folds:
        inter = sorted(subgroup_set & set(fold.test))
        if inter:
            intersections.append((fold.index, inter))

    untested: list[str] = []
    if len(intersections) == 1:
        # Whole subgroup held out by one checkpoint: any subset is a valid
        # test fold for it, so split round-robin to keep train non-empty.
        ckpt_index, members = intersections[0]
        shuffled = list(members)
        random.Random(seed * 7919 + ckpt_index).shuffle(shuffled)
        n_splits = min(max_folds, len(members))
        if n_splits < 2:
            n_splits = min(2, len(members))
        parts = [sorted(shuffled[i::n_splits]) for i in range(n_splits)]
        selected = [(ckpt_index, part) for part in parts if part]
    else:
        intersections.sort(key=lambda item: (-len(item[1]), item[0]))
        selected = intersections[:max_folds]
        for _, leftover in intersections[max_folds:]:
            untested.extend(leftover)
        selected.sort(key=lambda item: item[0])

    folds = []
    for order, (ckpt_index, test) in enumerate(selected):
        train_pool = sorted(subgroup_set - set(test))
        if not train_pool:
            raise PlanError(
                "insufficient subjects for leakage-safe fine-tuning: fold "
                f"{order} would leave an empty train set")
        rng = random.Random(seed * 104729 + order + 1)
        train, validation = _carve_validation(train_pool, validation_fraction, rng)
        folds.append(FinetuneFold(index=order, checkpoint_index=ckpt_index,
                                  test=tuple(test), validation=validation,
                                  train=train))
    return Phase2Plan(subgroup=None, seed=seed, folds=tuple(folds),
                      untested=tuple(sorted(untested)))


def plan_phase2_for_subgroup(key, subject_ids, phase1, max_folds,
                             validation_fraction=0.10, seed=0):
    plan = plan_phase2(subject_ids, phase1, max_folds, validation_fraction, seed)
    return Phase2Plan(subgroup=key, seed=plan.seed, folds=plan.folds,
                      untested=plan.untested)


# ---------------------------------------------------------------------------
# leakage verification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str
    subjects: tuple[str, ...]

    def __str__(self):
        listing = ", ".join(self.subjects)
        return f"[{self.kind}] {self.detail}: {listing}"


def verify_no_leakage(phase1, phase2_plans=()):
    """Re-check the anti-leakage contract from plan data alone.

    Returns a list of violations (empty means the plans are sound):
    Phase-1 folds must be internally disjoint and their test sets must
    partition the cohort; every Phase-2 test set must sit inside its
    checkpoint's Phase-1 test fold; Phase-2 folds must be internally
    disjoint with non-overlapping test sets.
    """
    violations = []
    all_subjects = phase1.all_subjects()

    seen_test: dict[str, int] = {}
    for fold in phase1.folds:
        test, val, train = set(fold.test), set(fold.validation), set(fold.train)
        for name_a, a, name_b, b in (("train", train, "test", test),
                                     ("train", train, "validation", val),
                                     ("validation", val, "test", test)):
            overlap = sorted(a & b)
            if overlap:
                violations.append(Violation(
                    kind="phase1-overlap",
                    detail=f"fold {fold.index}: {name_a} and {name_b} share subjects",
                    subjects=tuple(overlap)))
        union = test | val | train
        missing = sorted(all_subjects - union)
        if missing:
            violations.append(Violation(
                kind="phase1-cover",
                detail=f"fold {fold.index}: subjects absent from train/val/test",
                subjects=tuple(missing)))
        for sid in fold.test:
            if sid in seen_test:
                violations.append(Violation(
                    kind="phase1-test-partition",
                    detail=f"subject in test folds {seen_test[sid]} and {fold.index}",
                    subjects=(sid,)))
            seen_test[sid] = fold.index

    for plan in phase2_plans:
        label = plan.subgroup.label if plan.subgroup else "subgroup"
        claimed: dict[str, int] = {}
        for fold in plan.folds:
            if not 0 <= fold.checkpoint_index < len(phase1.folds):
                violations.append(Violation(
                    kind="phase2-checkpoint",
                    detail=f"{label} fold {fold.index}: checkpoint index "
                           f"{fold.checkpoint_index} out of range",
                    subjects=()))
                continue
            held_out = set(phase1.folds[fold.checkpoint_index].test)
            leaked = sorted(set(fold.test) - held_out)
            if leaked:
                violations.append(Violation(
                    kind="phase2-leakage",
                    detail=f"{label} fold {fold.index}: test subjects were in "
                           f"checkpoint {fold.checkpoint_index}'s phase-1 training",
                    subjects=tuple(leaked)))
            test, val, train = set(fold.test), set(fold.validation), set(fold.train)
            for name_a, a, name_b, b in (("train", train, "test", test),
                                         ("train", train, "validation", val),
                                         ("validation", val, "test", test)):
                overlap = sorted(a & b)
                if overlap:
                    violations.append(Violation(
                        kind="phase2-overlap",
                        detail=f"{label} fold {fold.index}: {name_a} and "
                               f"{name_b} share subjects",
                        subjects=tuple(overlap)))
            for sid in fold.test:
                if sid in claimed:
                    violations.append(Violation(
                        kind="phase2-duplicate-test",
                        detail=f"{label}: subject tested in folds "
                               f"{claimed[sid]} and {fold.index}",
                        subjects=(sid,)))
                claimed[sid] = fold.index
    return violations


# ---------------------------------------------------------------------------
# plan files
# ---------------------------------------------------------------------------

def save_plan(plan, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(plan.to_dict(), sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")
    return path


def load_plan(path):
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise PlanError(f"cannot parse plan file {path}: {exc}") from exc
    kind = payload.get("kind")
    if kind == "phase1":
        return Phase1Plan.from_dict(payload)
    if kind == "phase2":
        return Phase2Plan.from_dict(payload)
    raise PlanError(f"unknown plan kind {kind!r} in {path}")
