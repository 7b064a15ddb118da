"""Top-K ranking evaluation under the 1-positive + 99-negatives protocol.

Each held-out enrollment becomes a :class:`RankedInstance`: the positive
course plus sampled negatives the student never touched, all scored by the
model.  The positive's rank uses pessimistic tie-breaking (it is placed last
among equal scores), so a constant scorer earns nothing.  Reported metrics:
HR@{1,5,10,20}, NDCG@{5,10,20} (single-positive form 1/log2(rank+1)), MRR
(no cutoff), and AUC (fraction of negatives scored strictly below the
positive, ties counting one half, averaged per instance).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from fedcourse.datasets import Interaction, InteractionKind, SchoolDataset
from fedcourse.errors import DatasetError
from fedcourse.rng import substream

logger = logging.getLogger(__name__)

METRIC_KEYS = ("hr1", "hr5", "hr10", "hr20", "ndcg5", "ndcg10", "ndcg20", "mrr", "auc", "n_instances")


@dataclass(frozen=True)
class RankedInstance:
    positive: int
    negatives: tuple[int, ...]
    scores: dict[int, float]

    def __post_init__(self) -> None:
        if self.positive in self.negatives:
            raise ValueError("positive listed among negatives")
        if len(set(self.negatives)) != len(self.negatives):
            raise ValueError("duplicate negatives")
        missing = [c for c in (self.positive, *self.negatives) if c not in self.scores]
        if missing:
            raise ValueError(f"unscored candidates: {missing[:5]}")


def rank_of_positive(inst: RankedInstance) -> int:
    """1-based rank by descending score; the positive loses all ties."""
    pos_score = inst.scores[inst.positive]
    better_or_tied = sum(1 for c in inst.negatives if inst.scores[c] >= pos_score)
    return 1 + better_or_tied


def _check_ranks(ranks) -> list[int]:
    ranks = list(ranks)
    if not ranks:
        raise ValueError("no instances to evaluate")
    return ranks


def hr_at_k(ranks, k: int) -> float:
    if k < 1:
        raise ValueError("K must be at least 1")
    ranks = _check_ranks(ranks)
    return sum(1 for r in ranks if r <= k) / len(ranks)


def ndcg_at_k(ranks, k: int) -> float:
    if k < 1:
        raise ValueError("K must be at least 1")
    ranks = _check_ranks(ranks)
    return float(sum(1.0 / np.log2(r + 1) for r in ranks if r <= k) / len(ranks))


def mrr(ranks) -> float:
    ranks = _check_ranks(ranks)
    return sum(1.0 / r for r in ranks) / len(ranks)


def auc(instances: list[RankedInstance]) -> float:
    if not instances:
        raise ValueError("no instances to evaluate")
    total = 0.0
    for inst in instances:
        if not inst.negatives:
            raise ValueError("AUC needs at least one negative per instance")
        pos = inst.scores[inst.positive]
        below = sum(1.0 for c in inst.negatives if inst.scores[c] < pos)
        tied = sum(1.0 for c in inst.negatives if inst.scores[c] == pos)
        total += (below + 0.5 * tied) / len(inst.negatives)
    return total / len(instances)


@dataclass(frozen=True)
class MetricReport:
    hr1: float
    hr5: float
    hr10: float
    hr20: float
    ndcg5: float
    ndcg10: float
    ndcg20: float
    mrr: float
    auc: float
    n_instances: int

    def to_dict(self) -> dict:
        return {key: getattr(self, key) for key in METRIC_KEYS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def metric_report(instances: list[RankedInstance]) -> MetricReport:
    ranks = [rank_of_positive(inst) for inst in instances]
    return MetricReport(
        hr1=hr_at_k(ranks, 1),
        hr5=hr_at_k(ranks, 5),
        hr10=hr_at_k(ranks, 10),
        hr20=hr_at_k(ranks, 20),
        ndcg5=ndcg_at_k(ranks, 5),
        ndcg10=ndcg_at_k(ranks, 10),
        ndcg20=ndcg_at_k(ranks, 20),
        mrr=mrr(ranks),
        auc=auc(instances),
        n_instances=len(instances),
    )


# --- train/test splitting -----------------------------------------------------

@dataclass(frozen=True)
class TestPositive:
    student: int
    course: int


def split_train_test(
    ds: SchoolDataset, boundary: str | None = None
) -> tuple[SchoolDataset, tuple[TestPositive, ...]]:
    """Hold out test enrollments; remaining records form the training set.

    With a ``boundary`` date (requires dated records), records strictly
    before the boundary train and enrollments on/after it are test positives.
    Without one, each student's latest enrollment is held out
    (leave-latest-out); participation records always stay in train.  Students
    who would lose their only enrollment are kept fully in train with a
    warning, so every test student is seen during training.
    """
    if boundary is not None and not ds.dated:
        raise DatasetError("date-boundary split needs dated records")

    keep: list[Interaction] = []
    test: list[TestPositive] = []

    if boundary is None:
        last_enroll: dict[int, int] = {}
        enroll_count: dict[int, int] = {}
        for idx, it in enumerate(ds.interactions):
            if it.kind is InteractionKind.ENROLLMENT:
                last_enroll[it.student] = idx
                enroll_count[it.student] = enroll_count.get(it.student, 0) + 1
        held: set[int] = set()
        for student, idx in last_enroll.items():
            if enroll_count[student] >= 2:
                held.add(idx)
            else:
                logger.warning(
                    "school %d: student %d has a single enrollment; kept in train only",
                    ds.school_id,
                    student,
                )
        for idx, it in enumerate(ds.interactions):
            if idx in held:
                test.append(TestPositive(student=it.student, course=it.course))
            else:
                keep.append(it)
    else:
        train_pairs: set[tuple[int, int]] = set()
        train_students: set[int] = set()
        candidates: list[Interaction] = []
        for it in ds.interactions:
            assert it.date is not None
            if it.date < boundary:
                keep.append(it)
                train_students.add(it.student)
                if it.kind is InteractionKind.ENROLLMENT:
                    train_pairs.add((it.student, it.course))
            elif it.kind is InteractionKind.ENROLLMENT:
                candidates.append(it)
        seen_test: set[tuple[int, int]] = set()
        for it in candidates:
            pair = (it.student, it.course)
            if it.student not in train_students:
                logger.warning(
                    "school %d: student %d has no training records; test enrollment dropped",
                    ds.school_id,
                    ds.student_ids[it.student],
                )
                continue
            if pair in train_pairs or pair in seen_test:
                continue
            seen_test.add(pair)
            test.append(TestPositive(student=it.student, course=it.course))

    train_ds = SchoolDataset(
        school_id=ds.school_id,
        student_ids=ds.student_ids,
        interactions=tuple(keep),
        catalog=ds.catalog,
    )
    return train_ds, tuple(test)


def sample_negatives(
    student: int,
    n_courses: int,
    positives: set[int],
    count: int,
    seed: int,
    school_id: int = 0,
) -> tuple[int, ...]:
    """``count`` distinct unseen courses for one student, seed-deterministic."""
    pool = np.array([c for c in range(n_courses) if c not in positives], dtype=np.int64)
    if len(pool) < count:
        raise DatasetError(
            f"catalog too small: {n_courses} courses, {len(positives)} positives, "
            f"need {count} negatives"
        )
    rng = substream(seed, "negatives", school_id, student)
    chosen = rng.choice(pool, size=count, replace=False)
    return tuple(int(c) for c in chosen)


def build_instances(
    test_positives: tuple[TestPositive, ...],
    scores: np.ndarray,
    student_positives: dict[int, set[int]],
    n_courses: int,
    negatives: int,
    seed: int,
    school_id: int,
) -> list[RankedInstance]:
    """Assemble ranked instances for one school from a score matrix."""
    instances: list[RankedInstance] = []
    for tp in test_positives:
        pos_set = student_positives.get(tp.student, set())
        negs = sample_negatives(tp.student, n_courses, pos_set, negatives, seed, school_id)
        cands = (tp.course, *negs)
        inst = RankedInstance(
            positive=tp.course,
            negatives=negs,
            scores={c: float(scores[tp.student, c]) for c in cands},
        )
        instances.append(inst)
    return instances
