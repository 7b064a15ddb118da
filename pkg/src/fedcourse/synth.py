"""Synthetic multi-school data with planted interest clusters.

Students and courses get latent unit vectors near their cluster's center
(cluster centers are maximally separated; for two clusters they are
antipodal).  The latent geometry drives WHICH courses a student enrolls in:
the top in-cluster courses by latent affinity, a few out-of-cluster courses,
and, appended last so a leave-latest-out split holds it out, the student's
next-best unseen in-cluster course.  Observed rating values depend only on
cluster membership plus observation noise: ``high`` for in-cluster
enrollments, ``low`` for out-of-cluster ones, so ``noise=0`` yields exactly
those two values.  Activities and description texts correlate with clusters.

Everything is a pure function of (config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedcourse.datasets import (
    Catalog,
    Duration,
    Interaction,
    InteractionKind,
    Score,
    SchoolDataset,
    Signal,
)
from fedcourse.errors import ConfigError
from fedcourse.rng import substream

# Within-cluster latent spread; drives enrollment diversity independent of
# the observation-noise knob (noise=0 must still vary enrollment sets).
LATENT_JITTER = 0.6

COURSE_LENGTH_S = 3600.0
ACTIVITY_LENGTH_S = 1800.0
CLASS_AVERAGE = 100.0

SIGNAL_KINDS = ("duration", "score", "mixed")


@dataclass(frozen=True)
class SynthConfig:
    schools: int = 5
    students_min: int = 24
    students_max: int = 36
    courses: int = 120
    activities: int = 16
    clusters: int = 2
    noise: float = 0.1
    enroll_in: int = 8
    enroll_out: int = 2
    activities_per_student: int = 3
    rating_high: float = 0.9
    rating_low: float = 0.2
    signal: str = "duration"

    def __post_init__(self) -> None:
        if self.schools < 1:
            raise ConfigError("schools must be at least 1")
        if self.students_min < 1 or self.students_max < self.students_min:
            raise ConfigError("need 1 <= students_min <= students_max")
        if self.clusters < 1:
            raise ConfigError("clusters must be at least 1")
        if self.noise < 0:
            raise ConfigError("noise must be nonnegative")
        if self.enroll_in < 1 or self.enroll_out < 0:
            raise ConfigError("enrollment counts out of range")
        if self.activities_per_student < 0 or self.activities < 0:
            raise ConfigError("activity counts out of range")
        per_cluster = self.courses // self.clusters
        if per_cluster < self.enroll_in + 1:
            raise ConfigError(
                f"each of {self.clusters} clusters holds only {per_cluster} courses; "
                f"enroll_in={self.enroll_in} needs at least {self.enroll_in + 1}"
            )
        if self.signal not in SIGNAL_KINDS:
            raise ConfigError(f"signal must be one of {SIGNAL_KINDS}")
        if not 0 <= self.rating_low <= self.rating_high:
            raise ConfigError("need 0 <= rating_low <= rating_high")


def _cluster_centers(clusters: int) -> np.ndarray:
    """Unit centers with maximal pairwise separation, plus 2 jitter dims."""
    if clusters == 1:
        base = np.array([[1.0]])
    else:
        base = np.eye(clusters) - 1.0 / clusters
        base /= np.linalg.norm(base, axis=1, keepdims=True)
    extra = np.zeros((clusters, 2))
    return np.concatenate([base, extra], axis=1)


def _latent(center: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    vec = center + LATENT_JITTER * rng.normal(size=center.shape)
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        vec = center.copy()
        norm = np.linalg.norm(vec)
    return vec / norm


def _affinity(u: np.ndarray, v: np.ndarray) -> float:
    return float((1.0 + u @ v) / 2.0)


def _make_signal(kind: str, rating: float, index: int) -> Signal:
    if kind == "mixed":
        kind = "duration" if index % 2 == 0 else "score"
    if kind == "duration":
        return Duration(t=rating * COURSE_LENGTH_S, total=COURSE_LENGTH_S)
    return Score(points=rating * CLASS_AVERAGE, class_average=CLASS_AVERAGE)


def _catalog(cfg: SynthConfig, seed: int, course_cluster: np.ndarray, act_cluster: np.ndarray) -> Catalog:
    rng = substream(seed, "synth", "texts")
    theme_words = [[f"theme{k}w{i}" for i in range(8)] for k in range(cfg.clusters)]
    course_texts = []
    for c in range(cfg.courses):
        words = list(rng.choice(theme_words[course_cluster[c]], size=3, replace=False))
        words.append(f"course{c} syllabus unit{int(rng.integers(1000))}")
        course_texts.append(" ".join(words))
    activity_texts = []
    for a in range(cfg.activities):
        words = list(rng.choice(theme_words[act_cluster[a]], size=2, replace=False))
        words.append(f"activity{a} club session{int(rng.integers(1000))}")
        activity_texts.append(" ".join(words))
    return Catalog(
        course_ids=tuple(range(cfg.courses)),
        course_texts=tuple(course_texts),
        activity_ids=tuple(range(cfg.activities)),
        activity_texts=tuple(activity_texts),
    )


def generate_synthetic(cfg: SynthConfig, seed: int) -> list[SchoolDataset]:
    """Generate one dataset per school; deterministic given (cfg, seed)."""
    centers = _cluster_centers(cfg.clusters)
    course_cluster = np.arange(cfg.courses) % cfg.clusters
    act_cluster = np.arange(cfg.activities) % cfg.clusters

    cat_rng = substream(seed, "synth", "catalog")
    course_latents = np.stack(
        [_latent(centers[course_cluster[c]], cat_rng) for c in range(cfg.courses)]
    )
    catalog = _catalog(cfg, seed, course_cluster, act_cluster)

    cluster_courses = [np.flatnonzero(course_cluster == k) for k in range(cfg.clusters)]
    cluster_acts = [np.flatnonzero(act_cluster == k) for k in range(cfg.clusters)]

    datasets: list[SchoolDataset] = []
    for school in range(cfg.schools):
        rng = substream(seed, "synth", "school", school)
        m = int(rng.integers(cfg.students_min, cfg.students_max + 1))
        interactions: list[Interaction] = []
        record_index = 0
        for s in range(m):
            k = int(rng.integers(cfg.clusters))
            u = _latent(centers[k], rng)
            own = cluster_courses[k]
            affinities = np.array([_affinity(u, course_latents[c]) for c in own])
            order = own[np.argsort(-affinities, kind="stable")]
            enrolled_in = [int(c) for c in order[: cfg.enroll_in]]
            held_out = int(order[cfg.enroll_in])

            others = [c for c in range(cfg.courses) if course_cluster[c] != k]
            n_out = min(cfg.enroll_out, len(others))
            enrolled_out = (
                [int(c) for c in rng.choice(np.array(others), size=n_out, replace=False)]
                if n_out
                else []
            )

            def rating_for(in_cluster: bool) -> float:
                base = cfg.rating_high if in_cluster else cfg.rating_low
                value = base + cfg.noise * float(rng.normal())
                return max(value, 0.0)

            train_records: list[Interaction] = []
            for c in enrolled_in:
                train_records.append(
                    Interaction(
                        student=s,
                        course=c,
                        kind=InteractionKind.ENROLLMENT,
                        signal=_make_signal(cfg.signal, rating_for(True), record_index),
                    )
                )
                record_index += 1
            for c in enrolled_out:
                train_records.append(
                    Interaction(
                        student=s,
                        course=c,
                        kind=InteractionKind.ENROLLMENT,
                        signal=_make_signal(cfg.signal, rating_for(False), record_index),
                    )
                )
                record_index += 1

            if cfg.activities and cfg.activities_per_student:
                pool = cluster_acts[k] if len(cluster_acts[k]) else np.arange(cfg.activities)
                n_act = min(cfg.activities_per_student, len(pool))
                chosen = rng.choice(pool, size=n_act, replace=False)
                for a in chosen:
                    anchor = int(enrolled_in[int(rng.integers(len(enrolled_in)))])
                    engagement = max(0.5 + cfg.noise * float(rng.normal()), 0.0)
                    train_records.append(
                        Interaction(
                            student=s,
                            course=anchor,
                            kind=InteractionKind.ACTIVITY,
                            signal=Duration(
                                t=engagement * ACTIVITY_LENGTH_S, total=ACTIVITY_LENGTH_S
                            ),
                            activity=int(a),
                        )
                    )
                    record_index += 1

            perm = rng.permutation(len(train_records))
            interactions.extend(train_records[i] for i in perm)
            # the held-out enrollment is appended last so leave-latest-out
            # picks exactly the student's next-best in-cluster course
            interactions.append(
                Interaction(
                    student=s,
                    course=held_out,
                    kind=InteractionKind.ENROLLMENT,
                    signal=_make_signal(cfg.signal, rating_for(True), record_index),
                )
            )
            record_index += 1

        datasets.append(
            SchoolDataset(
                school_id=school,
                student_ids=tuple(range(m)),
                interactions=tuple(interactions),
                catalog=catalog,
            )
        )
    return datasets
