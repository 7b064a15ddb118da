import numpy as np
import pytest

from fedcourse.datasets import InteractionKind, build_rating_matrix, derive_rating
from fedcourse.errors import ConfigError
from fedcourse.synth import SynthConfig, generate_synthetic


def tiny_config(**overrides):
    base = dict(
        schools=3,
        students_min=4,
        students_max=6,
        courses=12,
        activities=4,
        clusters=2,
        noise=0.0,
        enroll_in=3,
        enroll_out=1,
        activities_per_student=2,
        rating_high=0.9,
        rating_low=0.2,
        signal="duration",
    )
    base.update(overrides)
    return SynthConfig(**base)


class TestSynthConfig:
    def test_rejects_clusters_too_tight_for_enrollment(self):
        # 12 courses / 2 clusters = 6 per cluster; enroll_in=6 leaves no held-out
        with pytest.raises(ConfigError):
            tiny_config(enroll_in=6)

    def test_accepts_boundary_enrollment(self):
        tiny_config(enroll_in=5)  # 5 enrolled + 1 held-out = 6

    def test_rejects_bad_student_range(self):
        with pytest.raises(ConfigError):
            tiny_config(students_min=5, students_max=4)

    def test_rejects_negative_noise(self):
        with pytest.raises(ConfigError):
            tiny_config(noise=-0.1)

    def test_rejects_unknown_signal(self):
        with pytest.raises(ConfigError):
            tiny_config(signal="clicks")

    def test_rejects_inverted_rating_band(self):
        with pytest.raises(ConfigError):
            tiny_config(rating_low=0.8, rating_high=0.3)


class TestGenerateSynthetic:
    def test_deterministic_for_seed(self):
        a = generate_synthetic(tiny_config(), seed=5)
        b = generate_synthetic(tiny_config(), seed=5)
        assert len(a) == len(b)
        for da, db in zip(a, b):
            assert da.student_ids == db.student_ids
            assert da.interactions == db.interactions
            assert da.catalog.course_texts == db.catalog.course_texts

    def test_seed_changes_data(self):
        a = generate_synthetic(tiny_config(), seed=5)
        b = generate_synthetic(tiny_config(), seed=6)
        assert a[0].interactions != b[0].interactions

    def test_school_count_and_sizes(self):
        cfg = tiny_config()
        datasets = generate_synthetic(cfg, seed=0)
        assert len(datasets) == cfg.schools
        for sid, ds in enumerate(datasets):
            assert ds.school_id == sid
            assert cfg.students_min <= ds.n_students <= cfg.students_max
            assert ds.catalog.n_courses == cfg.courses
            assert ds.catalog.n_activities == cfg.activities

    def test_shared_catalog_across_schools(self):
        datasets = generate_synthetic(tiny_config(), seed=1)
        for ds in datasets[1:]:
            assert ds.catalog == datasets[0].catalog

    def test_per_student_record_counts(self):
        cfg = tiny_config()
        for ds in generate_synthetic(cfg, seed=2):
            for s in range(ds.n_students):
                records = [it for it in ds.interactions if it.student == s]
                enrollments = [it for it in records if it.kind is InteractionKind.ENROLLMENT]
                acts = [it for it in records if it.kind is InteractionKind.ACTIVITY]
                # enroll_in + enroll_out + the held-out appended last
                assert len(enrollments) == cfg.enroll_in + cfg.enroll_out + 1
                assert len(acts) == cfg.activities_per_student

    def test_last_record_is_an_enrollment_for_every_student(self):
        # leave-latest-out must pick an enrollment, not an activity
        for ds in generate_synthetic(tiny_config(), seed=3):
            last = {}
            for it in ds.interactions:
                last[it.student] = it
            for it in last.values():
                assert it.kind is InteractionKind.ENROLLMENT

    def test_noise_zero_ratings_are_exactly_two_valued(self):
        cfg = tiny_config(noise=0.0)
        for ds in generate_synthetic(cfg, seed=4):
            values = {
                round(derive_rating(it.signal), 12)
                for it in ds.interactions
                if it.kind is InteractionKind.ENROLLMENT
            }
            assert values <= {cfg.rating_high, cfg.rating_low}
            assert cfg.rating_high in values

    def test_noise_spreads_ratings(self):
        cfg = tiny_config(noise=0.1)
        ds = generate_synthetic(cfg, seed=4)[0]
        values = [
            derive_rating(it.signal)
            for it in ds.interactions
            if it.kind is InteractionKind.ENROLLMENT
        ]
        assert len(set(values)) > 2

    def test_ratings_never_negative(self):
        cfg = tiny_config(noise=2.0)  # noise large enough to push below zero
        for ds in generate_synthetic(cfg, seed=7):
            rm = build_rating_matrix(ds)
            assert (rm.values[rm.mask] >= 0.0).all()

    def test_held_out_course_is_in_cluster(self):
        # with noise 0, in-cluster = rating_high; the final (held-out)
        # enrollment must be an in-cluster course
        cfg = tiny_config(noise=0.0)
        for ds in generate_synthetic(cfg, seed=8):
            last = {}
            for it in ds.interactions:
                if it.kind is InteractionKind.ENROLLMENT:
                    last[it.student] = it
            for it in last.values():
                assert derive_rating(it.signal) == pytest.approx(cfg.rating_high)

    def test_held_out_course_is_unseen_before(self):
        for ds in generate_synthetic(tiny_config(), seed=9):
            per_student = {}
            for it in ds.interactions:
                if it.kind is InteractionKind.ENROLLMENT:
                    per_student.setdefault(it.student, []).append(it.course)
            for courses in per_student.values():
                assert courses[-1] not in courses[:-1]

    def test_signal_kinds(self):
        for kind in ("duration", "score"):
            ds = generate_synthetic(tiny_config(signal=kind), seed=1)[0]
            names = {
                type(it.signal).__name__
                for it in ds.interactions
                if it.kind is InteractionKind.ENROLLMENT
            }
            assert names == {"Duration" if kind == "duration" else "Score"}

    def test_mixed_signal_uses_both(self):
        ds = generate_synthetic(tiny_config(signal="mixed"), seed=1)[0]
        names = {
            type(it.signal).__name__
            for it in ds.interactions
            if it.kind is InteractionKind.ENROLLMENT
        }
        assert names == {"Duration", "Score"}

    def test_single_cluster_single_school(self):
        cfg = tiny_config(schools=1, clusters=1, enroll_out=0)
        datasets = generate_synthetic(cfg, seed=0)
        assert len(datasets) == 1
        values = {
            round(derive_rating(it.signal), 12)
            for it in datasets[0].interactions
            if it.kind is InteractionKind.ENROLLMENT
        }
        assert values == {cfg.rating_high}

    def test_course_texts_carry_cluster_theme_words(self):
        cfg = tiny_config()
        cat = generate_synthetic(cfg, seed=0)[0].catalog
        for c, text in enumerate(cat.course_texts):
            theme = f"theme{c % cfg.clusters}"
            assert theme in text

    def test_no_dates_emitted(self):
        for ds in generate_synthetic(tiny_config(), seed=0):
            assert not ds.dated
