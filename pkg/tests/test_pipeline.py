import csv
import json

import pytest

from fedcourse.config import config_from_dict
from fedcourse.datasets import (
    Catalog,
    Duration,
    Interaction,
    InteractionKind,
    SchoolDataset,
    load_catalog,
    load_school,
    save_catalog,
    save_school,
)
from fedcourse.errors import ConfigError, DatasetError
from fedcourse.evaluation import METRIC_KEYS
from fedcourse.pipeline import (
    SWEEP_AXES,
    evaluate_experiment,
    generate_data_files,
    inspect_graph_info,
    prepare_experiment,
    recommend_from_checkpoint,
    run_experiment,
    run_sweep,
)
from fedcourse.synth import generate_synthetic


def tiny_config(**overrides):
    data = {
        "seed": 5,
        "data": {
            "synthetic": {
                "schools": 2,
                "students_min": 4,
                "students_max": 5,
                "courses": 12,
                "activities": 3,
                "clusters": 2,
                "noise": 0.0,
                "enroll_in": 3,
                "enroll_out": 1,
                "activities_per_student": 1,
            }
        },
        "model": {"dim": 8, "heads": 2, "dropout": 0.0, "raw_dim": 32},
        "federation": {"rounds": 2, "lr_global": 0.0001},
        "eval": {"negatives": 5},
    }
    for key, section in overrides.items():
        data.setdefault(key, {}).update(section)
    return config_from_dict(data)


def enroll(student, course, rating=0.5):
    return Interaction(
        student=student,
        course=course,
        kind=InteractionKind.ENROLLMENT,
        activity=None,
        signal=Duration(t=rating * 60.0, total=60.0),
        date=None,
    )


def write_files_dataset(tmp_path, per_student_courses):
    """Materialize a one-school files dataset; returns (catalog, school) paths."""
    catalog = Catalog(
        course_ids=tuple(200 + c for c in range(6)),
        course_texts=tuple(f"unit {c} lectures" for c in range(6)),
        activity_ids=(900,),
        activity_texts=("chess club",),
    )
    records = []
    for student, courses in enumerate(per_student_courses):
        for i, course in enumerate(courses):
            records.append(enroll(student, course, rating=0.4 + 0.1 * (i % 3)))
    ds = SchoolDataset(
        school_id=0,
        student_ids=tuple(10 + s for s in range(len(per_student_courses))),
        interactions=tuple(records),
        catalog=catalog,
    )
    catalog_path = tmp_path / "catalog.tsv"
    school_path = tmp_path / "school_0.csv"
    save_catalog(catalog, catalog_path)
    save_school(ds, school_path)
    return catalog_path, school_path


def files_config(catalog_path, school_path, negatives=1):
    return config_from_dict(
        {
            "seed": 1,
            "data": {
                "source": "files",
                "files": {"catalog": str(catalog_path), "schools": [str(school_path)]},
            },
            "model": {"dim": 8, "heads": 2, "dropout": 0.0, "raw_dim": 32},
            "federation": {"rounds": 1, "lr_global": 0.0001},
            "eval": {"negatives": negatives},
        }
    )


class TestRunExperiment:
    def test_artifacts_and_report(self, tmp_path):
        report = run_experiment(tiny_config(), tmp_path)
        for name in ("metrics.json", "rounds.jsonl", "checkpoint.bin", "report.json"):
            assert (tmp_path / name).exists()
        metrics = json.loads((tmp_path / "metrics.json").read_text())
        assert tuple(metrics) == METRIC_KEYS
        assert metrics["n_instances"] > 0
        assert report["rounds_run"] == 2
        assert report["n_schools"] == 2
        # per round: begin + 2 uploads + gradient broadcast + download
        assert report["n_messages"] == 2 * 5
        assert report["metrics"] == metrics
        assert report["config"]["seed"] == 5
        on_disk = json.loads((tmp_path / "report.json").read_text())
        assert on_disk["metrics"] == metrics

    def test_rounds_log_one_line_per_round(self, tmp_path):
        run_experiment(tiny_config(), tmp_path)
        lines = (tmp_path / "rounds.jsonl").read_text().splitlines()
        assert len(lines) == 2
        for i, line in enumerate(lines):
            record = json.loads(line)
            assert record["round"] == i
            assert record["selected"] == [0, 1]

    def test_zero_rounds_reports_untrained_metrics(self, tmp_path):
        report = run_experiment(
            tiny_config(federation={"rounds": 0, "lr_global": 0.0001}), tmp_path
        )
        assert report["rounds_run"] == 0
        assert (tmp_path / "rounds.jsonl").read_text() == ""
        metrics = json.loads((tmp_path / "metrics.json").read_text())
        assert metrics["n_instances"] > 0

    def test_same_seed_is_byte_identical(self, tmp_path):
        run_experiment(tiny_config(), tmp_path / "a")
        run_experiment(tiny_config(), tmp_path / "b")
        assert (tmp_path / "a/metrics.json").read_bytes() == (
            tmp_path / "b/metrics.json"
        ).read_bytes()
        assert (tmp_path / "a/checkpoint.bin").read_bytes() == (
            tmp_path / "b/checkpoint.bin"
        ).read_bytes()

    def test_seed_changes_checkpoint(self, tmp_path):
        run_experiment(tiny_config(), tmp_path / "a")
        cfg = tiny_config()
        cfg = config_from_dict({**cfg.model_dump(), "seed": 6})
        run_experiment(cfg, tmp_path / "b")
        assert (tmp_path / "a/checkpoint.bin").read_bytes() != (
            tmp_path / "b/checkpoint.bin"
        ).read_bytes()

    def test_subset_and_redistribute_shape_message_count(self, tmp_path):
        cfg = tiny_config(
            federation={
                "rounds": 2,
                "lr_global": 0.0001,
                "subset_size": 1,
                "redistribute_every": 2,
            }
        )
        report = run_experiment(cfg, tmp_path)
        # 2 x (begin + upload + broadcast) + one download at round 1
        assert report["n_messages"] == 7


class TestEvaluateExperiment:
    def test_no_held_out_enrollments_rejected(self, tmp_path):
        # every student has a single enrollment, so nothing can be held out
        paths = write_files_dataset(tmp_path, [(0,), (1,)])
        exp = prepare_experiment(files_config(*paths))
        with pytest.raises(DatasetError, match="no test instances"):
            evaluate_experiment(exp)

    def test_instance_count_matches_split(self, tmp_path):
        paths = write_files_dataset(tmp_path, [(0, 1, 2), (3, 4)])
        exp = prepare_experiment(files_config(*paths))
        report, instances = evaluate_experiment(exp)
        assert report.n_instances == 2
        assert {inst.positive for inst in instances} == {2, 4}


class TestRunSweep:
    def test_axis_validated(self, tmp_path):
        with pytest.raises(ConfigError, match="axis"):
            run_sweep(tiny_config(), "learning_rate", [1], tmp_path)
        with pytest.raises(ConfigError, match="value"):
            run_sweep(tiny_config(), SWEEP_AXES[0], [], tmp_path)

    def test_single_value_matches_plain_run(self, tmp_path):
        cfg = tiny_config()
        run_experiment(cfg, tmp_path / "plain")
        result = run_sweep(cfg, "embedding_dim", [8], tmp_path / "sweep")
        cell = tmp_path / "sweep" / "embedding_dim_8"
        assert (cell / "metrics.json").read_bytes() == (
            tmp_path / "plain" / "metrics.json"
        ).read_bytes()
        assert result["rows"][0]["status"] == "ok"
        assert result["rows"][0]["hr10"] == json.loads(
            (cell / "metrics.json").read_text()
        )["hr10"]

    def test_bad_cell_recorded_and_sweep_continues(self, tmp_path):
        # 5 heads cannot divide the 8-dim embedding: that cell errors, the
        # rest of the sweep still runs
        result = run_sweep(tiny_config(), "attention_heads", [2, 5, 4], tmp_path)
        statuses = [row["status"] for row in result["rows"]]
        assert statuses == ["ok", "error", "ok"]
        bad = result["rows"][1]
        assert "divide" in bad["error"]
        assert not (tmp_path / "attention_heads_5" / "metrics.json").exists()
        assert (tmp_path / "attention_heads_4" / "metrics.json").exists()

    def test_csv_well_formed(self, tmp_path):
        run_sweep(tiny_config(), "attention_heads", [2, 5], tmp_path)
        with open(tmp_path / "sweep.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["axis", "value", "status", "error", *METRIC_KEYS, "rounds_run"]
        assert [r["value"] for r in rows] == ["2", "5"]
        ok, bad = rows
        assert ok["status"] == "ok"
        assert float(ok["hr10"]) >= 0.0
        assert bad["status"] == "error"
        assert bad["hr10"] == ""  # failed cells leave metric columns empty

    def test_dim_axis_sets_model_dim(self, tmp_path):
        result = run_sweep(tiny_config(), "embedding_dim", [4], tmp_path)
        assert result["rows"][0]["status"] == "ok"
        report = json.loads((tmp_path / "embedding_dim_4" / "report.json").read_text())
        assert report["config"]["model"]["dim"] == 4


class TestRecommend:
    def _checkpoint(self, tmp_path, per_student_courses, negatives=1):
        paths = write_files_dataset(tmp_path, per_student_courses)
        out = tmp_path / "out"
        run_experiment(files_config(*paths, negatives=negatives), out)
        return out / "checkpoint.bin"

    def test_student_with_all_but_one_course_gets_that_course(self, tmp_path):
        ckpt = self._checkpoint(tmp_path, [(0, 1, 2, 3, 4), (0, 1)])
        got = recommend_from_checkpoint(ckpt, school_id=0, student_id=10, k=3)
        assert [item["course"] for item in got] == [205]

    def test_recommendations_never_intersect_history(self, tmp_path):
        ckpt = self._checkpoint(tmp_path, [(0, 1, 2, 3, 4), (0, 1)])
        got = recommend_from_checkpoint(ckpt, school_id=0, student_id=11, k=10)
        # student 11 saw raw courses 200 and 201
        assert len(got) == 4  # min(k, unseen)
        assert not {item["course"] for item in got} & {200, 201}
        scores = [item["score"] for item in got]
        assert scores == sorted(scores, reverse=True)

    def test_k_zero_gives_empty_list(self, tmp_path):
        ckpt = self._checkpoint(tmp_path, [(0, 1, 2, 3, 4), (0, 1)])
        assert recommend_from_checkpoint(ckpt, school_id=0, student_id=10, k=0) == []

    def test_negative_k_rejected(self, tmp_path):
        ckpt = self._checkpoint(tmp_path, [(0, 1, 2, 3, 4), (0, 1)])
        with pytest.raises(ConfigError):
            recommend_from_checkpoint(ckpt, school_id=0, student_id=10, k=-1)

    def test_unknown_school_and_student(self, tmp_path):
        ckpt = self._checkpoint(tmp_path, [(0, 1, 2, 3, 4), (0, 1)])
        with pytest.raises(LookupError, match="school 9"):
            recommend_from_checkpoint(ckpt, school_id=9, student_id=10, k=1)
        with pytest.raises(LookupError, match="student 99"):
            recommend_from_checkpoint(ckpt, school_id=0, student_id=99, k=1)

    def test_warm_start_checkpoint_also_serves(self, tmp_path):
        paths = write_files_dataset(tmp_path, [(0, 1, 2, 3, 4), (0, 1)])
        cfg = files_config(*paths)
        cfg = config_from_dict(
            {**cfg.model_dump(), "objective": {"coupling": "warm_start"}}
        )
        out = tmp_path / "out"
        run_experiment(cfg, out)
        got = recommend_from_checkpoint(out / "checkpoint.bin", 0, 10, 3)
        assert [item["course"] for item in got] == [205]


class TestGenerateData:
    def test_files_round_trip(self, tmp_path):
        cfg = tiny_config()
        paths = generate_data_files(cfg, tmp_path)
        catalog = load_catalog(paths["catalog"])
        originals = {
            ds.school_id: ds
            for ds in generate_synthetic(cfg.data.synthetic.to_synth_config(), cfg.seed)
        }
        assert len(paths["schools"]) == 2
        for school_id, path in enumerate(paths["schools"]):
            loaded = load_school(path, catalog, school_id)
            assert loaded.interactions == originals[school_id].interactions
            assert loaded.student_ids == originals[school_id].student_ids

    def test_loading_generated_files_reproduces_metrics(self, tmp_path):
        cfg = tiny_config()
        run_experiment(cfg, tmp_path / "synth_run")
        paths = generate_data_files(cfg, tmp_path / "files")
        files_cfg = config_from_dict(
            {
                **cfg.model_dump(),
                "data": {
                    "source": "files",
                    "files": {"catalog": paths["catalog"], "schools": paths["schools"]},
                },
            }
        )
        run_experiment(files_cfg, tmp_path / "files_run")
        assert (tmp_path / "synth_run/metrics.json").read_bytes() == (
            tmp_path / "files_run/metrics.json"
        ).read_bytes()

    def test_requires_synthetic_source(self, tmp_path):
        paths = write_files_dataset(tmp_path, [(0, 1)])
        with pytest.raises(ConfigError, match="synthetic"):
            generate_data_files(files_config(*paths), tmp_path / "out")


class TestInspectGraph:
    def test_counts_by_type(self, tmp_path):
        paths = write_files_dataset(tmp_path, [(0, 1, 2), (3, 4)])
        info = inspect_graph_info(files_config(*paths), school_id=0)
        assert info["school_id"] == 0
        assert info["nodes_by_type"] == {"student": 2, "course": 6}
        assert info["n_nodes"] == 8
        assert info["edges_by_type"] == {"student_course": 5}
        assert info["n_edges"] == 5
        assert len(info["edge_list"]) == 5

    def test_unknown_school_rejected(self):
        with pytest.raises(LookupError, match="no school 7"):
            inspect_graph_info(tiny_config(), school_id=7)

    def test_synthetic_school_has_activity_nodes(self):
        info = inspect_graph_info(tiny_config(), school_id=1)
        assert info["nodes_by_type"]["activity"] >= 1
        assert "student_activity" in info["edges_by_type"]
