"""End-to-end experiment orchestration.

ingest (files or synthetic) -> per-school split -> graphs + content ->
federated training -> pooled ranking evaluation -> artifacts on disk:

* ``metrics.json``  - exactly the ten canonical metric keys (byte-stable)
* ``rounds.jsonl``  - one JSON record per round
* ``checkpoint.bin``- shared tensors + per-school state, byte-stable
* ``report.json``   - config echo, timings, paths (carries wall-clock times,
  so it is informative rather than byte-stable)
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedcourse.config import ExperimentConfig, config_from_dict
from fedcourse.conmf import predict
from fedcourse.datasets import (
    Catalog,
    InteractionKind,
    SchoolDataset,
    load_catalog,
    load_school,
    save_catalog,
    save_school,
)
from fedcourse.encoder import ContentFeatures, build_content, init_encoder_params, init_student_table
from fedcourse.errors import ConfigError, DatasetError
from fedcourse.evaluation import (
    METRIC_KEYS,
    MetricReport,
    RankedInstance,
    TestPositive,
    build_instances,
    metric_report,
    split_train_test,
)
from fedcourse.federation import (
    FedConfig,
    SchoolClient,
    TrainingResult,
    Transport,
    run_training,
)
from fedcourse.hetgraph import build_graph, edge_list_lines
from fedcourse.rng import substream
from fedcourse.synth import generate_synthetic
from fedcourse.tensorio import checkpoint_bytes, load_checkpoint
from fedcourse.textenc import HashingEncoder

SWEEP_AXES = ("embedding_dim", "attention_heads")


@dataclass
class SchoolBundle:
    """One school's full data, its split, and derived eval bookkeeping."""

    full: SchoolDataset
    train: SchoolDataset
    test_positives: tuple[TestPositive, ...]
    all_positives: dict[int, set[int]]


@dataclass
class Experiment:
    config: ExperimentConfig
    catalog: Catalog
    bundles: list[SchoolBundle]
    clients: list[SchoolClient]
    content: ContentFeatures


def load_datasets(cfg: ExperimentConfig) -> list[SchoolDataset]:
    if cfg.data.source == "synthetic":
        return generate_synthetic(cfg.data.synthetic.to_synth_config(), cfg.seed)
    assert cfg.data.files is not None
    catalog = load_catalog(cfg.data.files.catalog)
    return [
        load_school(path, catalog, school_id)
        for school_id, path in enumerate(cfg.data.files.schools)
    ]


def _all_positives(ds: SchoolDataset) -> dict[int, set[int]]:
    positives: dict[int, set[int]] = {}
    for it in ds.interactions:
        if it.kind is InteractionKind.ENROLLMENT:
            positives.setdefault(it.student, set()).add(it.course)
    return positives


def prepare_experiment(cfg: ExperimentConfig) -> Experiment:
    datasets = load_datasets(cfg)
    if not datasets:
        raise ConfigError("no school datasets configured")
    catalog = datasets[0].catalog

    bundles: list[SchoolBundle] = []
    for ds in datasets:
        train_ds, test_positives = split_train_test(ds)
        bundles.append(
            SchoolBundle(
                full=ds,
                train=train_ds,
                test_positives=test_positives,
                all_positives=_all_positives(ds),
            )
        )

    encoder_cfg = cfg.model.to_encoder_config()
    text_encoder = HashingEncoder(
        raw_dim=cfg.model.raw_dim, ngram=cfg.model.ngram, seed=cfg.model.hash_seed
    )
    content = build_content(catalog, text_encoder)

    init_rng = substream(cfg.seed, "init", "shared")
    params = init_encoder_params(catalog.n_courses, catalog.n_activities, encoder_cfg, init_rng)

    clients: list[SchoolClient] = []
    for bundle in bundles:
        sid = bundle.train.school_id
        student_rng = substream(cfg.seed, "init", "students", sid)
        table = init_student_table(bundle.train.n_students, encoder_cfg.dim, student_rng)
        clients.append(
            SchoolClient(
                school_id=sid,
                train_ds=bundle.train,
                encoder_params=params,
                student_table=table,
                content=content,
                mf_cfg=cfg.objective.to_conmf_config(),
                seed=cfg.seed,
                coupling=cfg.objective.coupling,
                batch_size=cfg.objective.batch_size,
                local_epochs=cfg.federation.local_epochs,
                clip_norm=cfg.federation.clip_norm,
            )
        )
    return Experiment(config=cfg, catalog=catalog, bundles=bundles, clients=clients, content=content)


def evaluate_experiment(exp: Experiment) -> tuple[MetricReport, list[RankedInstance]]:
    """Pool ranked instances from every school and compute the report."""
    cfg = exp.config
    instances: list[RankedInstance] = []
    for bundle, client in zip(exp.bundles, exp.clients):
        if not bundle.test_positives:
            continue
        e_s, e_c = client.representations()
        scores = predict(e_s, e_c)
        instances.extend(
            build_instances(
                bundle.test_positives,
                scores,
                bundle.all_positives,
                exp.catalog.n_courses,
                cfg.eval.negatives,
                cfg.seed,
                client.school_id,
            )
        )
    if not instances:
        raise DatasetError("no test instances; every student lacks a held-out enrollment")
    return metric_report(instances), instances


def trained_checkpoint(exp: Experiment, result: TrainingResult) -> bytes:
    """Serialize the trained model; byte-stable for a fixed config+seed."""
    cfg = exp.config
    meta = {
        "coupling": cfg.objective.coupling,
        "dim": cfg.model.dim,
        "seed": cfg.seed,
        "rounds_run": result.rounds_run,
        "schools": [c.school_id for c in exp.clients],
        "student_ids": {str(b.full.school_id): list(b.full.student_ids) for b in exp.bundles},
        "course_ids": list(exp.catalog.course_ids),
    }
    tensors: dict[str, np.ndarray] = dict(result.shared)
    for bundle, client in zip(exp.bundles, exp.clients):
        sid = client.school_id
        e_s, e_c = client.representations()
        seen = np.zeros((bundle.full.n_students, exp.catalog.n_courses))
        for student, courses in bundle.all_positives.items():
            for c in courses:
                seen[student, c] = 1.0
        tensors[f"school/{sid}/student_table"] = (
            client.student_table if client.coupling == "end_to_end" else client.student_factors
        )
        tensors[f"school/{sid}/rep_students"] = e_s
        tensors[f"school/{sid}/rep_courses"] = e_c
        tensors[f"school/{sid}/seen"] = seen
    return checkpoint_bytes(meta, tensors)


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path) -> dict:
    """Execute the full pipeline; returns the report (also written to disk)."""
    started = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    exp = prepare_experiment(cfg)
    transport = Transport()
    t_train = time.perf_counter()
    result = run_training(exp.clients, cfg.federation.to_fed_config(), cfg.seed, transport)
    train_seconds = time.perf_counter() - t_train

    for client in exp.clients:
        client.adopt_shared(result.shared)

    report_metrics, _ = evaluate_experiment(exp)

    metrics_path = out / "metrics.json"
    metrics_path.write_text(report_metrics.to_json(), encoding="utf-8")

    rounds_path = out / "rounds.jsonl"
    with open(rounds_path, "w", encoding="utf-8") as fh:
        for record in result.round_log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    checkpoint_path = out / "checkpoint.bin"
    checkpoint_path.write_bytes(trained_checkpoint(exp, result))

    report = {
        "config": cfg.model_dump(),
        "rounds_run": result.rounds_run,
        "n_schools": len(exp.clients),
        "n_messages": len(transport.frames),
        "metrics": report_metrics.to_dict(),
        "timings": {
            "train_s": train_seconds,
            "total_s": time.perf_counter() - started,
        },
        "artifacts": {
            "metrics": str(metrics_path),
            "rounds": str(rounds_path),
            "checkpoint": str(checkpoint_path),
        },
    }
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return report


def run_sweep(cfg: ExperimentConfig, axis: str, values: list[int], out_dir: str | Path) -> dict:
    """One run per value; config errors are recorded per cell, not fatal."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows: list[dict] = []
    for value in values:
        data = cfg.model_dump()
        if axis == "embedding_dim":
            data["model"]["dim"] = int(value)
        else:
            data["model"]["heads"] = int(value)
        row: dict = {"axis": axis, "value": int(value), "status": "ok", "error": ""}
        cell_dir = out / f"{axis}_{value}"
        try:
            cell_cfg = config_from_dict(data)
            report = run_experiment(cell_cfg, cell_dir)
            row.update(report["metrics"])
            row["rounds_run"] = report["rounds_run"]
        except ConfigError as exc:
            row["status"] = "error"
            row["error"] = str(exc).splitlines()[0]
        rows.append(row)

    columns = ["axis", "value", "status", "error", *METRIC_KEYS, "rounds_run"]
    csv_path = out / "sweep.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return {"axis": axis, "rows": rows, "csv": str(csv_path)}


def recommend_from_checkpoint(
    checkpoint_path: str | Path, school_id: int, student_id: int, k: int
) -> list[dict]:
    """Top-k unseen courses for one student from a saved checkpoint."""
    if k < 0:
        raise ConfigError("k must be nonnegative")
    meta, tensors = load_checkpoint(checkpoint_path)
    if school_id not in meta["schools"]:
        raise LookupError(f"school {school_id} not in checkpoint (has {meta['schools']})")
    student_ids: list[int] = meta["student_ids"][str(school_id)]
    if student_id not in student_ids:
        raise LookupError(f"student {student_id} not found in school {school_id}")
    row = student_ids.index(student_id)

    e_s = tensors[f"school/{school_id}/rep_students"]
    e_c = tensors[f"school/{school_id}/rep_courses"]
    seen = tensors[f"school/{school_id}/seen"][row].astype(bool)
    scores = e_s[row] @ e_c.T
    course_ids = meta["course_ids"]

    candidates = [
        (float(scores[c]), int(course_ids[c]))
        for c in range(len(course_ids))
        if not seen[c]
    ]
    candidates.sort(key=lambda item: (-item[0], item[1]))
    return [{"course": cid, "score": score} for score, cid in candidates[:k]]


def generate_data_files(cfg: ExperimentConfig, out_dir: str | Path) -> dict:
    """Materialize the configured synthetic data as CSV + catalog files."""
    if cfg.data.source != "synthetic":
        raise ConfigError("gen-data needs data.source = synthetic")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    datasets = generate_synthetic(cfg.data.synthetic.to_synth_config(), cfg.seed)
    catalog_path = out / "catalog.tsv"
    save_catalog(datasets[0].catalog, catalog_path)
    school_paths: list[str] = []
    for ds in datasets:
        path = out / f"school_{ds.school_id}.csv"
        save_school(ds, path)
        school_paths.append(str(path))
    return {"catalog": str(catalog_path), "schools": school_paths}


def inspect_graph_info(cfg: ExperimentConfig, school_id: int) -> dict:
    """Node/edge summary plus a text edge dump for one school's graph."""
    datasets = load_datasets(cfg)
    matches = [ds for ds in datasets if ds.school_id == school_id]
    if not matches:
        raise LookupError(f"no school {school_id}; have {[d.school_id for d in datasets]}")
    graph = build_graph(matches[0])
    by_type: dict[str, int] = {}
    for t in graph.node_types:
        by_type[t.value] = by_type.get(t.value, 0) + 1
    edge_types: dict[str, int] = {}
    for _, _, etype in graph.edges:
        edge_types[etype.value] = edge_types.get(etype.value, 0) + 1
    return {
        "school_id": school_id,
        "n_nodes": graph.n_nodes,
        "n_edges": graph.n_edges,
        "nodes_by_type": by_type,
        "edges_by_type": edge_types,
        "edge_list": edge_list_lines(graph),
    }
