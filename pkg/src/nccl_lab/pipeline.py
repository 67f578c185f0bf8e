"""generate -> train old -> bank + filter -> train new -> evaluate."""

from __future__ import annotations

import csv
import datetime as _dt
import json
import logging
from pathlib import Path

import numpy as np

from . import model
from .bank import build_bank, dump_bank
from .config import config_hash, validate
from .credibility import apply_filter, class_stats, threshold_for
from .data import Dataset, generate, id_split, write_dataset
from .errors import LabError
from .evaluation import align_dims, criterion_report, evaluate, make_task
from .model import encode, save_checkpoint
from .numeric import make_rng
from .trainer import classifier_bytes, train, train_old

log = logging.getLogger(__name__)

METRICS_SCHEMA = "nccl-lab-metrics/1"
REQUIRED_KEYS = ("schema", "complete", "run", "config", "timestamps", "data", "filter_report",
                 "loss_history", "self_test", "cross_test", "criterion_report", "instrumentation")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def dump_embeddings(path, samples, embeddings) -> None:
    with open(path, "w") as fh:
        for s, v in zip(samples, embeddings):
            fh.write(json.dumps({"id": s.id, "label": s.label, "v": [float(x) for x in v]}) + "\n")


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ids, labels, vecs = [], [], []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            r = json.loads(line)
            ids.append(int(r["id"]))
            labels.append(int(r["label"]))
            vecs.append(r["v"])
    return np.array(ids, dtype=np.int64), np.array(labels, dtype=np.int64), np.asarray(vecs, dtype=np.float64)


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def _history(state):
    return [{k: h[k] for k in ("epoch", "stage", "l_new", "l1", "l2", "l2_reg", "total", "skipped_anchors")}
            for h in state.loss_history]


def _skeleton(cfg: dict) -> dict:
    return {
        "schema": METRICS_SCHEMA,
        "complete": False,
        "error": None,
        "run": {"name": cfg.get("name"), "config_hash": config_hash(cfg), "seed": cfg["data"]["seed"],
                "mode": cfg["train_new"]["mode"]},
        "config": cfg,
        "timestamps": {"started": _now(), "finished": None},
        "data": None,
        "filter_report": None,
        "loss_history": None,
        "self_test": None,
        "cross_test": None,
        "criterion_report": None,
        "instrumentation": None,
    }


def run_experiment(cfg: dict, out_dir, dataset: Dataset | None = None) -> dict:
    """Full pipeline; writes metrics.json, checkpoints, bank and embedding dumps.

    On failure a metrics file with ``complete: false`` is written and the
    error re-raised.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = _skeleton(cfg)
    try:
        _run(cfg, out, dataset, doc)
    except (LabError, IndexError, OSError) as exc:
        doc["error"] = f"{type(exc).__name__}: {exc}"
        doc["timestamps"]["finished"] = _now()
        write_json(out / "metrics.json", doc)
        raise
    doc["complete"] = True
    doc["timestamps"]["finished"] = _now()
    write_json(out / "metrics.json", doc)
    return doc


def _run(cfg: dict, out: Path, dataset: Dataset | None, doc: dict) -> None:
    rc = validate(cfg)
    chash = doc["run"]["config_hash"]
    if dataset is None:
        dataset = generate(rc.data)
        write_dataset(dataset, out / "dataset.jsonl")
    d_old, d_new = id_split(dataset, rc.old_fraction, rc.overlap, seed=rc.data.seed)
    queries, gallery = dataset.split("query"), dataset.split("gallery")

    enc_old, clf_old = train_old(rc.train_old, d_old.samples, d_old.n_classes)
    save_checkpoint(out / "old_model.json", enc_old, clf_old, rc.train_old.seed, chash)

    # everything below is the new-model path; it must never touch the old head
    old_reads_before = model.CLASSIFY_CALLS[clf_old.tag]
    bank = build_bank(enc_old, d_new.samples)
    stats = class_stats(bank, d_new.n_classes, spread=rc.spread)
    threshold = threshold_for(d_new.n_classes, rc.train_new.threshold_factor)
    bank, report = apply_filter(bank, stats, threshold)
    dump_bank(bank, out / "bank.jsonl")

    planted = np.array([s.outlier for s in d_new.samples])
    removed = ~bank.credible
    filt = report.to_dict()
    filt["planted_outliers"] = int(planted.sum())
    filt["planted_removed_fraction"] = float(removed[planted].mean()) if planted.any() else None
    filt["inlier_removed_fraction"] = float(removed[~planted].mean()) if (~planted).any() else None
    doc["filter_report"] = filt

    state = train(rc.train_new, d_new.samples, bank, d_new.n_classes, tag="new")
    old_reads = model.CLASSIFY_CALLS[clf_old.tag] - old_reads_before
    save_checkpoint(out / "new_model.json", state.encoder, state.classifier, rc.train_new.seed, chash)

    doc["data"] = {
        "n_samples": len(dataset.samples),
        "n_query": len(queries),
        "n_gallery": len(gallery),
        "k_old": d_old.n_classes,
        "k_new": d_new.n_classes,
        "old_classes": sorted(d_old.label_map),
        "new_classes": sorted(d_new.label_map),
        "n_train_old": len(d_old.samples),
        "n_train_new": len(d_new.samples),
        "overlap": rc.overlap,
    }
    doc["loss_history"] = {"new": _history(state)}

    q_new = encode(state.encoder, np.stack([s.x for s in queries]))
    g_new = encode(state.encoder, np.stack([s.x for s in gallery]))
    q_old = encode(enc_old, np.stack([s.x for s in queries]))
    g_old = encode(enc_old, np.stack([s.x for s in gallery]))
    dim = q_new.shape[1]

    def metrics(qe, ge):
        return evaluate(make_task(queries, qe, gallery, ge, rc.distance), rc.cmc_ks).to_dict()

    doc["self_test"] = {"old": metrics(q_old, g_old), "new": metrics(q_new, g_new)}
    doc["cross_test"] = {"new_old": metrics(q_new, align_dims(g_old, dim))}

    eval_samples = queries + gallery
    new_all = np.vstack([q_new, g_new])
    old_all = np.vstack([q_old, g_old])
    dump_embeddings(out / "embeddings_new.jsonl", eval_samples, new_all)
    dump_embeddings(out / "embeddings_old.jsonl", eval_samples, old_all)
    crit = criterion_report(new_all, align_dims(old_all, dim), [s.label for s in eval_samples],
                            rc.max_triplets, make_rng(rc.data.seed, "criterion"), rc.distance)
    doc["criterion_report"] = crit.to_dict()

    frozen_ok = None
    fingerprint_ok = None
    if state.classifier_frozen:
        frozen_ok = state.frozen_snapshot == classifier_bytes(state.classifier)
        fingerprint_ok = state.discriminative_fingerprint == state.classifier.fingerprint()
    doc["instrumentation"] = {
        "old_classifier_reads_during_new_training": int(old_reads),
        "noncredible_in_candidates": int(state.counters["noncredible_in_candidates"]),
        "skipped_anchors_total": int(state.counters["skipped_anchors"]),
        "classifier_frozen": state.classifier_frozen,
        "frozen_classifier_unchanged": frozen_ok,
        "discriminative_fingerprint_matches": fingerprint_ok,
    }


def run_sweep(cfg: dict, alpha_betas, factors, out_dir) -> list[dict]:
    """One run per (alpha=beta, threshold factor) point plus summary.csv.

    Failed points are recorded and the sweep continues.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for ab in alpha_betas:
        for f in factors:
            point = json.loads(json.dumps(cfg))
            point["train_new"]["alpha"] = ab
            point["train_new"]["beta"] = ab
            point["train_new"]["threshold_factor"] = f
            point["name"] = f"{cfg.get('name', 'run')}_ab{ab}_u{f}"
            point_dir = out / point["name"]
            row = {"alpha_beta": ab, "threshold_factor": f, "status": "ok",
                   "self_old_mAP": None, "self_new_mAP": None, "cross_mAP": None,
                   "metrics": str(Path(point["name"]) / "metrics.json")}
            try:
                doc = run_experiment(point, point_dir)
                row["self_old_mAP"] = doc["self_test"]["old"]["mAP"]
                row["self_new_mAP"] = doc["self_test"]["new"]["mAP"]
                row["cross_mAP"] = doc["cross_test"]["new_old"]["mAP"]
            except (LabError, IndexError, OSError) as exc:
                log.warning("sweep point %s failed: %s", point["name"], exc)
                row["status"] = f"failed: {type(exc).__name__}"
            rows.append(row)
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return rows


def validate_metrics(doc: dict) -> list[str]:
    """Schema problems of a finished metrics document (empty list if valid)."""
    problems = [f"missing key {k}" for k in REQUIRED_KEYS if k not in doc]
    if problems:
        return problems
    if doc["schema"] != METRICS_SCHEMA:
        problems.append("wrong schema tag")
    if doc["complete"] is not True:
        problems.append("run incomplete")
    for side in ("old", "new"):
        m = (doc["self_test"] or {}).get(side)
        if not m or not isinstance(m.get("mAP"), float) or not isinstance(m.get("cmc"), dict):
            problems.append(f"self_test.{side} malformed")
    m = (doc["cross_test"] or {}).get("new_old")
    if not m or not isinstance(m.get("mAP"), float):
        problems.append("cross_test.new_old malformed")
    crit = doc["criterion_report"] or {}
    for k, t in (("eq3_rate", (float, type(None))), ("eq12_rate", (float, type(None))),
                 ("triplet_count", int), ("pair_count", int), ("sampled", bool)):
        if not isinstance(crit.get(k, "missing"), t):
            problems.append(f"criterion_report.{k} malformed")
    filt = doc["filter_report"] or {}
    for k in ("removed_total", "removed_per_class", "entropy_min", "entropy_median", "entropy_max", "threshold"):
        if k not in filt:
            problems.append(f"filter_report.{k} missing")
    hist = (doc["loss_history"] or {}).get("new")
    if not isinstance(hist, list):
        problems.append("loss_history.new missing")
    if not isinstance(doc["run"].get("config_hash"), str):
        problems.append("run.config_hash missing")
    return problems
