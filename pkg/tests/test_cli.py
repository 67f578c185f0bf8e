import csv
import json

import numpy as np
import pytest

from nccl_lab.cli import main
from nccl_lab.config import config_hash
from nccl_lab.model import encode, load_checkpoint
from nccl_lab.pipeline import read_embeddings, validate_metrics

TINY = [
    "--set", "data.n_classes=4", "--set", "data.samples_per_class=10", "--set", "data.d_in=4",
    "--set", "train_old.epochs_stage1=3", "--set", "train_old.epochs_stage2=0",
    "--set", "train_new.epochs_stage1=3", "--set", "train_new.epochs_stage2=1",
    "--set", "train_old.hidden=6", "--set", "train_new.hidden=6",
]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run", "--out", str(out), *TINY]) == 0
    return out


def test_generate(tmp_path):
    out = tmp_path / "d.jsonl"
    assert main(["generate", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 480
    first = out.read_bytes()
    assert main(["generate", "--out", str(out)]) == 0
    assert out.read_bytes() == first


def test_generate_bad_fraction(tmp_path, capsys):
    code = main(["generate", "--out", str(tmp_path / "d.jsonl"), "--set", "data.split_fractions=[0.6,0.3,0.3]"])
    assert code == 2
    assert "split_fractions" in capsys.readouterr().err


def test_unknown_key_is_config_error(tmp_path):
    assert main(["run", "--out", str(tmp_path), "--set", "train_new.gamma=1"]) == 2


def test_missing_config_file_is_io_error(tmp_path):
    assert main(["run", "--out", str(tmp_path), "--config", str(tmp_path / "absent.json")]) == 4


def test_run_artifacts_and_schema(run_dir):
    for name in ("metrics.json", "old_model.json", "new_model.json", "bank.jsonl", "dataset.jsonl",
                 "embeddings_old.jsonl", "embeddings_new.jsonl"):
        assert (run_dir / name).exists(), name
    doc = json.loads((run_dir / "metrics.json").read_text())
    assert validate_metrics(doc) == []
    assert doc["run"]["config_hash"] == config_hash(doc["config"])
    assert doc["instrumentation"]["old_classifier_reads_during_new_training"] == 0
    assert doc["instrumentation"]["frozen_classifier_unchanged"] is True


def test_independent_mode_history(tmp_path):
    assert main(["run", "--out", str(tmp_path), *TINY, "--set", "train_new.mode=independent"]) == 0
    doc = json.loads((tmp_path / "metrics.json").read_text())
    assert all(h["l1"] == 0.0 and h["l2"] == 0.0 for h in doc["loss_history"]["new"])


def test_divergence_exit_code_and_partial_metrics(tmp_path):
    code = main(["run", "--out", str(tmp_path), *TINY, "--set", "train_new.learning_rate=1e200"])
    assert code == 3
    doc = json.loads((tmp_path / "metrics.json").read_text())
    assert doc["complete"] is False and doc["error"]


def test_dump_embeddings(run_dir, tmp_path):
    out = tmp_path / "e.jsonl"
    args = ["dump-embeddings", str(run_dir / "new_model.json"), str(run_dir / "dataset.jsonl"), "--out", str(out)]
    assert main(args + ["--split", "query"]) == 0
    ids, labels, vecs = read_embeddings(out)
    rows = [json.loads(line) for line in (run_dir / "dataset.jsonl").read_text().splitlines()]
    query = [r for r in rows if r["split"] == "query"]
    assert len(ids) == len(query)
    enc, _, _ = load_checkpoint(run_dir / "new_model.json")
    assert np.array_equal(vecs, encode(enc, np.array([r["x"] for r in query])))
    first = out.read_bytes()
    assert main(args + ["--split", "query"]) == 0
    assert out.read_bytes() == first


def test_dump_shape_mismatch(run_dir, tmp_path):
    data = tmp_path / "wide.jsonl"
    assert main(["generate", "--out", str(data), "--set", "data.d_in=7"]) == 0
    assert main(["dump-embeddings", str(run_dir / "new_model.json"), str(data), "--out", str(tmp_path / "x")]) == 2


def test_criterion_command(run_dir, tmp_path):
    out = tmp_path / "crit.json"
    assert main(["criterion", str(run_dir / "embeddings_new.jsonl"), str(run_dir / "embeddings_old.jsonl"),
                 "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    doc = json.loads((run_dir / "metrics.json").read_text())
    assert rep == doc["criterion_report"]


def test_filter_report_command(run_dir, tmp_path):
    out = tmp_path / "f.json"
    assert main(["filter-report", str(run_dir / "bank.jsonl"), "--factor", "1.0", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["removed_total"] == 0


def test_sweep_grid(tmp_path):
    assert main(["sweep", "--out", str(tmp_path), *TINY, "--alpha-beta", "0.005,0.01,0.015",
                 "--factors", "0.2,0.5,1.0"]) == 0
    with open(tmp_path / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 9 and all(r["status"] == "ok" for r in rows)
    assert len(list(tmp_path.glob("*/metrics.json"))) == 9


def test_single_point_sweep_equals_run(tmp_path, run_dir):
    assert main(["sweep", "--out", str(tmp_path), *TINY, "--alpha-beta", "0.01", "--factors", "0.5"]) == 0
    (point,) = list(tmp_path.glob("*/metrics.json"))
    a = json.loads(point.read_text())
    b = json.loads((run_dir / "metrics.json").read_text())
    for key in ("self_test", "cross_test", "criterion_report", "filter_report", "loss_history"):
        assert a[key] == b[key]


def test_sweep_continues_past_failures(tmp_path):
    assert main(["sweep", "--out", str(tmp_path), *TINY, "--set", "train_new.learning_rate=1e200",
                 "--alpha-beta", "0.01", "--factors", "0.5,1.0"]) == 0
    with open(tmp_path / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and all(r["status"].startswith("failed") for r in rows)
