"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The reference experiment uses the default config (12 identities, two
sub-clusters each, 40 samples per identity, 16-d inputs, 8-d embeddings, 5%
planted outliers, half of the identities for the old model) on seeds 1..5.
"""

import json
import time

import numpy as np
import pytest

from conftest import record
from oracles import oracle_criterion, oracle_l1, oracle_map

from nccl_lab import model
from nccl_lab.bank import build_bank
from nccl_lab.config import default_config, load_config, validate
from nccl_lab.credibility import apply_filter, class_stats, entropy, pseudo_assignment, threshold_for
from nccl_lab.data import generate, id_split
from nccl_lab.evaluation import RetrievalTask, criterion_report, cross_test, evaluate, self_test
from nccl_lab.losses import loss_classification, loss_l1, loss_l2_discriminative, loss_l2_regression
from nccl_lab.numeric import finite_diff_grad
from nccl_lab.pipeline import run_experiment, run_sweep, validate_metrics
from nccl_lab.trainer import TrainingConfig, train, train_old

SEEDS = (1, 2, 3, 4, 5)
MODES = ("nccl", "independent", "l2_regression")
SUITE_START = time.perf_counter()


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))


def _instance(rng):
    d, n = int(rng.integers(2, 7)), int(rng.integers(2, 11))
    k = int(rng.integers(1, n + 1))
    pos = sorted(rng.choice(n, size=k, replace=False).tolist())
    return rng.normal(size=d), rng.normal(size=(n, d)), pos, rng.uniform(0, 1, size=k), float(rng.uniform(0.2, 2.0))


@pytest.fixture(scope="module")
def reference():
    """Old model, filtered bank and every training mode for each seed."""
    rows = {}
    for seed in SEEDS:
        rc = validate(load_config(seed=seed))
        ds = generate(rc.data)
        d_old, d_new = id_split(ds, rc.old_fraction, rc.overlap, seed=seed)
        enc_old, _ = train_old(rc.train_old, d_old.samples, d_old.n_classes)
        bank = build_bank(enc_old, d_new.samples)
        stats = class_stats(bank, d_new.n_classes, spread=rc.spread)
        H = entropy(pseudo_assignment(stats, bank.embeddings))
        filtered, _ = apply_filter(bank, stats, threshold_for(d_new.n_classes, rc.train_new.threshold_factor))
        q, g = ds.split("query"), ds.split("gallery")
        row = {"old_old": self_test(enc_old, q, g).mAP, "bank": bank, "stats": stats, "H": H,
               "filtered": filtered, "outlier": np.array([s.outlier for s in d_new.samples]),
               "K": d_new.n_classes}
        for mode in MODES:
            cfg_mode = TrainingConfig(**{**rc.train_new.to_dict(), "mode": mode})
            state = train(cfg_mode, d_new.samples, filtered, d_new.n_classes)
            row[mode] = (self_test(state.encoder, q, g).mAP, cross_test(state.encoder, enc_old, q, g).mAP)
        rows[seed] = row
    return rows


def test_criterion_01_gradient_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    errs = {"L1": [], "L2": [], "L_new": [], "L2_regression": []}
    for _ in range(50):
        a, c, p, w, tau = _instance(rng)
        errs["L1"].append(_rel(loss_l1(a, c, p, w, tau).grad,
                               finite_diff_grad(lambda x: loss_l1(x, c, p, w, tau).value, a, 1e-5)))
        a, c, p, w, tau = _instance(rng)
        errs["L2"].append(_rel(loss_l2_discriminative(a, c, p, w, tau).grad,
                               finite_diff_grad(lambda x: loss_l2_discriminative(x, c, p, w, tau).value, a, 1e-5)))
        z = rng.normal(size=int(rng.integers(2, 9)))
        y = int(rng.integers(0, len(z)))
        errs["L_new"].append(_rel(loss_classification(z, y).grad,
                                  finite_diff_grad(lambda x: loss_classification(x, y).value, z, 1e-5)))
        u, v = rng.normal(size=(2, int(rng.integers(2, 9))))
        errs["L2_regression"].append(_rel(loss_l2_regression(u, v).grad,
                                          finite_diff_grad(lambda x: loss_l2_regression(x, v).value, u, 1e-5)))
    elapsed = time.perf_counter() - start
    worst = {k: max(v) for k, v in errs.items()}
    ok = all(len(v) >= 50 for v in errs.values()) and max(worst.values()) < 1e-4 and elapsed < 10
    record(1, "gradient suite", ok,
           ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items()) + f"; 4x50 instances in {elapsed:.2f}s")
    assert ok


def test_criterion_02_formula_oracles():
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(100):
        a, c, p, w, tau = _instance(rng)
        worst = max(worst, abs(loss_l1(a, c, p, w, tau).value - oracle_l1(a, c, p, w, tau).value))
        a, c, p, w, tau = _instance(rng)
        worst = max(worst, abs(loss_l2_discriminative(a, c, p, w, tau).value
                               - oracle_l1(a, c, p, w, tau, normalize=False).value))
    exact = 0
    for trial in range(25):
        r = np.random.default_rng(trial)
        nq, ng, d = int(r.integers(1, 21)), int(r.integers(5, 51)), int(r.integers(2, 6))
        g_labels = r.integers(0, 3, size=ng)
        g_labels[:3] = [0, 1, 2]
        q_labels = r.integers(0, 3, size=nq)
        q = r.normal(size=(nq, d))
        g = r.normal(size=(5, d))[r.integers(0, 5, size=ng)]
        m = evaluate(RetrievalTask(np.arange(nq), q_labels, q, np.arange(ng) + 100, g_labels, g))
        ref, cmc = oracle_map(q.tolist(), q_labels.tolist(), g.tolist(), g_labels.tolist(), list(range(100, 100 + ng)))
        exact += (abs(m.mAP - ref.value) < 1e-12) and m.cmc == cmc
    ok = worst < 1e-9 and exact == 25
    record(2, "formula oracles", ok, f"max |loss - oracle| {worst:.1e} over 200 instances; mAP/CMC exact on {exact}/25 tasks")
    assert ok


def test_criterion_03_filter_properties(reference):
    bounds_ok, mono_ok, lines, per_seed_ok = True, True, [], []
    for seed, row in reference.items():
        H, K = row["H"], row["K"]
        bounds_ok &= bool(np.all(H >= 0) and np.all(H <= np.log(K) + 1e-9))
        prev = None
        for f in np.linspace(0.05, 1.0, 20):
            removed = H > threshold_for(K, f)
            if prev is not None:
                mono_ok &= bool(np.all(removed <= prev))
            prev = removed
        removed = ~row["filtered"].credible
        out = row["outlier"]
        recall, inlier = removed[out].mean(), removed[~out].mean()
        per_seed_ok.append(recall >= 0.70 and inlier <= 0.20)
        lines.append(f"s{seed} {recall:.0%}/{inlier:.0%}")
    ok = bounds_ok and mono_ok and all(per_seed_ok)
    record(3, "filter properties", ok,
           f"bounds {'ok' if bounds_ok else 'violated'}, monotone {'ok' if mono_ok else 'violated'}; "
           f"outliers/inliers removed: {' '.join(lines)} (need >=70%/<=20% on every seed)")
    assert ok


def test_criterion_04_goal_inequality(reference):
    goal = [r["nccl"][0] >= r["nccl"][1] >= r["old_old"] for r in reference.values()]
    ind_fail = [not (r["independent"][1] >= r["old_old"]) for r in reference.values()]
    ok = sum(goal) >= 4 and sum(ind_fail) >= 3
    detail = " ".join(f"s{s}: {r['nccl'][0]:.3f}>={r['nccl'][1]:.3f}>={r['old_old']:.3f} ind {r['independent'][1]:.3f}"
                      for s, r in reference.items())
    record(4, "goal inequality", ok, f"nccl holds on {sum(goal)}/5, independent fails on {sum(ind_fail)}/5; {detail}")
    assert ok


def test_criterion_05_regression_baseline(reference):
    below = [r["l2_regression"][1] < r["nccl"][1] for r in reference.values()]
    ok = sum(below) >= 4
    detail = " ".join(f"s{s}: {r['l2_regression'][1]:.3f}<{r['nccl'][1]:.3f}" for s, r in reference.items())
    record(5, "L2-regression below nccl cross-test", ok, f"{sum(below)}/5; {detail}")
    assert ok


def test_criterion_06_criterion_contrast():
    ang = np.deg2rad([0, 20, 90, 110])
    old = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    new = old.copy()
    new[0] = [np.cos(np.deg2rad(-30)), np.sin(np.deg2rad(-30))]
    labels = [0, 0, 1, 1]
    rep = criterion_report(new, old, labels)
    eq3, eq12 = oracle_criterion(new.tolist(), old.tolist(), labels)
    rng = np.random.default_rng(0)
    same = rng.normal(size=(20, 4))
    ident = criterion_report(same, same, np.arange(20) % 4)
    ok = rep.eq3_rate == 1.0 and rep.eq12_rate < 1.0 and ident.eq12_rate == 1.0 and \
        (eq3.value, eq12.value) == (rep.eq3_rate, rep.eq12_rate)
    record(6, "criterion contrast", ok,
           f"constructed instance eq3={rep.eq3_rate} eq12={rep.eq12_rate:.3f}; new=old eq12={ident.eq12_rate}")
    assert ok


def test_criterion_07_no_overlap_protocol(tmp_path):
    cfg = load_config(overrides=["split.overlap=false", "split.old_fraction=0.25"])
    before = model.CLASSIFY_CALLS["old"]
    doc = run_experiment(cfg, tmp_path)
    reads = doc["instrumentation"]["old_classifier_reads_during_new_training"]
    problems = validate_metrics(json.loads((tmp_path / "metrics.json").read_text()))
    disjoint = not set(doc["data"]["old_classes"]) & set(doc["data"]["new_classes"])
    ok = reads == 0 and not problems and disjoint and doc["data"]["k_old"] == 3
    record(7, "no-overlap protocol", ok,
           f"25%/75% split, old-head reads during new training {reads} "
           f"(old head used {model.CLASSIFY_CALLS['old'] - before}x while training the old model), "
           f"schema problems {problems or 'none'}")
    assert ok


def test_criterion_08_determinism(tmp_path):
    from nccl_lab.cli import main
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--out", str(a)]) == 0
    assert main(["run", "--out", str(b)]) == 0

    def strip(p):
        doc = json.loads((p / "metrics.json").read_text())
        doc.pop("timestamps")
        return json.dumps(doc)

    same_metrics = strip(a) == strip(b)
    files = ["old_model.json", "new_model.json", "bank.jsonl", "embeddings_new.jsonl", "embeddings_old.jsonl"]
    same_files = [f for f in files if (a / f).read_bytes() == (b / f).read_bytes()]
    ok = same_metrics and len(same_files) == len(files)
    record(8, "determinism", ok, f"metrics identical modulo timestamps: {same_metrics}; "
           f"byte-identical artifacts {len(same_files)}/{len(files)}")
    assert ok


def test_criterion_09_sweep_robustness(tmp_path, reference):
    rows = run_sweep(default_config(), [0.005, 0.01, 0.015], [0.2, 0.5, 1.0], tmp_path)
    cross = [r["cross_mAP"] for r in rows if r["status"] == "ok"]
    spread = max(cross) - min(cross)
    ref = reference[1]
    gap = ref["nccl"][1] - ref["independent"][1]
    ok = len(cross) == 9 and spread < gap
    record(9, "sweep robustness", ok,
           f"cross-test mAP over 9 points in [{min(cross):.3f}, {max(cross):.3f}], spread {spread:.3f} "
           f"vs nccl-independent gap {gap:.3f} (seed 1)")
    assert ok


def test_criterion_10_wall_clock():
    elapsed = time.perf_counter() - SUITE_START
    ok = elapsed < 300
    record(10, "acceptance wall-clock", ok, f"{elapsed:.1f}s for the whole module (limit 300s)")
    assert ok
