"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are also
repeated in the terminal summary.
"""

import json
import math
import time

import numpy as np
import pytest

from acceptance_log import record
from hccf import cli
from hccf import data as D
from hccf.evaluation import evaluate, grad_curve, hard_negative_norm, popularity_scores
from hccf.model import (
    ModelConfig,
    expected_extra_params,
    forward,
    hyper_propagate,
    hyper_structure,
    init_params,
    pair_scores,
)
from hccf.numcore import SparseMatrix, Tensor
from hccf.objective import LossConfig, infonce_loss, margin_loss, total_loss
from test_evaluation import oracle_metrics, random_instance
from test_model import loop_matmul, lrelu
from tiny import SYNTHETIC, tiny_gradient_check


# ------------------------------------------------------------------ 1

def test_c1_gradient_correctness():
    t0 = time.perf_counter()
    worst = tiny_gradient_check()
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 10
    record(1, ok, f"worst relative error {worst:.2e} (< 1e-4), runtime {elapsed:.2f}s (< 10s)")
    assert ok


# ------------------------------------------------------------------ 2

BACKGROUND = 5000


def swept_norm(x, tau):
    """hard_negative_norm of one swept negative; normalization held by orthogonal background."""
    z = np.array([1.0, 0.0, 0.0])
    g = np.zeros((BACKGROUND + 2, 3))
    g[0] = z
    g[1] = [x, 0.0, math.sqrt(max(0.0, 1 - x * x))]
    g[2:, 1] = 1.0
    return hard_negative_norm(z, g, 0, tau)[1]


def test_c2_gradient_curve():
    worst = 0.0
    for tau in (0.3, 1.0, 3.0):
        ratios = [swept_norm(x, tau) / grad_curve(tau, [x]).norm[0] for x in (0.0, 0.3, 0.6, 0.9)]
        worst = max(worst, (max(ratios) - min(ratios)) / min(ratios))
    xs = np.linspace(0.0, 0.999, 1000)
    empirical = float(xs[int(np.argmax([swept_norm(x, 1.0) for x in xs]))])
    target = (-1 + math.sqrt(5)) / 2
    ok = worst < 0.01 and abs(empirical - target) < 0.02
    record(2, ok, f"ratio spread {worst:.3%} (< 1%), argmax at tau=1 {empirical:.3f} vs {target:.3f}")
    assert ok


# ------------------------------------------------------------------ 3

def test_c3_metric_oracles():
    rng = np.random.default_rng(2024)
    mismatches, checked = 0, 0
    for _ in range(100):
        pu, pv, train, truth = random_instance(rng)
        if not truth.any():
            truth[0, np.flatnonzero(~train[0])[:1]] = True
        ts, tt = SparseMatrix.from_dense(train.astype(float)), SparseMatrix.from_dense(truth.astype(float))
        for n in (5, 20):
            rep = evaluate(pu, pv, ts, tt, (n,))
            r, g, _ = oracle_metrics(pu @ pv.T, train, truth, n)
            checked += 1
            mismatches += not (rep.recall[n] == r and rep.ndcg[n] == g)
    ok = mismatches == 0
    record(3, ok, f"{checked - mismatches}/{checked} instance-cutoff pairs match the exhaustive oracle exactly")
    assert ok


# ------------------------------------------------------------------ 4

def test_c4_structural_reductions():
    rng = np.random.default_rng(4)
    exact_hyper = True
    for _ in range(20):
        k, d, h = rng.integers(2, 50), rng.integers(1, 8), rng.integers(1, 8)
        e, w = rng.normal(size=(k, d)), rng.normal(size=(d, h))
        hs = hyper_structure(Tensor(e), Tensor(w)).value
        got = hyper_propagate(Tensor(hs), Tensor(e), []).value
        oracle = lrelu(loop_matmul(hs, loop_matmul(hs.T, e)))
        exact_hyper &= got.tobytes() == oracle.tobytes() and np.array_equal(hs, loop_matmul(e, w))

    exact_adj = True
    for _ in range(20):
        users, items = rng.integers(1, 51), rng.integers(1, 51)
        hit = rng.random((users, items)) < 0.15
        hit[np.arange(users), rng.integers(0, items, users)] = True
        hit[rng.integers(0, users, items), np.arange(items)] = True
        u, i = np.nonzero(hit)
        ds = D.from_pairs([(f"u{a}", f"i{b}") for a, b in zip(u, i)])
        adj = D.build_normalized_adjacency(ds).matrix.densify()
        a = ds.matrix().densify()
        du, dv = a.sum(1), a.sum(0)
        for r, c in zip(*np.nonzero(a)):
            exact_adj &= adj[r, c] == 1.0 / math.sqrt(du[r] * dv[c])
        exact_adj &= np.count_nonzero(adj) == np.count_nonzero(a)

    counts_ok = True
    for d, h, c in ((32, 128, 3), (4, 3, 2), (16, 8, 0)):
        cfg = ModelConfig(dim=d, hyperedges=h, hyper_layers=c)
        p = init_params(20, 30, cfg, rng)
        counts_ok &= p.count(include_embeddings=False) == 2 * d * h + 2 * c * h * h == expected_extra_params(cfg)
    ok = bool(exact_hyper and exact_adj and counts_ok)
    record(4, ok, f"(a) c=0 oracle exact: {exact_hyper}; (b) adjacency exact: {exact_adj}; "
                  f"(c) parameter count 2dH+2cH^2: {counts_ok}")
    assert ok


# ------------------------------------------------- shared synthetic training runs

def block_oracle_recall(ds):
    """Recall@20 of a scorer that knows the true blocks (same-block first, then popularity)."""
    ub = np.array([int(u[1:]) >= 100 for u in ds.user_ids])
    ib = np.array([int(i[1:]) >= 100 for i in ds.item_ids])
    _, pop = popularity_scores(ds.matrix("train"), ds.num_users)
    scores = (ub[:, None] == ib[None, :]) * 1e6 + pop.T
    return evaluate(scores, np.eye(ds.num_items), ds.matrix("train"), ds.matrix("test"), (20,)).recall[20]


@pytest.fixture(scope="module")
def synthetic_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    assert cli.main(["prepare", "--synthetic", SYNTHETIC, "--output", str(root / "data")]) == 0
    runs = {}
    for name, flags in (("full", []), ("no_ccl", ["--no-ccl"]), ("no_hyper", ["--no-hyper"])):
        t0 = time.perf_counter()
        assert cli.main(["train", "--data", str(root / "data"), "--output", str(root / name), *flags]) == 0
        info = json.loads((root / name / "run.json").read_text())
        info["elapsed"] = time.perf_counter() - t0
        runs[name] = info
    runs["root"] = root
    return runs


# ------------------------------------------------------------------ 5

def test_c5_end_to_end_synthetic(synthetic_runs):
    full = synthetic_runs["full"]
    m = full["metrics"]
    recall, pop = m["test_recall@20"], m["popularity_test_recall@20"]
    ceiling = block_oracle_recall(D.load_split(synthetic_runs["root"] / "data"))
    ok = recall >= 3 * pop and full["elapsed"] < 120 and full["config"]["train"]["epochs"] <= 50
    record(5, ok, f"test recall@20 {recall:.4f} = {recall / pop:.2f}x popularity {pop:.4f} (need >= 3x); "
                  f"runtime {full['elapsed']:.1f}s; block-oracle scorer reaches {ceiling / pop:.2f}x")
    assert ok


# ------------------------------------------------------------------ 6

def test_c6_oversmoothing_direction(synthetic_runs):
    mads = {k: synthetic_runs[k]["metrics"]["test_mad_user"] for k in ("full", "no_ccl", "no_hyper")}
    ok = mads["full"] > mads["no_ccl"] and mads["full"] > mads["no_hyper"]
    record(6, ok, "user MAD full {full:.4f}, -CCL {no_ccl:.4f}, -Hyper {no_hyper:.4f} "
                  "(need full above both)".format(**mads))
    assert ok


# ------------------------------------------------------------------ 7

def test_c7_determinism(synthetic_runs):
    root = synthetic_runs["root"]
    again = root / "full_again"
    assert cli.main(["train", "--data", str(root / "data"), "--output", str(again)]) == 0
    same_log = (root / "full" / "train_log.jsonl").read_bytes() == (again / "train_log.jsonl").read_bytes()
    files = sorted(p.relative_to(root / "full" / "checkpoint") for p in (root / "full" / "checkpoint").rglob("*")
                   if p.is_file())
    same_ckpt = all((root / "full" / "checkpoint" / f).read_bytes() == (again / "checkpoint" / f).read_bytes()
                    for f in files)
    ok = same_log and same_ckpt and len(files) > 1
    record(7, ok, f"training log identical: {same_log}; {len(files)} checkpoint files identical: {same_ckpt}")
    assert ok


# ------------------------------------------------------------------ 8

def test_c8_loss_identities():
    rng = np.random.default_rng(8)
    ds = D.split(D.from_pairs(D.synthetic_blocks(30, 25, 0.4, 0.05, 1)), seed=0)
    mc = ModelConfig(dim=8, hyperedges=6, hyper_layers=2)
    params = init_params(ds.num_users, ds.num_items, mc, rng)
    adj = D.build_normalized_adjacency(ds).matrix
    batch = next(D.sample_pairs(ds, 3, 16, rng))
    states = forward(params, mc, adj)
    loss, rep = total_loss(states, batch, params, LossConfig(ssl_weight=0.0, weight_decay=0.0), mc)
    margin = margin_loss(pair_scores(states.user.psi, states.item.psi, batch.anchors, batch.positives),
                         pair_scores(states.user.psi, states.item.psi, batch.anchors, batch.negatives))
    identity_a = rep.total == rep.ranking == float(margin.value[0, 0]) == float(loss.value[0, 0])

    worst = 0.0
    for n in (2, 7, 40):
        v = np.repeat(rng.normal(size=(1, 5)), n, axis=0)
        per_anchor = infonce_loss([Tensor(v)], [Tensor(v)], np.arange(n), 1.0).value[0, 0] / n
        worst = max(worst, abs(per_anchor - math.log(n)))
    identity_b = worst < 1e-9

    # quarter-integer scores keep the margin arithmetic exact, including the kink
    pos = rng.integers(-8, 8, size=(50, 1)) / 4
    neg = pos - 1.0 - rng.integers(0, 8, size=(50, 1)) / 4
    identity_c = margin_loss(Tensor(pos), Tensor(neg)).value[0, 0] == 0.0
    ok = bool(identity_a and identity_b and identity_c)
    record(8, ok, f"zero-weight total equals margin: {identity_a}; identical views give log N "
                  f"(worst {worst:.1e}): {identity_b}; saturated margin is 0: {identity_c}")
    assert ok


def test_default_run_beats_popularity_on_validation(synthetic_runs):
    ds = D.load_split(synthetic_runs["root"] / "data")
    pop = evaluate(*popularity_scores(ds.matrix("train"), ds.num_users), ds.matrix("train"),
                   ds.matrix("val"), (20,)).recall[20]
    assert synthetic_runs["full"]["metrics"]["val_recall@20"] > pop
    assert synthetic_runs["full"]["elapsed"] < 120
