"""Acceptance criteria 1-11.

Each test records one ``CRITERION n: PASS|FAIL ...`` line (printed in the
session summary and to stdout) before asserting. Criteria 6-11 train full
models and are marked ``slow``; ``pytest -m "not slow"`` skips them.
"""
import functools
import math
import statistics
import time

import numpy as np
import pytest

from semignn import autograd as ag
from semignn.cli import main
from semignn.graph import BIPARTITE, RELATION, MultiViewGraph, build_view_graph
from semignn.interpret import node_importance
from semignn.metrics import SingleClass, auc, ks
from semignn.model import ModelDims, ModelParams, embed_batch, init_params
from semignn.synth import SynthConfig, generate
from semignn.training import TrainConfig, batch_objective, graph_term, total_loss, train
from semignn.walker import NegativeSampler

from conftest import ACCEPTANCE_LINES, tiny_graph

SEEDS = (0, 1, 2, 3, 4)


def record(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    assert ok, line


# --- shared full runs ----------------------------------------------------------

@functools.lru_cache(maxsize=None)
def full_run(seed, alpha=0.8, **synth):
    """Generate, train with TrainConfig defaults, score the test split."""
    t0 = time.perf_counter()
    data = generate(SynthConfig(rng_seed=seed, **synth))
    res = train(data.graph, TrainConfig(rng_seed=seed, alpha=alpha))
    from semignn.model import score_users
    test = data.split_labels("test")
    scores = score_users(data.graph, res.params, [u for u, _ in test])
    test_auc = auc(scores, [y for _, y in test])
    return dict(data=data, result=res, auc=test_auc, seconds=time.perf_counter() - t0)


# --- 1 ---------------------------------------------------------------------------

def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    g = tiny_graph()
    rng = np.random.default_rng(7)
    dims = ModelDims(d0=4, mlp=(3,), d_final=2, m=2, k=2)
    params = init_params(g, dims, rng)
    for k in params.tensors:
        params.tensors[k] = rng.normal(scale=0.7, size=params.tensors[k].shape)
    pairs = np.array([[0, 1], [1, 2], [2, 3], [3, 0], [4, 4]])[:4]
    negs = np.array([[2, 3, 4], [3, 0, 4], [0, 1, 1], [1, 2, 2]])
    worst, kinks = 0.0, {}
    for cfg in (TrainConfig(d0=4, mlp=(3,), d_final=2), TrainConfig(alpha=0.5, lam=0.1, d0=4, mlp=(3,), d_final=2)):
        tape, total, _, _ = batch_objective(g, params, pairs, negs, cfg)
        grads = tape.backward(total)
        dense = {k: grads.dense(k, v.shape) for k, v in params.tensors.items()}

        def f(tensors, cfg=cfg):
            return float(batch_objective(g, ModelParams(dims, tensors), pairs, negs, cfg)[1].value)

        rep = ag.fd_check(f, params.tensors, epsilon=1e-4, grads=dense, abs_floor=1e-8)
        worst = max(worst, max(rep.values()))
        kinks.update(rep.kinks)
    secs = time.perf_counter() - t0
    ok = worst < 1e-4 and not kinks and secs < 5
    record(1, ok, f"max rel err {worst:.2e} (< 1e-4), kinks {len(kinks)}, {secs:.2f}s (< 5s)")


# --- 2 ---------------------------------------------------------------------------

def random_graph(rng, n=50):
    rel_edges = {(int(a), int(b)) for a, b in rng.integers(0, n, size=(120, 2)) if a != b}
    rel = build_view_graph(0, RELATION, [(u, v, 1.0) for u, v in sorted(rel_edges)], n)
    views = [rel]
    for vid, size in ((1, 30), (2, 12)):
        m = rng.integers(0, 4 * n)
        edges = [(int(u), int(i), float(w)) for u, i, w in
                 zip(rng.integers(0, n, m), rng.integers(0, size, m), rng.uniform(0.1, 5.0, m))]
        views.append(build_view_graph(vid, BIPARTITE, edges, n, attr_node_count=size))
    return MultiViewGraph(n, 2, tuple(views))


def test_criterion_2_attention_normalization():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    g = random_graph(rng)
    dims = ModelDims(d0=8, mlp=(6, 4), d_final=4, m=3, k=2)
    base = init_params(g, dims, rng)
    users = np.arange(g.user_count)
    worst, negative = 0.0, 0
    for draw in range(1000):
        scale = float(rng.choice([0.01, 0.3, 1.0, 5.0, 30.0]))
        p = ModelParams(dims, {k: rng.normal(scale=scale, size=v.shape) for k, v in base.tensors.items()})
        tr = embed_batch(ag.Tape(), g, p, users)
        va = tr.view_alphas.value
        worst = max(worst, float(np.abs(va.sum(axis=1) - 1).max()))
        negative += int((va < 0).sum())
        for rows, _, alpha in tr.node_alphas:
            if alpha is None:
                continue
            has = np.unique(rows)
            worst = max(worst, float(np.abs(np.bincount(rows, weights=alpha)[has] - 1).max()))
            negative += int((alpha < 0).sum())
    secs = time.perf_counter() - t0
    ok = worst <= 1e-9 and negative == 0 and secs < 10
    record(2, ok, f"max |sum-1| {worst:.1e} (<= 1e-9), negatives {negative}, {secs:.2f}s (< 10s)")


# --- 3 ---------------------------------------------------------------------------

def brute_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    twice = 2 * int((pos[:, None] > neg[None, :]).sum()) + int((pos[:, None] == neg[None, :]).sum())
    return twice / (2 * len(pos) * len(neg))


def brute_ks(s, y):
    P, N = int(y.sum()), int(len(y) - y.sum())
    t = np.concatenate([np.unique(s), [np.inf, -np.inf]])
    pred = s[None, :] >= t[:, None]
    tp = (pred & (y == 1)).sum(axis=1)
    fp = (pred & (y == 0)).sum(axis=1)
    return int(np.abs(tp * N - fp * P).max()) / (P * N)


def scored_sets(rng):
    out = []
    for i in range(500):
        kind = i % 5
        n = int(rng.integers(2, 201))
        if kind == 0:                                   # all ties
            s = np.full(n, float(rng.random()))
        elif kind == 1:                                 # minimal set
            n, s = 2, rng.random(2)
        elif kind == 2:                                 # coarse scores, many ties
            s = rng.integers(0, 5, n) / 4.0
        else:
            s = rng.random(n)
        y = rng.integers(0, 2, n)
        if kind == 1 or i % 25 == 3:                    # one positive or one negative
            y = np.zeros(n, dtype=np.int64)
            y[rng.integers(0, n)] = 1
            if i % 2:
                y = 1 - y
        out.append((s, y))
    return out


def test_criterion_3_metric_oracles():
    t0 = time.perf_counter()
    mismatches, compared, single = 0, 0, 0
    for s, y in scored_sets(np.random.default_rng(3)):
        if y.sum() in (0, len(y)):
            single += 1
            with pytest.raises(SingleClass):
                auc(s, y)
            continue
        compared += 1
        mismatches += (auc(s, y) != brute_auc(s, y)) + (ks(s, y) != brute_ks(s, y))
    secs = time.perf_counter() - t0
    ok = mismatches == 0 and secs < 10
    record(3, ok, f"{mismatches} exact mismatches over {compared} sets ({single} single-class), {secs:.2f}s")


# --- 4 ---------------------------------------------------------------------------

def test_criterion_4_negative_sampler_law():
    t0 = time.perf_counter()
    # a 10-node relation graph with degrees 1..10 is not simple, so the law is
    # checked on the sampler built from that degree array
    deg = np.arange(1, 11)
    s = NegativeSampler(np.arange(10), deg)
    draws = s.draw(10**6, np.random.default_rng(4))
    freq = np.bincount(draws, minlength=10) / 10**6
    target = deg ** 0.75 / (deg ** 0.75).sum()
    err = float(np.max(np.abs(freq - target) / target))
    secs = time.perf_counter() - t0
    record(4, err < 0.02 and secs < 10, f"max relative error {err:.4f} (< 0.02), {secs:.2f}s")


# --- 5 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_loss_identities():
    a = ag.Tape().const(np.zeros((6, 4)))
    rng = np.random.default_rng(5)
    pu, pv = rng.integers(0, 6, 50), rng.integers(0, 6, 50)
    zero = float(graph_term(a, pu, pv, rng.integers(0, 6, (50, 3))).value)
    zero_err = abs(zero - 4 * math.log(2))
    run = full_run(0)
    cfg = TrainConfig()
    worst = max(abs(r.total - total_loss(r.sup, r.graph, r.reg, cfg)) for r in run["result"].reports)
    ok = zero_err <= 1e-9 and worst <= 1e-9
    record(5, ok, f"zero-embedding error {zero_err:.1e}, StepReport identity max error {worst:.1e} "
                  f"over {len(run['result'].reports)} steps (<= 1e-9)")


# --- 6 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_training_efficacy():
    runs = [full_run(s) for s in SEEDS]
    aucs = [r["auc"] for r in runs]
    means = [r["result"].epoch_means() for r in runs]
    decreasing = all(m[0] > m[1] > m[2] for m in means)
    slowest = max(r["seconds"] for r in runs)
    med = statistics.median(aucs)
    ok = med >= 0.85 and decreasing and slowest < 120
    record(6, ok, f"median test AUC {med:.4f} (>= 0.85) from {[round(a, 4) for a in aucs]}, "
                  f"epoch means strictly decreasing in every seed: {decreasing}, slowest seed {slowest:.0f}s (< 120s)")


# --- 7 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_semi_supervision_helps():
    semi = [full_run(s, 0.8, labeled_fraction=0.1)["auc"] for s in SEEDS]
    sup = [full_run(s, 1.0, labeled_fraction=0.1)["auc"] for s in SEEDS]
    gap = statistics.median(semi) - statistics.median(sup)
    record(7, gap >= 0.01, f"median AUC alpha=0.8 {statistics.median(semi):.4f} {[round(a, 4) for a in semi]} "
                           f"minus alpha=1.0 {statistics.median(sup):.4f} {[round(a, 4) for a in sup]} "
                           f"= {gap:.4f} (>= 0.01)")


# --- 8 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_null_model():
    p = (0.02 + 0.002) / 2  # same mean degree as the default graph
    aucs = [full_run(s, signal=0.0, p_in=p, p_out=p)["auc"] for s in SEEDS]
    med = statistics.median(aucs)
    record(8, 0.45 <= med <= 0.55, f"median test AUC {med:.4f} in [0.45, 0.55] from {[round(a, 4) for a in aucs]}")


# --- 9 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_9_interpretability_recovery():
    hits = []
    for s in SEEDS:
        run = full_run(s)
        data = run["data"]
        fraud = [u for split in data.splits.values() for u in split if data.truth[u] == 1]
        top = {r.node for r in node_importance(data.graph, run["result"].params, fraud, 1)[:15]}
        hits.append(len(top & set(data.planted["app"].tolist())))
    good = sum(h >= 7 for h in hits)
    record(9, good >= 4, f"{good}/5 seeds with >= 7 of 10 planted words in the top 15 (need 4); hits {hits}")


# --- 10 --------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_10_determinism(tmp_path):
    outs = []
    for rep in ("a", "b"):
        root = tmp_path / rep
        common = ["--seed", "13"]
        assert main(["gen", *common, "--out", str(root / "data"), "--set", "synth.user_count=600"]) == 0
        assert main(["train", *common, "--data", str(root / "data"), "--out", str(root / "run")]) == 0
        assert main(["eval", *common, "--data", str(root / "data"), "--out", str(root / "run"),
                     "--truth", str(root / "data" / "truth.tsv")]) == 0
        outs.append(root)
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    differ = [str(f) for f in files if (outs[0] / f).read_bytes() != (outs[1] / f).read_bytes()]
    expected = {"run/model.ckpt", "run/telemetry.tsv", "run/eval_test.txt"}
    present = expected <= {str(f) for f in files}
    record(10, present and not differ, f"{len(files)} files compared, differing: {differ or 'none'}")


# --- 11 --------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_11_linear_in_edges():
    # relation edges double by doubling users at a fixed expected degree
    def epoch_time(n, p_in, p_out):
        data = generate(SynthConfig(user_count=n, p_in=p_in, p_out=p_out, rng_seed=11))
        res = train(data.graph, TrainConfig(epochs=2, rng_seed=11))
        return min(res.epoch_seconds), int(data.graph.relation.degrees().sum() // 2)

    small, e_small = epoch_time(1000, 0.04, 0.004)
    large, e_large = epoch_time(2000, 0.02, 0.002)
    ratio = large / small
    record(11, 1.5 <= ratio <= 3.0, f"edges {e_small} -> {e_large} (x{e_large / e_small:.2f}), "
                                    f"epoch {small:.1f}s -> {large:.1f}s, ratio {ratio:.2f} in [1.5, 3.0]")
