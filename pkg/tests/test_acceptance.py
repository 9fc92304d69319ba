"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -s`` (or ``-rA``) to see the lines.
The end-to-end criteria share pipeline runs through module-scoped fixtures.
"""

import json
import math
import time

import numpy as np
import pytest
from scipy.stats import chisquare

from gradcheck import numeric_grad, rel_error
from oracles import brute_force_auc, confusion_metrics, naive_dynamic_graph, transition_oracle
from twembed.connectome import DynamicGraph, TimeSeriesMatrix, WindowSpec, build_dynamic_graph, window_correlation
from twembed.encoder import EncoderConfig, EncoderState, Vocabulary
from twembed.evalkit import metrics, stratified_kfold
from twembed.pipeline import load_bundled_config, run_pipeline
from twembed.synth import RegimeSpec, generate_synthetic_corpus
from twembed.tempwalk import TemporalAdjacency, TemporalWalk, WalkConfig, check_walk, next_edge, sample_corpus
from twembed.trainer import (Heads, MaskedBatch, TrainConfig, graph_level_loss, loss_and_grads, make_masked_batch,
                             temporal_dynamics_loss, train)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return emit


def test_criterion_01_scope(capsys):
    with capsys.disabled():
        print("\ncriterion 1: N/A  published table values need the restricted clinical corpus; "
              "acceptance rests on criteria 2-10")


def random_dynamic_graph(rng, gid, R=20, S=20, p=0.15):
    edges = [(u, v, t) for t in range(S) for u in range(R) for v in range(u + 1, R) if rng.random() < p]
    return DynamicGraph(gid, R, S, np.array(edges, dtype=np.int64))


def test_criterion_02_walk_invariants(verdict):
    rng = np.random.default_rng(2)
    graphs = [random_dynamic_graph(rng, f"g{i:02d}") for i in range(20)]
    start = time.perf_counter()
    walks, _ = sample_corpus(graphs, WalkConfig(walks_per_node=30, seed=2))
    walks = walks[:10_000]
    edge_sets = {g.graph_id: g.edge_set() for g in graphs}
    bad = sum(1 for w in walks if check_walk(w, edge_sets[w.graph_id], 20))
    elapsed = time.perf_counter() - start
    ok = len(walks) == 10_000 and bad == 0 and elapsed < 10
    assert verdict(2, ok, f"{len(walks)} walks, {bad} invalid, {elapsed:.1f}s (limit 10s)")


NEIGHBORHOODS = [
    (5, [5, 6]),
    (2, [2, 3, 5]),
    (0, [0, 0, 1, 1]),
    (3, [3, 4, 4, 6, 8]),
    (1, [1, 2, 3, 4, 5, 6]),
]


def test_criterion_03_transition_distribution(verdict):
    rng = np.random.default_rng(3)
    n = 100_000
    details, ok = [], True
    for t, times in NEIGHBORHOODS:
        k = len(times)
        # star around node 0; leaf i is reached through the edge with timestamp times[i]
        g = DynamicGraph("star", k + 1, max(times) + 1, [[0, i + 1, tp] for i, tp in enumerate(times)])
        adj = TemporalAdjacency(g)
        counts = np.zeros(k)
        for _ in range(n):
            w, _ = next_edge(adj, 0, t, rng)
            counts[w - 1] += 1
        p = np.array(transition_oracle(times, t))
        se = np.sqrt(n * p * (1 - p))
        within = bool(np.all(np.abs(counts - n * p) < 3 * se))
        pval = chisquare(counts, n * p).pvalue
        ok &= within and pval > 0.001
        details.append(f"k={k} p={pval:.3f}")
    two = transition_oracle([5, 6], 5)
    ok &= abs(two[0] - 0.7311) <= 0.005 and abs(two[1] - 0.2689) <= 0.005
    assert verdict(3, ok, f"two-edge [{two[0]:.4f}, {two[1]:.4f}]; " + ", ".join(details))


def test_criterion_04_gradient_fidelity(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    vocab = Vocabulary(7)
    ecfg = EncoderConfig(vocab_size=vocab.size, d=8, heads=2, layers=1, max_seq=7)
    cfg = TrainConfig(lambda1=1.0, lambda2=5.0)
    state = EncoderState.initialize(ecfg, 4)
    heads = Heads.initialize(8, vocab.size, ["a", "b", "c"], rng)
    walks = [TemporalWalk("a", (0, 1, 2, 3, 4, 5), (0, 0, 1, 1, 2)),
             TemporalWalk("b", (6, 5, 0), (1, 2)),
             TemporalWalk("c", (2, 3, 2, 1), (0, 3, 3))]
    batch = make_masked_batch(walks, vocab, {"a": 0, "b": 1, "c": 2}, cfg, rng, 7)
    _, _, _, grads = loss_and_grads(state, heads, batch, cfg)
    params = dict(state.params, W_TD=heads.W_TD, W_GS=heads.W_GS)

    def f():
        return loss_and_grads(state, heads, batch, cfg, need_grads=False)[2]

    worst = {k: float(rel_error(grads[k], numeric_grad(f, p, h=1e-4)).max()) for k, p in params.items()}
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-3 and elapsed < 30 and {"W_TD", "W_GS"} <= set(worst)
    assert verdict(4, ok, f"max rel err {worst[top]:.2e} ({top}) over {len(worst)} tensors, {elapsed:.1f}s")


@pytest.mark.slow
def test_criterion_05_loss_sanity(verdict):
    H = np.random.default_rng(5).normal(size=(3, 21, 16))
    tok = np.zeros((3, 21), dtype=np.int64)
    batch = MaskedBatch(tok, np.ones_like(tok, bool), np.array([0, 1, 2]), np.array([1, 2, 3]),
                        np.array([4, 50, 118]), np.array([0, 1, 2]), tok)
    ltd = temporal_dynamics_loss(H, batch, np.zeros((16, 119)))
    lgs = graph_level_loss(H[:, 0], [0, 17, 39], np.zeros((16, 40)))
    uniform_ok = abs(ltd - math.log(119)) < 1e-6 and abs(lgs - math.log(40)) < 1e-6

    corpus = generate_synthetic_corpus(10, 20, 200, HALVING_REGIME, seed=0)
    graphs = [build_dynamic_graph(ts, WindowSpec()) for ts in corpus.subjects]
    walks, _ = sample_corpus(graphs, WalkConfig(seed=0))
    vocab = Vocabulary(20)
    enc = EncoderConfig(vocab_size=vocab.size, d=32, heads=4, layers=1, max_seq=21)
    # lr 1e-3 as in the bundled config; the 1e-4 default stops at a ratio near 0.62 for this model size
    trace = train(walks, vocab, enc, TrainConfig(seed=0, lr=HALVING_LR)).trace
    ratio = trace[-1]["L_total"] / trace[0]["L_total"]
    ok = uniform_ok and ratio < 0.5 and trace[-1]["epoch"] == 50
    assert verdict(5, ok, f"ln119 gap {abs(ltd - math.log(119)):.1e}, ln40 gap {abs(lgs - math.log(40)):.1e}; "
                          f"L_total {trace[0]['L_total']:.2f} -> {trace[-1]['L_total']:.2f} "
                          f"(ratio {ratio:.3f}) after 50 epochs at lr {HALVING_LR:g}")


HALVING_REGIME = RegimeSpec()
HALVING_LR = 1e-3


# --- end-to-end runs shared by criteria 6, 7 and 10 --------------------------------

@pytest.fixture(scope="module")
def bundled_runs(tmp_path_factory):
    runs = {}
    for name, lambda1 in (("main", 1.0), ("repeat", 1.0), ("ablation", 0.0)):
        cfg = load_bundled_config(out=str(tmp_path_factory.mktemp(name)), plots=False)
        cfg.train["lambda1"] = lambda1
        start = time.perf_counter()
        res = run_pipeline(cfg)
        res["seconds"] = time.perf_counter() - start
        with open(res["report"], encoding="utf-8") as fh:
            res["doc"] = json.load(fh)
        runs[name] = res
    return runs


@pytest.mark.slow
def test_criterion_06_end_to_end(verdict, bundled_runs):
    run = bundled_runs["main"]
    agg = run["doc"]["aggregate"]
    acc, auc = agg["accuracy"]["mean"], agg["auc"]["mean"]
    ok = acc >= 0.9 and auc >= 0.9 and run["seconds"] < 600
    assert verdict(6, ok, f"accuracy {acc:.3f}, AUC {auc:.3f}, {run['seconds']:.0f}s (limit 600s)")


@pytest.mark.slow
def test_criterion_07_ablation_direction(verdict, bundled_runs):
    full = bundled_runs["main"]["doc"]["aggregate"]["auc"]["mean"]
    ablated = bundled_runs["ablation"]["doc"]["aggregate"]["auc"]["mean"]
    ok = ablated < full
    assert verdict(7, ok, f"AUC lambda1=1: {full:.3f}, lambda1=0: {ablated:.3f}")


def test_criterion_08_connectome_oracle(verdict):
    rng = np.random.default_rng(8)
    worst_corr = worst_thr = 0.0
    edges_equal = fraction_ok = True
    for _ in range(100):
        R = int(rng.integers(4, 13))
        window, stride = int(rng.integers(8, 20)), int(rng.integers(1, 6))
        T = window + stride * int(rng.integers(0, 6))
        values = rng.normal(size=(T, R))
        spec = WindowSpec(window, stride, 80.0)
        g = build_dynamic_graph(TimeSeriesMatrix("s", values), spec)
        ref = naive_dynamic_graph(values.tolist(), window, stride, 80.0)
        edges_equal &= g.edge_set() == set().union(*(e for _, _, e in ref))
        n_pairs = R * (R - 1) // 2
        for t, (corr, thr, _) in enumerate(ref):
            mine, _ = window_correlation(values[t * stride:t * stride + window])
            worst_corr = max(worst_corr, max(abs(mine[u, v] - c) for (u, v), c in corr.items()))
            worst_thr = max(worst_thr, abs(g.meta["thresholds"][t] - thr))
            ties = sum(1 for c in corr.values() if c == thr)
            kept = len(g.edges_at(t))
            fraction_ok &= abs(kept - math.ceil(0.2 * n_pairs)) <= ties
    ok = edges_equal and fraction_ok and worst_corr <= 1e-12 and worst_thr <= 1e-12
    assert verdict(8, ok, f"100 inputs; max corr diff {worst_corr:.1e}, max threshold diff {worst_thr:.1e}, "
                          f"edge sets equal={edges_equal}, 20% retention within ties={fraction_ok}")


def test_criterion_09_metric_oracles(verdict):
    rng = np.random.default_rng(9)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        y = rng.integers(0, 2, size=n)
        y[rng.choice(n, 2, replace=False)] = [0, 1]
        s = np.round(rng.random(n), int(rng.integers(1, 4)))
        m = metrics(y, s)
        acc, sens, spec = confusion_metrics(y.tolist(), s.tolist())
        auc = brute_force_auc(y.tolist(), s.tolist())
        if (m["accuracy"], m["sensitivity"], m["specificity"]) != (acc, sens, spec) or abs(m["auc"] - auc) > 1e-12:
            mismatches += 1
    labels = np.array([0] * 468 + [1] * 403)
    folds = stratified_kfold(labels, 10, seed=0)
    worst = max(max(abs(int((labels[f] == c).sum()) - len(f) * share) for c, share in ((0, 468 / 871),
                                                                                      (1, 403 / 871)))
                for f in folds)
    sizes = sorted({len(f) for f in folds})
    ok = mismatches == 0 and worst <= 1
    assert verdict(9, ok, f"1000 vectors, {mismatches} mismatches; 468/403 k=10 fold sizes {sizes}, "
                          f"max class-count deviation {worst:.2f}")


@pytest.mark.slow
def test_criterion_10_determinism(verdict, bundled_runs):
    a, b = bundled_runs["main"], bundled_runs["repeat"]
    same = {}
    for key in ("walks", "checkpoint", "embeddings", "report"):
        with open(a[key], "rb") as fa, open(b[key], "rb") as fb:
            same[key] = fa.read() == fb.read()
    ok = all(same.values())
    assert verdict(10, ok, ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))
