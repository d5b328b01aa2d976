"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v`` or
``python3 tests/test_acceptance.py``.
"""
import hashlib
import math
import os
import sys
import time
import tracemalloc
from pathlib import Path

import numpy as np
import pytest

from psr.config import RunConfig
from psr.encoder import attention_logit, attention_normalize, backward, forward, init_params, reflect
from psr.evaluate import evaluate, metrics, rank_all
from psr.kg import DATA_DIR_ENV, KnowledgeGraph, load_dataset, merge_graphs, split_seeds
from psr.sampler import build_plan, draw_edges, plan_from_probs, sample_counts
from psr.semisup import run_semi
from psr.synth import collapse_metric, make_instance
from psr.trainer import (RMSprop, TrainState, alignment_loss, cosine_sim, init_targets, normalize_rows, score,
                         score_block, train, train_batch)


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def synthetic_setup(n=500, ratios=(0.27, 0.03), seed=0, delete_prob=0.02, degree=6.0):
    inst = make_instance(n, 5, degree, delete_prob=delete_prob, rng_seed=seed)
    graph = merge_graphs(inst.instance1, inst.instance2)
    seeds = split_seeds(inst.ground_truth + np.array([0, n]), ratios, seed)
    return graph, seeds


def hits1(params, targets, graph, seeds):
    final, _ = forward(graph.edges, params)
    return evaluate(final, targets, seeds.test, (1, 10)).hits_at[1]


# 1. equation-level oracles

def py_reflect(x, r):
    d = len(x)
    m = [[(1.0 if i == j else 0.0) - 2 * r[i] * r[j] for j in range(d)] for i in range(d)]
    return [sum(m[i][j] * x[j] for j in range(d)) for i in range(d)]


def py_cos(x, y):
    dot = sum(a * b for a, b in zip(x, y))
    return dot / (math.sqrt(sum(a * a for a in x)) * math.sqrt(sum(b * b for b in y)))


def py_softmax(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def fd_errors(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 5))
    m = int(rng.integers(1, 2 * n + 1))
    kg1 = KnowledgeGraph(n, 2, np.stack([rng.integers(0, n, m), rng.integers(0, 2, m), rng.integers(0, n, m)], 1))
    g = merge_graphs(kg1, KnowledgeGraph(2, 1, [[0, 0, 1]]))
    d = int(rng.integers(2, 9))
    p = init_params(g.num_entities, g.num_relations, d, 2, rng)
    G = rng.normal(size=(g.num_entities, 3 * d))

    def loss():
        return float(np.sum(G * forward(g.edges, p)[0]))

    _, acts = forward(g.edges, p)
    grads = backward(g.edges, p, acts, G)
    worst = 0.0
    for analytic, table in ((grads.entity, p.entity), (grads.relation, p.relation), (grads.attention, p.attention)):
        for idx in np.ndindex(table.shape):
            old = table[idx]
            table[idx] = old + 1e-4
            up = loss()
            table[idx] = old - 1e-4
            down = loss()
            table[idx] = old
            num = (up - down) / 2e-4
            a = analytic[idx]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-6))
    return worst


def test_criterion_1_equation_oracles(report):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        d = int(rng.integers(1, 9))
        x, r = rng.normal(size=d), rng.normal(size=d)
        r /= np.linalg.norm(r)
        worst = max(worst, np.max(np.abs(reflect(x, r) - py_reflect(x.tolist(), r.tolist()))))
        c, rv, nb, v = rng.normal(size=d), rng.normal(size=d), rng.normal(size=d), rng.normal(size=3 * d)
        want = sum(v[k] * c[k] + v[d + k] * rv[k] + v[2 * d + k] * nb[k] for k in range(d))
        worst = max(worst, abs(attention_logit(c, rv, nb, v) - want) / max(1.0, abs(want)))
        z = rng.normal(size=int(rng.integers(1, 6))) * 5
        worst = max(worst, np.max(np.abs(attention_normalize([z])[0] - py_softmax(z.tolist()))))
        y = rng.normal(size=d)
        worst = max(worst, abs(cosine_sim(x, y) - py_cos(x.tolist(), y.tolist())))
        F, T = rng.normal(size=(6, d)), rng.normal(size=(6, d))
        pairs = [(0, 3), (1, 4), (2, 5)]
        want = -sum(py_cos(F[i], T[j]) + py_cos(F[j], T[i]) for i, j in pairs)
        worst = max(worst, abs(alignment_loss(F, T, pairs)[0] - want))
        i, j = rng.integers(0, 6, 2)
        worst = max(worst, abs(score(i, j, F, T) - (py_cos(F[i], T[j]) + py_cos(F[j], T[i]))))
    # loss gradient with respect to final, by central differences
    F, T = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
    _, g = alignment_loss(F, T, pairs)
    loss_fd = 0.0
    for idx in np.ndindex(F.shape):
        old = F[idx]
        F[idx] = old + 1e-4
        up = alignment_loss(F, T, pairs)[0]
        F[idx] = old - 1e-4
        down = alignment_loss(F, T, pairs)[0]
        F[idx] = old
        num = (up - down) / 2e-4
        loss_fd = max(loss_fd, abs(g[idx] - num) / max(abs(g[idx]), abs(num), 1e-6))
    enc_fd = max(fd_errors(s) for s in range(8))
    ok = worst < 1e-9 and loss_fd < 1e-4 and enc_fd < 1e-4
    report(1, ok, f"oracle max deviation {worst:.2e} over 200 instances; "
                  f"FD rel. error loss {loss_fd:.2e}, encoder {enc_fd:.2e} (limit 1e-4)")


# 2. stop-gradient invariant

def test_criterion_2_stop_gradient(report):
    graph, seeds = synthetic_setup()
    cfg = RunConfig(max_epochs=10, patience=10)
    params = init_params(graph.num_entities, graph.num_relations, cfg.dim, cfg.depth, np.random.default_rng([0, 0]))
    fresh = params.copy()
    targets = init_targets(graph, params)
    digest = hashlib.sha256(targets.tobytes()).hexdigest()
    checked = []

    def on_batch(info):
        t = info["targets"]
        # the only array the target branch reads: same object, read-only, bit-identical
        assert t is targets and not t.flags.writeable
        assert hashlib.sha256(t.tobytes()).hexdigest() == digest
        grads = info["grads"]
        assert set(vars(grads)) == {"entity_rows", "entity", "relation", "attention"}
        checked.append((info["epoch"], info["batch"]))

    res = train(graph, seeds, cfg, params, targets, on_batch=on_batch)
    again = init_targets(graph, fresh)
    epochs = len({e for e, _ in checked})
    ok = epochs == 10 and np.array_equal(again, res.targets) and res.targets is targets
    report(2, ok, f"{len(checked)} batches over {epochs} epochs asserted: targets never written, "
                  "no target gradient is formed, final targets equal the post-init forward bitwise")


# 3. sampling guarantees

def test_criterion_3_sampling(report):
    rng = np.random.default_rng(7)
    violations = 0
    for _ in range(1000):
        k = int(rng.integers(1, 40))
        alpha = rng.dirichlet(np.full(k, rng.uniform(0.05, 5)))
        tau = float(rng.choice([1.0, rng.uniform(0.1, 10)]))
        e = np.sum(alpha * alpha)
        t = sample_counts(np.array([e]), tau)[0]
        violations += not (t >= 1 and t * e >= tau)
    kg = KnowledgeGraph(8, 1, [[0, 0, i] for i in range(1, 8)])
    g = merge_graphs(kg, KnowledgeGraph(1, 1, np.zeros((0, 3))))
    deg = g.edges.degrees()
    worst = 0.0
    for trial in range(20):
        probs = np.repeat(1.0 / deg, deg)
        probs[:deg[0]] = rng.dirichlet(np.ones(deg[0]))
        plan = plan_from_probs(g, probs, tau=1e-9)  # t = 1: one draw per listed center
        draws = draw_edges(g, plan, np.zeros(10_000, dtype=np.int64), rng)
        freq = np.bincount(draws, minlength=deg[0])[:deg[0]] / 10_000
        worst = max(worst, np.max(np.abs(freq - probs[:deg[0]])))
    ok = violations == 0 and worst <= 0.03
    report(3, ok, f"budget violations {violations}/1000; max |freq - plan| {worst:.4f} at 1e4 draws (limit 0.03)")


# 4. synthetic recovery

def test_criterion_4_synthetic_recovery(report):
    graph, seeds = synthetic_setup()
    t0 = time.perf_counter()
    res = train(graph, seeds, RunConfig(max_epochs=50))
    elapsed = time.perf_counter() - t0
    h = hits1(res.params, res.targets, graph, seeds)
    ok = h >= 0.90 and elapsed < 300
    report(4, ok, f"Hits@1 {h:.3f} (need >= 0.90) after {len(res.state.dev_history)} epochs in {elapsed:.0f}s")


# 5. anti-collapse

def unaligned_collapse(params, graph, seeds, seed):
    final, _ = forward(graph.edges, params)
    used = np.concatenate([seeds.train, seeds.dev]).ravel()
    free = np.setdiff1d(np.arange(graph.num_entities), used)
    return collapse_metric(final[free], 100, seed)


def test_criterion_5_anti_collapse(report):
    with_sg, without = [], []
    for seed in range(3):
        graph, seeds = synthetic_setup(seed=seed)
        base = RunConfig(max_epochs=50, rng_seed=seed)
        a = train(graph, seeds, base)
        b = train(graph, seeds, base.replace(stop_gradient=False))
        with_sg.append(unaligned_collapse(a.params, graph, seeds, seed))
        without.append(unaligned_collapse(b.params, graph, seeds, seed))
    ok_sg = all(c < 0.9 for c in with_sg)
    ok_ablation = all(c > 0.99 for c in without)
    report(5, ok_sg and ok_ablation,
           f"collapse with stop-gradient {np.round(with_sg, 3).tolist()} (need < 0.9: {'ok' if ok_sg else 'no'}); "
           f"live ablation {np.round(without, 3).tolist()} (need > 0.99: {'ok' if ok_ablation else 'no'})")


# 6. semi-supervised gain

def test_criterion_6_semi_supervised(report):
    graph, seeds = synthetic_setup(ratios=(0.08, 0.02))
    cfg = RunConfig(max_epochs=50)
    basic = train(graph, seeds, cfg)
    h_basic = hits1(basic.params, basic.targets, graph, seeds)
    semi = run_semi(graph, seeds, cfg)
    h_semi = hits1(semi.params, semi.targets, graph, seeds)
    norev = run_semi(graph, seeds, cfg.replace(epsilon=float("inf")))
    h_norev = hits1(norev.params, norev.targets, graph, seeds)
    gain, gap = h_semi - h_basic, abs(h_semi - h_norev)
    ok = gain >= 0.03 and semi.readd_rate < 0.20 and gap <= 0.02
    report(6, ok, f"basic {h_basic:.3f} -> semi {h_semi:.3f} (gain {100 * gain:.1f} pts, need >= 3); "
                  f"re-add rate {semi.readd_rate:.3f} (< 0.20); no-review {h_norev:.3f}, gap {100 * gap:.1f} pts (<= 2)")


# 7. real data

def dbp15k_dir():
    root = os.environ.get(DATA_DIR_ENV)
    if not root:
        return None
    for cand in (Path(root), Path(root) / "zh_en", Path(root) / "DBP15K" / "zh_en"):
        if (cand / "triples_1").is_file() and (cand / "ref_ent_ids").is_file():
            return cand
    return None


@pytest.mark.network
def test_criterion_7_dbp15k(report, capsys):
    root = dbp15k_dir()
    if root is None:
        with capsys.disabled():
            print(f"\n[criterion 7] SKIP: DBP15K ZH-EN not found (set {DATA_DIR_ENV}); real-data targets unverified")
        pytest.skip("DBP15K ZH-EN dataset not available")
    data = load_dataset(root)
    cfg = RunConfig()
    basic = train(data.graph, data.seeds, cfg)
    h_basic = hits1(basic.params, basic.targets, data.graph, data.seeds)
    semi = run_semi(data.graph, data.seeds, cfg)
    h_semi = hits1(semi.params, semi.targets, data.graph, data.seeds)
    small = train(data.graph, data.seeds, cfg.replace(dim=100))
    h_small = hits1(small.params, small.targets, data.graph, data.seeds)
    b128 = train(data.graph, data.seeds, cfg.replace(batch_size=128))
    h128 = hits1(b128.params, b128.targets, data.graph, data.seeds)
    ok = (abs(h_basic - 0.702) <= 0.03 and abs(h_semi - 0.802) <= 0.03
          and h_basic - h_small <= 0.04 and h_basic - h128 <= 0.03)
    report(7, ok, f"basic {h_basic:.3f} (0.702±0.03), semi {h_semi:.3f} (0.802±0.03), "
                  f"dim100 {h_small:.3f}, batch128 {h128:.3f}")


# 8. scalability

def batch_peak_bytes(n, batch_size, tau=1.0, batches=20, dim=32):
    """Median traced peak of one training step (sample, forward, backward, update).

    Allocations that live for the whole run (parameters, optimizer state,
    targets, the graph index and the epoch's sampling plan) exist before the
    measurement starts and are not counted.
    """
    graph, seeds = synthetic_setup(n)
    cfg = RunConfig(dim=dim, batch_size=batch_size, tau=tau)
    params = init_params(graph.num_entities, graph.num_relations, dim, 2, np.random.default_rng(0))
    targets = init_targets(graph, params)
    state = TrainState(RMSprop.for_params(params))
    plan = build_plan(graph, params, 1, tau)
    plan.search_keys(graph.edges.offsets)
    peaks = []
    for b in range(batches):
        batch = seeds.train[b * batch_size:(b + 1) * batch_size]
        tracemalloc.start()
        base = tracemalloc.get_traced_memory()[0]
        train_batch(graph, params, targets, plan, batch, cfg, np.random.default_rng(b), state)
        peaks.append(tracemalloc.get_traced_memory()[1] - base)
        tracemalloc.stop()
    return float(np.median(peaks))


def epoch_seconds(n, batch_size=64, epochs=3):
    graph, seeds = synthetic_setup(n)
    res = train(graph, seeds, RunConfig(dim=32, batch_size=batch_size, max_epochs=epochs, patience=epochs))
    return float(np.median([r["wall_time"] for r in res.state.log])), graph.edges.num_edges


def test_criterion_8_scalability(report):
    # small graphs share neighbourhoods inside a batch, which shrinks the
    # sampled subgraph; the sizes below are past that regime
    m_small = batch_peak_bytes(10000, 16)
    m_large = batch_peak_bytes(40000, 16)
    m_batch = batch_peak_bytes(40000, 64)
    m_tau = batch_peak_bytes(40000, 16, tau=2.0)
    mem_ratio = m_large / m_small
    t_small, e_small = epoch_seconds(4000)
    t_large, e_large = epoch_seconds(16000)
    time_ratio, triple_ratio = t_large / t_small, e_large / e_small
    ok = (abs(mem_ratio - 1) <= 0.15 and m_batch > m_large and m_tau > m_large
          and time_ratio <= triple_ratio * 1.25)
    report(8, ok, f"step peak {m_small / 1e6:.1f} MB -> {m_large / 1e6:.1f} MB at 4x entities (ratio {mem_ratio:.3f}); "
                  f"grows with batch ({m_batch / 1e6:.1f} MB) and tau ({m_tau / 1e6:.1f} MB); epoch time x{time_ratio:.2f} "
                  f"for x{triple_ratio:.2f} triples (limit x{1.25 * triple_ratio:.2f})")


# 9. metric correctness

def test_criterion_9_metrics(report):
    r = metrics([1, 2, 10], ks=(1, 10))
    hand = r.hits_at[1] == pytest.approx(1 / 3) and r.mrr == pytest.approx(1.6 / 3) and r.hits_at[10] == 1.0
    rng = np.random.default_rng(9)
    n = 1000
    F, T = rng.normal(size=(2 * n, 16)), rng.normal(size=(2 * n, 16))
    pairs = np.stack([rng.permutation(n), n + rng.permutation(n)], 1)
    src, dst = pairs[:, 0], pairs[:, 1]
    cols = np.sort(dst)
    s = score_block(normalize_rows(F), normalize_rows(T), src, cols)
    oracle = np.array([np.flatnonzero(cols[np.argsort(-s[i], kind="stable")] == dst[i])[0] + 1 for i in range(n)])
    got = rank_all(F, T, pairs, block_size=97)
    exact = np.array_equal(got, oracle)
    m_got, m_oracle = metrics(got, (1, 10)), metrics(oracle, (1, 10))
    exact = exact and m_got.hits_at == m_oracle.hits_at and m_got.mrr == m_oracle.mrr
    report(9, hand and exact, f"hand example MRR {r.mrr:.4f}, Hits@1 {r.hits_at[1]:.4f}; "
                              f"1000-pair ranks equal the argsort oracle bit-exactly: {exact}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
