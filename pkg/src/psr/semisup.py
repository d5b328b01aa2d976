"""Incremental semi-supervised alignment.

Each iteration trains only on the newest pairs. Afterwards, previously
trained pairs whose similarity dropped by more than epsilon are queued for
review, and mutual nearest neighbours among the still-unaligned entities
become new training pairs. The loop ends when no new pair is generated.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import encoder
from .config import RunConfig
from .evaluate import evaluate
from .kg import JointGraph, SeedAlignment
from .trainer import TrainState, init_targets, normalize_rows, score_block, train

log = logging.getLogger(__name__)


@dataclass
class CandidatePools:
    kg1: np.ndarray  # sorted entity ids
    kg2: np.ndarray

    @classmethod
    def from_graph(cls, graph: JointGraph, seeds: SeedAlignment) -> "CandidatePools":
        used = np.concatenate([seeds.train, seeds.dev]).reshape(-1, 2)
        return cls(np.setdiff1d(graph.kg1_entities(), used[:, 0]),
                   np.setdiff1d(graph.kg2_entities(), used[:, 1]))

    def remove(self, pairs: np.ndarray) -> None:
        self.kg1 = np.setdiff1d(self.kg1, pairs[:, 0])
        self.kg2 = np.setdiff1d(self.kg2, pairs[:, 1])


@dataclass
class PairMemory:
    """Output-embedding snapshots of trained pairs, keyed by (e_i, e_j)."""

    snapshots: dict = field(default_factory=dict)

    def update(self, pairs, final: np.ndarray) -> None:
        for a, b in np.asarray(pairs).reshape(-1, 2).tolist():
            self.snapshots[(a, b)] = (final[a].copy(), final[b].copy())

    def __len__(self):
        return len(self.snapshots)


def pair_similarity(fi: np.ndarray, fj: np.ndarray, ti: np.ndarray, tj: np.ndarray) -> np.ndarray:
    """Mean of the two cross cosines, i.e. half the alignment score."""
    fi, fj, ti, tj = (normalize_rows(np.atleast_2d(x)) for x in (fi, fj, ti, tj))
    return 0.5 * (np.einsum("ij,ij->i", fi, tj) + np.einsum("ij,ij->i", fj, ti))


def review_pairs(memory: PairMemory, current: np.ndarray, targets: np.ndarray, epsilon: float) -> np.ndarray:
    """Pairs whose similarity fell by strictly more than ``epsilon``."""
    if not len(memory) or not np.isfinite(epsilon):
        return np.zeros((0, 2), dtype=np.int64)
    keys = np.array(list(memory.snapshots), dtype=np.int64)
    last_i = np.stack([v[0] for v in memory.snapshots.values()])
    last_j = np.stack([v[1] for v in memory.snapshots.values()])
    ti, tj = targets[keys[:, 0]], targets[keys[:, 1]]
    before = pair_similarity(last_i, last_j, ti, tj)
    now = pair_similarity(current[keys[:, 0]], current[keys[:, 1]], ti, tj)
    return keys[before - now > epsilon]


def mutual_nn_from_scores(scores: np.ndarray) -> np.ndarray:
    """Index pairs (row, col) that are each other's argmax; ties go to the lowest index."""
    scores = np.asarray(scores)
    if scores.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    row_best = np.argmax(scores, axis=1)
    col_best = np.argmax(scores, axis=0)
    rows = np.flatnonzero(col_best[row_best] == np.arange(scores.shape[0]))
    return np.stack([rows, row_best[rows]], axis=1)


def mutual_nn_pairs(final: np.ndarray, targets: np.ndarray, pools: CandidatePools,
                    block_size: int = 1024) -> np.ndarray:
    """Mutual nearest neighbours between the pools; matched entities leave the pools."""
    p1, p2 = pools.kg1, pools.kg2
    if not len(p1) or not len(p2):
        return np.zeros((0, 2), dtype=np.int64)
    fn, tn = normalize_rows(final), normalize_rows(targets)
    row_best = np.empty(len(p1), dtype=np.int64)
    col_val = np.full(len(p2), -np.inf)
    col_best = np.zeros(len(p2), dtype=np.int64)
    for lo in range(0, len(p1), block_size):
        s = score_block(fn, tn, p1[lo:lo + block_size], p2)
        row_best[lo:lo + len(s)] = np.argmax(s, axis=1)
        bi = np.argmax(s, axis=0)
        bv = s[bi, np.arange(len(p2))]
        better = bv > col_val  # strict: earlier blocks (lower ids) win ties
        col_val[better] = bv[better]
        col_best[better] = bi[better] + lo
    rows = np.flatnonzero(col_best[row_best] == np.arange(len(p1)))
    pairs = np.stack([p1[rows], p2[row_best[rows]]], axis=1)
    pools.remove(pairs)
    return pairs


@dataclass
class SemiResult:
    params: encoder.ModelParams
    targets: np.ndarray
    pairs: np.ndarray  # seed train pairs plus every generated pair
    report: list
    total_reviewed: int
    total_trained: int

    @property
    def readd_rate(self) -> float:
        return self.total_reviewed / max(self.total_trained, 1)


def run_semi(graph: JointGraph, seeds: SeedAlignment, config: RunConfig, report_path=None,
             on_iteration=None) -> SemiResult:
    params = encoder.init_params(graph.num_entities, graph.num_relations, config.dim, config.depth,
                                 np.random.default_rng([config.rng_seed, 0]))
    targets = init_targets(graph, params)
    state = None
    S = seeds.train
    memory = PairMemory()
    pools = CandidatePools.from_graph(graph, seeds)
    accepted = [seeds.train]
    report = []
    total_reviewed = 0
    trained = {tuple(p) for p in seeds.train.tolist()}
    for it in range(config.max_iterations):
        res = train(graph, seeds, config, params, targets, state, pairs=S)
        params, state = res.params, res.state
        final, _ = encoder.forward(graph.edges, params)
        reviewed = review_pairs(memory, final, targets, config.epsilon)
        new = mutual_nn_pairs(final, targets, pools, config.block_size)
        memory.update(S, final)
        total_reviewed += len(reviewed)
        trained.update(tuple(p) for p in new.tolist())
        accepted.append(new)
        rec = {"iteration": it, "generated": int(len(new)), "reviewed": int(len(reviewed)),
               "pool_kg1": int(len(pools.kg1)), "pool_kg2": int(len(pools.kg2)),
               "dev_loss": float(state.best_dev),
               "test_hits1": evaluate(final, targets, seeds.test, (1,)).hits_at[1] if len(seeds.test) else None}
        report.append(rec)
        log.info("iteration %d: %s", it, rec)
        if report_path is not None:
            with open(report_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(rec) + "\n")
        if on_iteration is not None:
            on_iteration(rec, params, targets)
        if not len(new):
            if len(reviewed):
                res = train(graph, seeds, config, params, targets, state, pairs=reviewed)
                params, state = res.params, res.state
            break
        S = np.concatenate([reviewed, new]).astype(np.int64)
    return SemiResult(params, targets, np.concatenate(accepted), report, total_reviewed, len(trained))
