"""Attention-driven subgraph sampling for mini-batch training.

Each entity draws ``t_e`` incident triples with replacement, using its
first-layer attention coefficients as the sampling distribution. ``t_e`` is
chosen so that ``t_e * E[alpha_e] >= tau`` where ``E[alpha_e]`` is the sum of
squared coefficients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import ModelParams, attention_coefficients
from .kg import EdgeIndex, JointGraph


@dataclass
class SamplingPlan:
    probs: np.ndarray  # (num_edges,) aligned with graph.edges
    expectation: np.ndarray  # (num_entities,) sum of squared probs per center
    counts: np.ndarray  # (num_entities,) draws t_e
    tau: float
    snapshot_epoch: int
    _search_keys: np.ndarray | None = None

    def search_keys(self, offsets: np.ndarray) -> np.ndarray:
        # center index + cumulative prob inside its group, strictly increasing overall
        if self._search_keys is None:
            counts = np.diff(offsets)
            cum = np.cumsum(self.probs)
            base = np.repeat(cum[offsets[:-1]] - self.probs[offsets[:-1]], counts)
            self._search_keys = np.repeat(np.arange(len(counts)), counts) + (cum - base)
        return self._search_keys


def sample_counts(expectation: np.ndarray, tau: float) -> np.ndarray:
    t = np.maximum(np.ceil(tau / expectation), 1).astype(np.int64)
    # guard against ceil landing one short after rounding
    t += (t * expectation < tau)
    return t


def plan_from_probs(graph: JointGraph, probs: np.ndarray, tau: float = 1.0, epoch: int = 0) -> SamplingPlan:
    offsets = graph.edges.offsets
    probs = np.asarray(probs, dtype=float)
    expectation = np.add.reduceat(probs * probs, offsets[:-1])
    return SamplingPlan(probs, expectation, sample_counts(expectation, tau), tau, epoch)


def uniform_plan(graph: JointGraph, tau: float = 1.0) -> SamplingPlan:
    deg = graph.edges.degrees()
    return plan_from_probs(graph, np.repeat(1.0 / deg, deg), tau, 0)


def build_plan(graph: JointGraph, params: ModelParams, epoch: int, tau: float = 1.0) -> SamplingPlan:
    """Plan from the first encoder layer's attention at the current parameters."""
    _, alpha = attention_coefficients(graph.edges, params.entity, params.relation, params.attention[0])
    return plan_from_probs(graph, alpha, tau, epoch)


@dataclass
class SubgraphBatch:
    batch_pairs: np.ndarray  # (b, 2) global ids
    nodes: np.ndarray  # local row -> global entity id
    edges: EdgeIndex  # local ids, log_weight = log multiplicity
    sampled_edges: np.ndarray  # graph edge ids of distinct sampled triples
    multiplicity: np.ndarray  # draws per sampled triple
    num_expanded: int  # nodes [0, num_expanded) own sampled edges; the rest a self-loop

    def local(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        sorter = np.argsort(self.nodes)
        pos = np.searchsorted(self.nodes, ids, sorter=sorter)
        pos = np.minimum(pos, len(self.nodes) - 1)
        local = sorter[pos]
        if not np.array_equal(self.nodes[local], ids):
            raise KeyError("entity not in subgraph")
        return local

    @property
    def local_pairs(self) -> np.ndarray:
        return self.local(self.batch_pairs).reshape(-1, 2)


def draw_edges(graph: JointGraph, plan: SamplingPlan, centers: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Graph edge ids: ``counts[c]`` draws with replacement for every center."""
    offsets = graph.edges.offsets
    reps = plan.counts[centers]
    owner = np.repeat(centers, reps)
    keys = owner + rng.random(len(owner))
    idx = np.searchsorted(plan.search_keys(offsets), keys, side="right")
    return np.clip(idx, offsets[owner], offsets[owner + 1] - 1)


def sample_subgraph(graph: JointGraph, plan: SamplingPlan, batch_pairs, depth: int,
                    rng: np.random.Generator | int) -> SubgraphBatch:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    batch_pairs = np.asarray(batch_pairs, dtype=np.int64).reshape(-1, 2)
    ed = graph.edges
    nodes = list(dict.fromkeys(batch_pairs.ravel().tolist()))
    known = set(nodes)
    drawn = []
    frontier = np.array(nodes, dtype=np.int64)
    for _ in range(depth):
        if not len(frontier):
            break
        idx = draw_edges(graph, plan, frontier, rng)
        drawn.append(idx)
        new = []
        for e in np.unique(ed.neighbor[idx]).tolist():
            if e not in known:
                known.add(e)
                new.append(e)
        nodes.extend(new)
        frontier = np.array(new, dtype=np.int64)
    num_expanded = len(nodes) - len(frontier)
    nodes = np.array(nodes, dtype=np.int64)
    sorter = np.argsort(nodes)

    def local_of(ids):
        return sorter[np.searchsorted(nodes, ids, sorter=sorter)]

    all_idx = np.concatenate(drawn) if drawn else np.zeros(0, dtype=np.int64)
    uniq, mult = np.unique(all_idx, return_counts=True)
    lc = local_of(ed.center[uniq])
    rel = ed.relation[uniq]
    ln = local_of(ed.neighbor[uniq])
    lw = np.log(mult.astype(float))
    # unexpanded outer-hop nodes only need a placeholder self-loop
    outer = np.arange(num_expanded, len(nodes))
    lc = np.concatenate([lc, outer])
    rel = np.concatenate([rel, np.full(len(outer), graph.self_relation)])
    ln = np.concatenate([ln, outer])
    lw = np.concatenate([lw, np.zeros(len(outer))])
    order = np.lexsort((ln, rel, lc))
    edges = EdgeIndex(len(nodes), lc[order], rel[order], ln[order], lw[order])
    return SubgraphBatch(batch_pairs, nodes, edges, uniq, mult, num_expanded)


def sample_stats(graph: JointGraph, plan: SamplingPlan) -> np.ndarray:
    """Rows of (entity, degree, E[alpha], t) for every entity."""
    deg = graph.edges.degrees()
    return np.column_stack([np.arange(graph.num_entities), deg, plan.expectation, plan.counts])
