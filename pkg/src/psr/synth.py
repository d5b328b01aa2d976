"""Synthetic permutation-recovery instances.

An ideal graph G is relabelled by two random permutations and lightly
perturbed to give two KGs with a fully known alignment. The helpers here
also expose the permutation-matrix constraints and the least-squares
objective used in the analysis of why alignment reduces to recovering a
permutation.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .encoder import elu
from .kg import KnowledgeGraph


@dataclass(frozen=True)
class PermutationMap:
    p: np.ndarray  # p[i] = image of i

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.int64)
        if not np.array_equal(np.sort(p), np.arange(len(p))):
            raise ValueError("not a permutation")
        object.__setattr__(self, "p", p)

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "PermutationMap":
        return cls(rng.permutation(n))

    @classmethod
    def identity(cls, n: int) -> "PermutationMap":
        return cls(np.arange(n))

    def __len__(self):
        return len(self.p)

    def inverse(self) -> "PermutationMap":
        inv = np.empty_like(self.p)
        inv[self.p] = np.arange(len(self.p))
        return PermutationMap(inv)

    def compose(self, other: "PermutationMap") -> "PermutationMap":
        """self after other: i -> self[other[i]]."""
        return PermutationMap(self.p[other.p])

    def matrix(self) -> np.ndarray:
        """Integer P with P[p[i], i] = 1, so that P @ e_i = e_{p[i]}."""
        n = len(self.p)
        m = np.zeros((n, n), dtype=np.int64)
        m[self.p, np.arange(n)] = 1
        return m


@dataclass(frozen=True)
class NoiseSpec:
    edge_delete_prob: float = 0.0
    edge_add_count: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 <= self.edge_delete_prob <= 1:
            raise ValueError("edge_delete_prob must be in [0, 1]")
        if self.edge_add_count < 0:
            raise ValueError("edge_add_count must be >= 0")


@dataclass(frozen=True)
class SyntheticInstance:
    ideal: KnowledgeGraph
    instance1: KnowledgeGraph
    instance2: KnowledgeGraph
    p1: PermutationMap
    p2: PermutationMap

    @property
    def ground_truth(self) -> np.ndarray:
        """(n, 2) pairs (instance1 id, instance2 id), sorted by instance1 id."""
        pairs = np.stack([self.p1.p, self.p2.p], axis=1)
        return pairs[np.argsort(pairs[:, 0])]


def generate_ideal(num_entities: int, num_relations: int, avg_degree: float, rng_seed: int) -> KnowledgeGraph:
    """Connected random multi-relational graph with about n*avg_degree/2 triples."""
    if avg_degree < 1:
        raise ValueError("avg_degree must be >= 1")
    rng = np.random.default_rng(rng_seed)
    n = num_entities
    order = rng.permutation(n)
    # random recursive tree over a shuffled order keeps the graph connected
    parents = order[(rng.random(n - 1) * np.arange(1, n)).astype(np.int64)] if n > 1 else np.zeros(0, np.int64)
    tree = np.stack([parents, order[1:]], axis=1)
    flip = rng.random(len(tree)) < 0.5
    tree[flip] = tree[flip][:, ::-1]
    target = max(int(round(n * avg_degree / 2)), n - 1)
    edges = {(int(h), int(t)) for h, t in tree}
    max_edges = n * (n - 1) // 2  # one edge per unordered pair
    while len(edges) < min(target, max_edges):
        need = min(target, max_edges) - len(edges)
        h = rng.integers(0, n, 2 * need)
        t = rng.integers(0, n, 2 * need)
        for a, b in zip(h.tolist(), t.tolist()):
            if a != b and (a, b) not in edges and (b, a) not in edges:
                edges.add((a, b))
                if len(edges) >= target:
                    break
    ht = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
    rel = rng.integers(0, num_relations, len(ht))
    return KnowledgeGraph(n, num_relations, np.stack([ht[:, 0], rel, ht[:, 1]], axis=1))


def derive_instance(ideal: KnowledgeGraph, perm: PermutationMap, noise: NoiseSpec = NoiseSpec()) -> KnowledgeGraph:
    if len(perm) != ideal.num_entities:
        raise ValueError("permutation size does not match the ideal graph")
    rng = np.random.default_rng(noise.rng_seed)
    t = ideal.triples.copy()
    t[:, 0] = perm.p[t[:, 0]]
    t[:, 2] = perm.p[t[:, 2]]
    t = t[rng.random(len(t)) >= noise.edge_delete_prob]
    n = ideal.num_entities
    if noise.edge_add_count and n > 1:
        have = {tuple(x) for x in t.tolist()}
        added = []
        while len(added) < noise.edge_add_count:
            h, tl = rng.integers(0, n, 2)
            r = rng.integers(0, ideal.num_relations)
            trip = (int(h), int(r), int(tl))
            if h != tl and trip not in have:
                have.add(trip)
                added.append(trip)
        t = np.concatenate([t, np.array(added, dtype=np.int64)])
    return KnowledgeGraph(n, ideal.num_relations, t)


def make_instance(num_entities=500, num_relations=5, avg_degree=6.0, delete_prob=0.0, add_count=0,
                  rng_seed=0) -> SyntheticInstance:
    ideal = generate_ideal(num_entities, num_relations, avg_degree, rng_seed)
    rng = np.random.default_rng([rng_seed, 1])
    p1 = PermutationMap.random(num_entities, rng)
    p2 = PermutationMap.random(num_entities, rng)
    g1 = derive_instance(ideal, p1, NoiseSpec(delete_prob, add_count, rng_seed * 2 + 1))
    g2 = derive_instance(ideal, p2, NoiseSpec(delete_prob, add_count, rng_seed * 2 + 2))
    return SyntheticInstance(ideal, g1, g2, p1, p2)


def normalized_adjacency(kg: KnowledgeGraph) -> sp.csr_matrix:
    """D^-1/2 (A + I) D^-1/2 over the undirected, relation-collapsed graph."""
    a = kg.adjacency() + sp.identity(kg.num_entities, format="csr")
    d = np.asarray(a.sum(axis=1)).ravel()
    s = sp.diags(1.0 / np.sqrt(d))
    return (s @ a @ s).tocsr()


def alignment_permutation(alignment, n: int) -> sp.csr_matrix:
    """Matrix with P[i, j] = 1 for each aligned pair (i in G1, j in G2)."""
    pairs = np.asarray(alignment, dtype=np.int64).reshape(-1, 2)
    if len(pairs) != n or len(np.unique(pairs[:, 0])) != n or len(np.unique(pairs[:, 1])) != n:
        raise ValueError("alignment must be a full one-to-one mapping")
    return sp.csr_matrix((np.ones(n), (pairs[:, 0], pairs[:, 1])), shape=(n, n))


def check_constraints(instance1: KnowledgeGraph, instance2: KnowledgeGraph, alignment, rows=None) -> float:
    """Largest L1 gap between row i of A1 @ P and row j of A2 over aligned (i, j).

    ``alignment`` must be a full bijection (it defines P); ``rows`` restricts
    the check to a subset of pairs, e.g. the seed pairs.
    """
    n = instance1.num_entities
    pmat = alignment_permutation(alignment, n)
    a1 = normalized_adjacency(instance1)
    a2 = normalized_adjacency(instance2)
    pairs = np.asarray(alignment if rows is None else rows, dtype=np.int64).reshape(-1, 2)
    lhs = (a1 @ pmat)[pairs[:, 0]]
    rhs = a2[pairs[:, 1]]
    diff = abs(lhs - rhs)
    return float(np.asarray(diff.sum(axis=1)).max()) if len(pairs) else 0.0


def lsq_objective(instance1: KnowledgeGraph, instance2: KnowledgeGraph, h1, w1, h2, w2, alignment,
                  activation=elu) -> float:
    a1 = normalized_adjacency(instance1)
    a2 = normalized_adjacency(instance2)
    pairs = np.asarray(alignment, dtype=np.int64).reshape(-1, 2)
    z1 = activation(a1 @ (np.asarray(h1) @ np.asarray(w1)))
    z2 = activation(a2 @ (np.asarray(h2) @ np.asarray(w2)))
    return float(np.sum((z1[pairs[:, 0]] - z2[pairs[:, 1]]) ** 2))


def collapse_metric(embeddings: np.ndarray, sample: int = 100, rng_seed: int = 0) -> float:
    """Mean cosine similarity over all unordered pairs of ``sample`` random rows."""
    if sample < 2:
        raise ValueError("need at least two rows")
    x = np.asarray(embeddings, dtype=float)
    rng = np.random.default_rng(rng_seed)
    idx = rng.choice(len(x), size=min(sample, len(x)), replace=False)
    xn = x[idx] / np.linalg.norm(x[idx], axis=1, keepdims=True)
    c = xn @ xn.T
    iu = np.triu_indices(len(idx), k=1)
    return float(c[iu].mean())


def write_dataset(inst: SyntheticInstance, out_dir, seed_pairs: np.ndarray | None = None) -> Path:
    """Write the instance in the directory layout ``load_dataset`` reads.

    KG1 keeps ids 0..n-1; KG2 entities are written as n..2n-1 so that raw
    ids are globally unique, as in the public benchmark files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = inst.instance1.num_entities
    nr = inst.instance1.num_relations

    def write_triples(path, t, e_off, r_off):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for h, r, tl in t.tolist():
                f.write(f"{h + e_off}\t{r + r_off}\t{tl + e_off}\n")

    def write_ids(path, off, count, tag):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for i in range(count):
                f.write(f"{i + off}\t{tag}/{i}\n")

    write_triples(out / "triples_1", inst.instance1.triples, 0, 0)
    write_triples(out / "triples_2", inst.instance2.triples, n, nr)
    write_ids(out / "ent_ids_1", 0, n, "kg1")
    write_ids(out / "ent_ids_2", n, inst.instance2.num_entities, "kg2")
    pairs = inst.ground_truth if seed_pairs is None else seed_pairs
    with open(out / "ref_ent_ids", "w", encoding="utf-8", newline="\n") as f:
        for a, b in pairs.tolist():
            f.write(f"{a}\t{b + n}\n")
    return out
