"""Knowledge graph loading, merging and seed handling.

Two KGs are merged into one disjoint-union graph. Entities of the second
graph are offset by |E1| and its relations by |R1|; every base relation gets
an inverse relation and one global self-loop relation is appended.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

DATA_DIR_ENV = "PSR_DATA_DIR"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class KnowledgeGraph:
    num_entities: int
    num_relations: int
    triples: np.ndarray  # (T, 3) int64, rows (head, relation, tail)

    def __post_init__(self):
        t = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        if len(t):
            if t.min() < 0:
                raise DataError("negative id in triples")
            if t[:, [0, 2]].max() >= self.num_entities:
                raise DataError("entity id out of range")
            if t[:, 1].max() >= self.num_relations:
                raise DataError("relation id out of range")
        t = np.unique(t, axis=0)
        t.flags.writeable = False
        object.__setattr__(self, "triples", t)

    @classmethod
    def from_triples(cls, triples, num_entities=None, num_relations=None):
        """Build a graph; id space sizes default to max id + 1."""
        t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        if num_entities is None:
            num_entities = int(t[:, [0, 2]].max()) + 1 if len(t) else 0
        if num_relations is None:
            num_relations = int(t[:, 1].max()) + 1 if len(t) else 0
        return cls(num_entities, num_relations, t)

    @property
    def num_triples(self) -> int:
        return len(self.triples)

    def adjacency(self) -> sp.csr_matrix:
        """Undirected 0/1 adjacency with relations collapsed."""
        n = self.num_entities
        h, t = self.triples[:, 0], self.triples[:, 2]
        a = sp.coo_matrix((np.ones(len(h)), (h, t)), shape=(n, n)).tocsr()
        a = a + a.T
        a.data[:] = 1.0
        return a


@dataclass
class EdgeIndex:
    """Directed (center, relation, neighbor) edges grouped by center.

    Every center in [0, num_nodes) owns at least one edge, so per-center
    softmax groups are never empty. ``log_weight`` adds a constant to each
    attention logit; sampled subgraphs use it to carry edge multiplicity.
    """

    num_nodes: int
    center: np.ndarray
    relation: np.ndarray
    neighbor: np.ndarray
    log_weight: np.ndarray | None = None
    offsets: np.ndarray = field(init=False)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.int64)
        self.relation = np.asarray(self.relation, dtype=np.int64)
        self.neighbor = np.asarray(self.neighbor, dtype=np.int64)
        if len(self.center) and np.any(np.diff(self.center) < 0):
            raise ValueError("edges must be sorted by center")
        counts = np.bincount(self.center, minlength=self.num_nodes)
        if len(counts) != self.num_nodes or np.any(counts == 0):
            raise ValueError("every node needs at least one incident edge")
        self.offsets = np.concatenate([[0], np.cumsum(counts)])
        self._neighbor_scatter = None

    @property
    def num_edges(self) -> int:
        return len(self.center)

    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    def neighbor_scatter(self) -> sp.csr_matrix:
        """(num_nodes x num_edges) 0/1 matrix summing edge rows into neighbors."""
        if self._neighbor_scatter is None:
            m = self.num_edges
            self._neighbor_scatter = sp.csr_matrix(
                (np.ones(m), (self.neighbor, np.arange(m))), shape=(self.num_nodes, m))
        return self._neighbor_scatter

    def chunks(self, max_edges: int = 1 << 14):
        """Yield (node_lo, node_hi) ranges covering about ``max_edges`` edges each."""
        n = self.num_nodes
        lo = 0
        while lo < n:
            target = self.offsets[lo] + max_edges
            hi = int(np.searchsorted(self.offsets, target, side="right")) - 1
            hi = min(max(hi, lo + 1), n)
            yield lo, hi
            lo = hi


@dataclass
class JointGraph:
    kg1_range: tuple[int, int]
    kg2_range: tuple[int, int]
    num_base_relations: int
    triples: np.ndarray  # all directed triples incl. inverse and self-loops, sorted
    kg1_relations: int = 0

    def __post_init__(self):
        self.triples = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        self._edges = None

    @property
    def num_entities(self) -> int:
        return self.kg2_range[1]

    @property
    def num_relations(self) -> int:
        return 2 * self.num_base_relations + 1

    @property
    def self_relation(self) -> int:
        return 2 * self.num_base_relations

    def inverse(self, r):
        r = np.asarray(r)
        return np.where(r < self.num_base_relations, r + self.num_base_relations,
                        np.where(r == self.self_relation, r, r - self.num_base_relations))

    @property
    def edges(self) -> EdgeIndex:
        if self._edges is None:
            t = self.triples
            self._edges = EdgeIndex(self.num_entities, t[:, 0], t[:, 1], t[:, 2])
        return self._edges

    def neighbors(self, e: int) -> list[tuple[int, int]]:
        """Incident (neighbor, relation) pairs of entity ``e``."""
        ed = self.edges
        a, b = ed.offsets[e], ed.offsets[e + 1]
        return list(zip(ed.neighbor[a:b].tolist(), ed.relation[a:b].tolist()))

    def side(self, e) -> np.ndarray:
        """0 for KG1 entities, 1 for KG2 entities."""
        return (np.asarray(e) >= self.kg2_range[0]).astype(np.int64)

    def kg1_entities(self) -> np.ndarray:
        return np.arange(*self.kg1_range)

    def kg2_entities(self) -> np.ndarray:
        return np.arange(*self.kg2_range)

    def save(self, path) -> None:
        np.savez(path, kg1_range=np.array(self.kg1_range), kg2_range=np.array(self.kg2_range),
                 num_base_relations=self.num_base_relations, kg1_relations=self.kg1_relations,
                 triples=self.triples)

    @classmethod
    def load(cls, path) -> "JointGraph":
        with np.load(path) as z:
            return cls(tuple(int(x) for x in z["kg1_range"]), tuple(int(x) for x in z["kg2_range"]),
                       int(z["num_base_relations"]), z["triples"], int(z["kg1_relations"]))


@dataclass(frozen=True)
class SeedAlignment:
    train: np.ndarray  # (n, 2)
    dev: np.ndarray
    test: np.ndarray

    def all_pairs(self) -> np.ndarray:
        return np.concatenate([self.train, self.dev, self.test])

    def check(self, graph: JointGraph | None = None) -> None:
        pairs = self.all_pairs()
        _check_one_to_one(pairs)
        if graph is not None and len(pairs):
            lo1, hi1 = graph.kg1_range
            lo2, hi2 = graph.kg2_range
            if not (np.all((pairs[:, 0] >= lo1) & (pairs[:, 0] < hi1))
                    and np.all((pairs[:, 1] >= lo2) & (pairs[:, 1] < hi2))):
                raise DataError("seed pair outside its KG's entity range")


def _check_one_to_one(pairs: np.ndarray) -> None:
    for col, name in ((0, "left"), (1, "right")):
        vals, counts = np.unique(pairs[:, col], return_counts=True)
        if np.any(counts > 1):
            raise DataError(f"entity {vals[counts > 1][0]} aligned twice ({name} side)")


def _read_int_rows(path, width: int) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != width:
                raise DataError(f"{path}:{lineno}: expected {width} tab-separated fields, got {len(parts)}")
            try:
                vals = [int(p) for p in parts]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer field") from None
            if min(vals) < 0:
                raise DataError(f"{path}:{lineno}: negative id")
            if max(vals) >= np.iinfo(np.int64).max:
                raise DataError(f"{path}:{lineno}: id overflow")
            rows.append(vals)
    return np.array(rows, dtype=np.int64).reshape(-1, width)


def load_kg(triples_path, format: str = "tab-separated-id-triples") -> KnowledgeGraph:
    if format != "tab-separated-id-triples":
        raise ValueError(f"unsupported format {format!r}")
    return KnowledgeGraph.from_triples(_read_int_rows(triples_path, 3))


def merge_graphs(g1: KnowledgeGraph, g2: KnowledgeGraph) -> JointGraph:
    n1, n2 = g1.num_entities, g2.num_entities
    r1, r2 = g1.num_relations, g2.num_relations
    nb = r1 + r2
    t2 = g2.triples + np.array([n1, r1, n1])
    base = np.concatenate([g1.triples, t2])
    # self-edges (e, r, e) are their own reverse and get no inverse copy
    rev = base[base[:, 0] != base[:, 2]][:, [2, 1, 0]]
    rev[:, 1] += nb
    n = n1 + n2
    loops = np.stack([np.arange(n), np.full(n, 2 * nb), np.arange(n)], axis=1)
    triples = np.unique(np.concatenate([base, rev, loops]), axis=0)
    return JointGraph((0, n1), (n1, n), nb, triples, kg1_relations=r1)


def split_seeds(pairs, ratios=(0.27, 0.03), rng_seed: int = 0) -> SeedAlignment:
    train_r, dev_r = ratios
    if not (0 < train_r < 1 and 0 <= dev_r < 1 and train_r + dev_r <= 1):
        raise ValueError(f"bad split ratios {ratios}")
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    _check_one_to_one(pairs)
    n = len(pairs)
    order = np.random.default_rng(rng_seed).permutation(n)
    pairs = pairs[order]
    n_train = int(np.floor(train_r * n + 1e-9))
    n_dev = int(np.floor(dev_r * n + 1e-9))
    return SeedAlignment(pairs[:n_train], pairs[n_train:n_train + n_dev], pairs[n_train + n_dev:])


def read_pairs(path) -> np.ndarray:
    return _read_int_rows(path, 2)


def load_seeds(path, ratios=(0.27, 0.03), rng_seed: int = 0, id_map: dict | None = None) -> SeedAlignment:
    pairs = read_pairs(path)
    if id_map is not None:
        try:
            pairs = np.array([[id_map[a], id_map[b]] for a, b in pairs.tolist()], dtype=np.int64).reshape(-1, 2)
        except KeyError as exc:
            raise DataError(f"{path}: unknown entity id {exc.args[0]}") from None
    return split_seeds(pairs, ratios, rng_seed)


@dataclass
class Dataset:
    graph: JointGraph
    seeds: SeedAlignment
    kg1: KnowledgeGraph
    kg2: KnowledgeGraph
    raw_to_joint: dict = field(default_factory=dict)


def _read_ent_ids(path) -> list[int]:
    ids = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            head = line.split("\t", 1)[0]
            try:
                ids.append(int(head))
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad entity id") from None
    return ids


def _local_kg(raw: np.ndarray, ent_ids: list[int] | None) -> tuple[KnowledgeGraph, dict]:
    if ent_ids is None:
        kg = KnowledgeGraph.from_triples(raw)
        return kg, {i: i for i in range(kg.num_entities)}
    emap = {e: i for i, e in enumerate(sorted(set(ent_ids)))}
    rels = np.unique(raw[:, 1]) if len(raw) else np.array([], dtype=np.int64)
    rmap = {r: i for i, r in enumerate(rels.tolist())}
    try:
        t = np.array([[emap[h], rmap[r], emap[tl]] for h, r, tl in raw.tolist()], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"triple references entity {exc.args[0]} missing from ent_ids") from None
    return KnowledgeGraph(len(emap), len(rmap), t.reshape(-1, 3)), emap


def load_dataset(root=None, ratios=(0.27, 0.03), rng_seed: int = 0) -> Dataset:
    """Load a DBP15K/SRPRS-style directory.

    Expected files: ``triples_1``, ``triples_2``, ``ref_ent_ids`` and
    optionally ``ent_ids_1``/``ent_ids_2``. When the ent_ids files are
    present the raw (globally unique) ids are remapped per KG; otherwise
    triple ids are taken as local ids and pairs as (kg1 id, kg2 id).
    """
    root = Path(root or os.environ.get(DATA_DIR_ENV, "."))
    for name in ("triples_1", "triples_2", "ref_ent_ids"):
        if not (root / name).is_file():
            raise FileNotFoundError(f"missing dataset file {root / name}")
    raw1 = _read_int_rows(root / "triples_1", 3)
    raw2 = _read_int_rows(root / "triples_2", 3)
    have_ids = (root / "ent_ids_1").is_file() and (root / "ent_ids_2").is_file()
    ids1 = _read_ent_ids(root / "ent_ids_1") if have_ids else None
    ids2 = _read_ent_ids(root / "ent_ids_2") if have_ids else None
    kg1, m1 = _local_kg(raw1, ids1)
    kg2, m2 = _local_kg(raw2, ids2)
    graph = merge_graphs(kg1, kg2)
    n1 = kg1.num_entities
    pairs = read_pairs(root / "ref_ent_ids")
    if have_ids:
        raw_to_joint = {**m1, **{e: i + n1 for e, i in m2.items()}}
        try:
            pairs = np.array([[m1[a], m2[b] + n1] for a, b in pairs.tolist()], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"ref_ent_ids references unknown entity {exc.args[0]}") from None
    else:
        raw_to_joint = {}
        pairs = pairs + np.array([0, n1])
    seeds = split_seeds(pairs.reshape(-1, 2), ratios, rng_seed)
    seeds.check(graph)
    log.info("loaded %s: %d+%d entities, %d directed edges, %d pairs",
             root, kg1.num_entities, kg2.num_entities, len(graph.triples), len(pairs))
    return Dataset(graph, seeds, kg1, kg2, raw_to_joint)
