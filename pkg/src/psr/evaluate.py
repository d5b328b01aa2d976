"""Ranking evaluation (Hits@k, MRR) and literal-similarity fusion."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .trainer import normalize_rows, score_block

log = logging.getLogger(__name__)

DIRECTIONS = ("kg1->kg2", "kg2->kg1", "average")


@dataclass
class EvalResult:
    hits_at: dict
    mrr: float
    num_test_pairs: int
    direction: str

    def to_dict(self) -> dict:
        return {"hits_at": {str(k): v for k, v in self.hits_at.items()}, "mrr": self.mrr,
                "num_test_pairs": self.num_test_pairs, "direction": self.direction}


def metrics(ranks, ks=(1, 10), direction: str = "kg1->kg2") -> EvalResult:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no ranks to evaluate")
    if np.any(ranks < 1):
        raise ValueError("ranks start at 1")
    hits = {int(k): float(np.mean(ranks <= k)) for k in sorted(ks)}
    return EvalResult(hits, float(np.mean(1.0 / ranks)), int(ranks.size), direction)


def fuse_literal(structural: np.ndarray, literal_rows: np.ndarray, literal_cols: np.ndarray) -> np.ndarray:
    """Structural score block plus cosine similarity of literal embeddings.

    All-zero literal rows contribute a similarity of 0.
    """
    return structural + normalize_rows(literal_rows) @ normalize_rows(literal_cols).T


def _ranks_from_block(s: np.ndarray, truth_col: np.ndarray, col_ids: np.ndarray) -> np.ndarray:
    true = s[np.arange(len(s)), truth_col][:, None]
    better = (s > true) | ((s == true) & (col_ids[None, :] < col_ids[truth_col][:, None]))
    return 1 + better.sum(axis=1)


def rank_all(final: np.ndarray, targets: np.ndarray, test_pairs, direction: str = "kg1->kg2",
             block_size: int = 1024, literal: np.ndarray | None = None) -> np.ndarray:
    """Rank of each true counterpart among the other side's test entities.

    Higher score ranks first; equal scores are ordered by entity id.
    ``literal`` is an optional (num_entities x k) table fused into scores.
    """
    pairs = np.asarray(test_pairs, dtype=np.int64).reshape(-1, 2)
    if direction == "kg2->kg1":
        pairs = pairs[:, ::-1]
    elif direction != "kg1->kg2":
        raise ValueError(f"bad direction {direction!r}")
    src, dst = pairs[:, 0], pairs[:, 1]
    fn, tn = normalize_rows(final), normalize_rows(targets)
    ranks = np.empty(len(pairs), dtype=np.int64)
    for lo in range(0, len(pairs), block_size):
        hi = min(lo + block_size, len(pairs))
        s = score_block(fn, tn, src[lo:hi], dst)
        if literal is not None:
            s = fuse_literal(s, literal[src[lo:hi]], literal[dst])
        ranks[lo:hi] = _ranks_from_block(s, np.arange(lo, hi), dst)
    return ranks


def evaluate(final: np.ndarray, targets: np.ndarray, test_pairs, ks=(1, 10), direction: str = "average",
             block_size: int = 1024, literal: np.ndarray | None = None) -> EvalResult:
    if direction != "average":
        return metrics(rank_all(final, targets, test_pairs, direction, block_size, literal), ks, direction)
    a = metrics(rank_all(final, targets, test_pairs, "kg1->kg2", block_size, literal), ks)
    b = metrics(rank_all(final, targets, test_pairs, "kg2->kg1", block_size, literal), ks)
    hits = {k: (a.hits_at[k] + b.hits_at[k]) / 2 for k in a.hits_at}
    return EvalResult(hits, (a.mrr + b.mrr) / 2, a.num_test_pairs, "average")


def load_literal_embeddings(path, num_entities: int, id_map: dict | None = None) -> np.ndarray:
    """Read ``num_rows dim`` header then ``entity_id v1 .. vdim`` lines.

    Ids are mapped through ``id_map`` when given. Entities without a row
    get a zero vector and a warning.
    """
    with open(path, encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: header must be 'num_rows dim'")
        dim = int(header[1])
        table = np.zeros((num_entities, dim))
        seen = np.zeros(num_entities, dtype=bool)
        for lineno, line in enumerate(f, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected {dim + 1} fields")
            e = int(parts[0])
            e = id_map.get(e, -1) if id_map is not None else e
            if not 0 <= e < num_entities:
                continue
            table[e] = np.array(parts[1:], dtype=float)
            seen[e] = True
    missing = int((~seen).sum())
    if missing:
        log.warning("%d entities have no literal embedding; using zero vectors", missing)
    return table
