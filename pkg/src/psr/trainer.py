"""Negative-free alignment training.

The encoder output right after random initialization is frozen as the
target table. Each aligned pair (i, j) pulls the live output of i towards
the frozen target of j and vice versa; no gradient ever reaches the
targets, which is what keeps the embeddings from collapsing without
negative samples.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import encoder
from .config import RunConfig
from .encoder import ContractError, Gradients, ModelParams
from .kg import JointGraph, SeedAlignment
from .sampler import build_plan, sample_subgraph, uniform_plan

log = logging.getLogger(__name__)


def cosine_sim(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ContractError("cosine similarity of a zero vector")
    return float(np.dot(x, y) / (nx * ny))


def normalize_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n == 0, 1.0, n)


def _cos_and_grad(x: np.ndarray, y: np.ndarray):
    """Row-wise cos(x, y) and its gradient with respect to x."""
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    if np.any(nx == 0) or np.any(ny == 0):
        raise ContractError("cosine similarity of a zero vector")
    cos = np.einsum("ij,ij->i", x, y) / (nx * ny)
    grad = y / (nx * ny)[:, None] - cos[:, None] * x / (nx * nx)[:, None]
    return cos, grad


def init_targets(graph: JointGraph, params: ModelParams) -> np.ndarray:
    """Frozen reference outputs: an evaluation-mode forward pass."""
    final, _ = encoder.forward(graph.edges, params)
    final.flags.writeable = False
    return final


def alignment_loss(final: np.ndarray, targets: np.ndarray, pairs) -> tuple[float, np.ndarray]:
    """Loss summed over pairs and its gradient with respect to ``final`` only."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    i, j = pairs[:, 0], pairs[:, 1]
    cij, gi = _cos_and_grad(final[i], targets[j])
    cji, gj = _cos_and_grad(final[j], targets[i])
    grad = np.zeros_like(final)
    np.add.at(grad, i, -gi)
    np.add.at(grad, j, -gj)
    return float(-(cij.sum() + cji.sum())), grad


def live_alignment_loss(final: np.ndarray, pairs) -> tuple[float, np.ndarray]:
    """Ablation: both branches carry gradient and there are no negatives."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    i, j = pairs[:, 0], pairs[:, 1]
    c, gi = _cos_and_grad(final[i], final[j])
    _, gj = _cos_and_grad(final[j], final[i])
    grad = np.zeros_like(final)
    np.add.at(grad, i, -2 * gi)
    np.add.at(grad, j, -2 * gj)
    return float(-2 * c.sum()), grad


def score(e_i: int, e_j: int, final: np.ndarray, targets: np.ndarray) -> float:
    return cosine_sim(final[e_i], targets[e_j]) + cosine_sim(final[e_j], targets[e_i])


def score_block(final_n: np.ndarray, targets_n: np.ndarray, rows, cols) -> np.ndarray:
    """Scores for rows x cols given row-normalized final and target tables."""
    return final_n[rows] @ targets_n[cols].T + targets_n[rows] @ final_n[cols].T


@dataclass
class RMSprop:
    """RMSprop with lazily decayed entity accumulators.

    Rows without gradient in a step only see their accumulator decay; the
    decay is deferred and applied as rho**k when the row is next touched,
    which gives exactly the dense update at O(batch) cost per step.
    """

    lr: float
    rho: float
    eps: float
    acc_entity: np.ndarray
    last_step: np.ndarray
    acc_relation: np.ndarray
    acc_attention: np.ndarray
    steps: int = 0

    @classmethod
    def for_params(cls, params: ModelParams, lr=0.005, rho=0.9, eps=1e-8) -> "RMSprop":
        return cls(lr, rho, eps, np.zeros_like(params.entity), np.zeros(len(params.entity), dtype=np.int64),
                   np.zeros_like(params.relation), np.zeros_like(params.attention))

    def _dense(self, p, acc, g):
        acc *= self.rho
        acc += (1 - self.rho) * g * g
        p -= self.lr * g / np.sqrt(acc + self.eps)

    def step(self, params: ModelParams, grads: Gradients) -> None:
        for name, g in (("entity", grads.entity), ("relation", grads.relation), ("attention", grads.attention)):
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite {name} gradient at step {self.steps + 1}")
        self.steps += 1
        rows, g = grads.entity_rows, grads.entity
        if len(np.unique(rows)) != len(rows):
            raise ContractError("duplicate entity gradient rows")
        decay = self.rho ** (self.steps - 1 - self.last_step[rows])
        acc = self.acc_entity[rows] * decay[:, None]
        acc = self.rho * acc + (1 - self.rho) * g * g
        self.acc_entity[rows] = acc
        self.last_step[rows] = self.steps
        params.entity[rows] -= self.lr * g / np.sqrt(acc + self.eps)
        self._dense(params.relation, self.acc_relation, grads.relation)
        self._dense(params.attention, self.acc_attention, grads.attention)
        params.normalize_relations()

    def settle(self) -> None:
        """Apply all deferred decay so ``acc_entity`` is the dense accumulator."""
        k = self.steps - self.last_step
        self.acc_entity *= (self.rho ** k)[:, None]
        self.last_step[:] = self.steps


def rmsprop_step(params: ModelParams, grads: Gradients, state: "TrainState") -> ModelParams:
    state.optimizer.step(params, grads)
    return params


@dataclass
class TrainState:
    optimizer: RMSprop
    epoch: int = 0  # epochs run over the lifetime of this state
    dev_history: list = field(default_factory=list)
    log: list = field(default_factory=list)
    best_epoch: int = -1
    best_dev: float = float("inf")
    best_params: ModelParams | None = None

    @property
    def learning_rate(self) -> float:
        return self.optimizer.lr


@dataclass
class TrainResult:
    params: ModelParams
    targets: np.ndarray
    state: TrainState


def dev_loss(graph: JointGraph, params: ModelParams, targets: np.ndarray, pairs, stop_gradient=True) -> float:
    final, _ = encoder.forward(graph.edges, params)
    if stop_gradient:
        return alignment_loss(final, targets, pairs)[0]
    return live_alignment_loss(final, pairs)[0]


def train_batch(graph: JointGraph, params: ModelParams, targets: np.ndarray, plan, batch_pairs,
                config: RunConfig, rng: np.random.Generator, state: TrainState):
    sub = sample_subgraph(graph, plan, batch_pairs, params.depth, rng)
    final, acts = encoder.forward(sub.edges, params, config.dropout, True, rng, nodes=sub.nodes)
    local = sub.local_pairs
    if config.stop_gradient:
        loss, g_final = alignment_loss(final, targets[sub.nodes], local)
    else:
        loss, g_final = live_alignment_loss(final, local)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss at epoch {state.epoch}")
    grads = encoder.backward(sub.edges, params, acts, g_final, nodes=sub.nodes)
    state.optimizer.step(params, grads)
    return loss, grads, sub


def train(graph: JointGraph, seeds: SeedAlignment, config: RunConfig, params: ModelParams | None = None,
          targets: np.ndarray | None = None, state: TrainState | None = None, pairs=None,
          on_batch=None, log_path=None) -> TrainResult:
    """Train on ``pairs`` (default: the train split) until dev loss rises.

    Training stops once the dev loss has increased over the previous epoch
    ``config.patience`` times in a row (patience 0 acts like 1), or after
    ``max_epochs``.
    The parameters from the epoch with the lowest dev loss are returned.
    """
    pairs = seeds.train if pairs is None else np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if not len(pairs):
        raise ValueError("empty training set")
    if params is None:
        params = encoder.init_params(graph.num_entities, graph.num_relations, config.dim, config.depth,
                                     np.random.default_rng([config.rng_seed, 0]))
    if targets is None:
        targets = init_targets(graph, params)
    if state is None:
        state = TrainState(RMSprop.for_params(params, config.learning_rate, config.rho, config.rms_eps))
    state.best_epoch, state.best_dev, state.best_params = -1, float("inf"), None
    check_pairs = seeds.dev if len(seeds.dev) else pairs
    prev, rises = None, 0
    for _ in range(config.max_epochs):
        t0 = time.perf_counter()
        epoch = state.epoch
        plan = uniform_plan(graph, config.tau) if epoch == 0 else build_plan(graph, params, epoch, config.tau)
        rng = np.random.default_rng([config.rng_seed, 1, epoch])
        order = rng.permutation(len(pairs))
        losses = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            batch = pairs[order[start:start + config.batch_size]]
            brng = np.random.default_rng([config.rng_seed, 2, epoch, b])
            loss, grads, sub = train_batch(graph, params, targets, plan, batch, config, brng, state)
            losses.append(loss)
            if on_batch is not None:
                on_batch({"epoch": epoch, "batch": b, "loss": loss, "grads": grads, "subgraph": sub,
                          "targets": targets, "params": params})
        dl = dev_loss(graph, params, targets, check_pairs, config.stop_gradient)
        if not np.isfinite(dl):
            raise FloatingPointError(f"non-finite dev loss at epoch {epoch}")
        state.dev_history.append(dl)
        rec = {"epoch": epoch, "train_loss": float(np.sum(losses)), "dev_loss": dl,
               "wall_time": time.perf_counter() - t0}
        state.log.append(rec)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(rec) + "\n")
        log.debug("epoch %d train %.4f dev %.4f", epoch, rec["train_loss"], dl)
        state.epoch += 1
        if dl < state.best_dev:
            state.best_dev, state.best_epoch, state.best_params = dl, epoch, params.copy()
        rises = rises + 1 if prev is not None and dl > prev else 0
        prev = dl
        if rises >= max(config.patience, 1):
            break
    best = state.best_params if state.best_params is not None else params
    return TrainResult(best.copy(), targets, state)
