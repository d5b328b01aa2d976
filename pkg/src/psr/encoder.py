"""Relation-aware graph encoder with hand-derived gradients.

Each layer reflects neighbor embeddings across relation hyperplanes
(Householder reflections), weights them with a per-center softmax over
relational attention logits, and applies ELU. The final representation is
the concatenation of the input embedding and every layer's output.

There is no linear transformation matrix; the only parameters are the
entity table, the unit-norm relation table and one attention vector of
length 3d per layer.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .kg import EdgeIndex

CHECKPOINT_VERSION = 1
UNIT_NORM_TOL = 1e-6


class ContractError(ValueError):
    """An operation was called outside its precondition."""


@dataclass
class ModelParams:
    entity: np.ndarray  # (N, d)
    relation: np.ndarray  # (R, d), unit rows
    attention: np.ndarray  # (depth, 3d)

    @property
    def dim(self) -> int:
        return self.entity.shape[1]

    @property
    def depth(self) -> int:
        return self.attention.shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams(self.entity.copy(), self.relation.copy(), self.attention.copy())

    def normalize_relations(self) -> None:
        norms = np.linalg.norm(self.relation, axis=1, keepdims=True)
        np.divide(self.relation, np.maximum(norms, 1e-12), out=self.relation)

    def validate(self) -> None:
        d = self.dim
        if self.relation.shape[1] != d or self.attention.shape[1] != 3 * d:
            raise ContractError("inconsistent parameter dimensions")
        norms = np.linalg.norm(self.relation, axis=1)
        if np.any(np.abs(norms - 1) > UNIT_NORM_TOL):
            raise ContractError("relation embeddings must have unit L2 norm")


def init_params(num_entities: int, num_relations: int, dim: int, depth: int,
                rng: np.random.Generator, dtype=np.float64) -> ModelParams:
    if depth < 1:
        raise ContractError("depth must be >= 1")
    bound = np.sqrt(6.0 / dim)
    ent = rng.uniform(-bound, bound, (num_entities, dim)).astype(dtype)
    rel = rng.uniform(-bound, bound, (num_relations, dim)).astype(dtype)
    att = rng.uniform(-bound, bound, (depth, 3 * dim)).astype(dtype)
    p = ModelParams(ent, rel, att)
    p.normalize_relations()
    return p


def reflect(entity_vec, relation_vec):
    """Reflect ``entity_vec`` across the hyperplane with unit normal ``relation_vec``."""
    x = np.asarray(entity_vec, dtype=float)
    r = np.asarray(relation_vec, dtype=float)
    if abs(np.linalg.norm(r) - 1) > UNIT_NORM_TOL:
        raise ContractError("relation vector must have unit norm")
    return x - 2 * np.dot(r, x) * r


def attention_logit(center_reflected, relation_vec, neighbor_reflected, v) -> float:
    return float(np.dot(v, np.concatenate([center_reflected, relation_vec, neighbor_reflected])))


def segment_softmax(logits: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Softmax of ``logits`` within each [offsets[k], offsets[k+1]) group."""
    logits = np.asarray(logits, dtype=float)
    offsets = np.asarray(offsets)
    if np.any(np.diff(offsets) <= 0):
        raise ContractError("empty softmax group")
    starts = offsets[:-1]
    counts = np.diff(offsets)
    m = np.repeat(np.maximum.reduceat(logits, starts), counts)
    e = np.exp(logits - m)
    return e / np.repeat(np.add.reduceat(e, starts), counts)


def attention_normalize(groups) -> list[np.ndarray]:
    """Softmax for a list of per-center logit groups."""
    groups = [np.asarray(g, dtype=float) for g in groups]
    if any(len(g) == 0 for g in groups):
        raise ContractError("empty softmax group")
    offsets = np.concatenate([[0], np.cumsum([len(g) for g in groups])])
    flat = segment_softmax(np.concatenate(groups) if groups else np.zeros(0), offsets)
    return [flat[a:b] for a, b in zip(offsets[:-1], offsets[1:])]


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


@dataclass
class LayerActivations:
    inputs: np.ndarray  # (n, d) layer input h^(l)
    pre: np.ndarray  # (n, d) weighted sums before ELU
    beta: np.ndarray  # (m,) attention logits
    alpha: np.ndarray  # (m,) normalized coefficients
    outputs: np.ndarray  # (n, d) h^(l+1), after dropout
    scale: np.ndarray | None = None  # dropout mask / keep-prob, None when off


@dataclass
class Gradients:
    entity_rows: np.ndarray  # entity ids the rows of ``entity`` refer to
    entity: np.ndarray
    relation: np.ndarray
    attention: np.ndarray


def _reflect_rows(h, r):
    p = np.einsum("ij,ij->i", h, r)
    return h - 2 * p[:, None] * r, p


def _edge_terms(edges: EdgeIndex, lo: int, hi: int, inputs, relation, v):
    a, b = edges.offsets[lo], edges.offsets[hi]
    c = edges.center[a:b]
    nb = edges.neighbor[a:b]
    r = relation[edges.relation[a:b]]
    hc, hn = inputs[c], inputs[nb]
    phi_c, pc = _reflect_rows(hc, r)
    phi_n, pn = _reflect_rows(hn, r)
    d = inputs.shape[1]
    beta = phi_c @ v[:d] + r @ v[d:2 * d] + phi_n @ v[2 * d:]
    if edges.log_weight is not None:
        beta = beta + edges.log_weight[a:b]
    return a, b, c, r, hc, pc, phi_c, hn, pn, phi_n, beta


def attention_coefficients(edges: EdgeIndex, inputs, relation, v, chunk_edges: int = 1 << 14):
    """Per-edge (beta, alpha) for one layer without aggregating."""
    beta = np.empty(edges.num_edges, dtype=inputs.dtype)
    for lo, hi in edges.chunks(chunk_edges):
        a, b, *_, bt = _edge_terms(edges, lo, hi, inputs, relation, v)
        beta[a:b] = bt
    return beta, segment_softmax(beta, edges.offsets)


def layer_forward(edges: EdgeIndex, inputs: np.ndarray, params: ModelParams, layer: int,
                  dropout: float = 0.0, training: bool = False, rng: np.random.Generator | None = None,
                  chunk_edges: int = 1 << 14):
    if inputs.shape[0] != edges.num_nodes:
        raise ContractError("input rows must match node count")
    v = params.attention[layer]
    n, d = inputs.shape
    pre = np.empty((n, d), dtype=inputs.dtype)
    beta = np.empty(edges.num_edges, dtype=inputs.dtype)
    alpha = np.empty_like(beta)
    for lo, hi in edges.chunks(chunk_edges):
        a, b, c, r, hc, pc, phi_c, hn, pn, phi_n, bt = _edge_terms(edges, lo, hi, inputs, params.relation, v)
        beta[a:b] = bt
        al = segment_softmax(bt, edges.offsets[lo:hi + 1] - a)
        alpha[a:b] = al
        pre[lo:hi] = np.add.reduceat(al[:, None] * phi_n, edges.offsets[lo:hi] - a, axis=0)
    out = elu(pre)
    scale = None
    if training and dropout > 0:
        if dropout >= 1:
            scale = np.zeros_like(out)
        else:
            rng = rng if rng is not None else np.random.default_rng()
            scale = (rng.random(out.shape) >= dropout) / (1.0 - dropout)
        out = out * scale
    return out, LayerActivations(inputs, pre, beta, alpha, out, scale)


def forward(edges: EdgeIndex, params: ModelParams, dropout: float = 0.0, training: bool = False,
            rng: np.random.Generator | None = None, nodes: np.ndarray | None = None):
    """Full encoder pass. ``nodes`` maps local rows to entity ids for subgraphs."""
    if params.depth < 1:
        raise ContractError("depth must be >= 1")
    h = params.entity if nodes is None else params.entity[nodes]
    outs, acts = [h], []
    for layer in range(params.depth):
        h, act = layer_forward(edges, h, params, layer, dropout, training, rng)
        outs.append(h)
        acts.append(act)
    return np.concatenate(outs, axis=1), acts


def _layer_backward(edges: EdgeIndex, params: ModelParams, layer: int, act: LayerActivations,
                    g_out: np.ndarray, g_rel: np.ndarray, chunk_edges: int = 1 << 14):
    v = params.attention[layer]
    d = params.dim
    va, vb, vc = v[:d], v[d:2 * d], v[2 * d:]
    g = g_out if act.scale is None else g_out * act.scale
    g_s = g * np.where(act.pre > 0, 1.0, np.exp(np.minimum(act.pre, 0)))
    g_in = np.zeros_like(act.inputs)
    g_v = np.zeros(3 * d, dtype=g_out.dtype)
    g_hn_all = np.empty((edges.num_edges, d), dtype=g_out.dtype)
    for lo, hi in edges.chunks(chunk_edges):
        a, b, c, r, hc, pc, phi_c, hn, pn, phi_n, _ = _edge_terms(edges, lo, hi, act.inputs, params.relation, v)
        al = act.alpha[a:b]
        gsc = g_s[c]
        g_alpha = np.einsum("ij,ij->i", gsc, phi_n)
        starts = edges.offsets[lo:hi] - a
        counts = np.diff(edges.offsets[lo:hi + 1])
        dot = np.repeat(np.add.reduceat(al * g_alpha, starts), counts)
        g_beta = al * (g_alpha - dot)
        g_v[:d] += g_beta @ phi_c
        g_v[d:2 * d] += g_beta @ r
        g_v[2 * d:] += g_beta @ phi_n
        g_phi_c = g_beta[:, None] * va
        g_phi_n = al[:, None] * gsc + g_beta[:, None] * vc
        g_r = g_beta[:, None] * vb
        # d(x - 2(r.x) r): dx = g - 2(r.g) r ; dr = -2[(r.x) g + (r.g) x]
        rg_c = np.einsum("ij,ij->i", r, g_phi_c)
        rg_n = np.einsum("ij,ij->i", r, g_phi_n)
        g_r -= 2 * (pc[:, None] * g_phi_c + rg_c[:, None] * hc + pn[:, None] * g_phi_n + rg_n[:, None] * hn)
        g_in[lo:hi] += np.add.reduceat(g_phi_c - 2 * rg_c[:, None] * r, starts, axis=0)
        g_hn_all[a:b] = g_phi_n - 2 * rg_n[:, None] * r
        g_rel += _scatter_matrix(edges.relation[a:b], g_rel.shape[0]) @ g_r
    g_in += edges.neighbor_scatter() @ g_hn_all
    return g_in, g_v


def _scatter_matrix(idx: np.ndarray, n: int) -> sp.csr_matrix:
    m = len(idx)
    return sp.csr_matrix((np.ones(m), (idx, np.arange(m))), shape=(n, m))


def backward(edges: EdgeIndex, params: ModelParams, activations: list[LayerActivations],
             output_gradient: np.ndarray, nodes: np.ndarray | None = None) -> Gradients:
    d, depth = params.dim, params.depth
    n = edges.num_nodes
    if output_gradient.shape != (n, (depth + 1) * d) or len(activations) != depth:
        raise ContractError("output gradient does not match the forward pass")
    g_rel = np.zeros_like(params.relation)
    g_att = np.zeros_like(params.attention)
    g_h = output_gradient[:, depth * d:].copy()
    for layer in range(depth - 1, -1, -1):
        g_in, g_v = _layer_backward(edges, params, layer, activations[layer], g_h, g_rel)
        g_att[layer] = g_v
        g_h = output_gradient[:, layer * d:(layer + 1) * d] + g_in
    rows = np.arange(n) if nodes is None else np.asarray(nodes)
    return Gradients(rows, g_h, g_rel, g_att)


def save_checkpoint(path, params: ModelParams, targets: np.ndarray | None = None, extra: dict | None = None) -> None:
    """Write an ``.npz`` checkpoint.

    Layout: ``meta`` (JSON string with version, dim, depth, counts and
    ``extra``), ``entity`` (N x d), ``relation`` (R x d), ``attention``
    (depth x 3d), and optionally ``targets`` (N x (depth+1)d).
    """
    meta = {"version": CHECKPOINT_VERSION, "dim": params.dim, "depth": params.depth,
            "num_entities": params.entity.shape[0], "num_relations": params.relation.shape[0],
            "extra": extra or {}}
    arrays = {"entity": params.entity, "relation": params.relation, "attention": params.attention}
    if targets is not None:
        arrays["targets"] = np.asarray(targets)
    np.savez(path, meta=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path):
    """Return (params, targets or None, meta)."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ContractError(f"checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
        params = ModelParams(z["entity"].copy(), z["relation"].copy(), z["attention"].copy())
        targets = z["targets"].copy() if "targets" in z.files else None
    return params, targets, meta
