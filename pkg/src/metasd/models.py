"""Bilinear backbones (ComplEx, CP, RESCAL) with analytic backward passes.

Every backbone scores a batch of ``(head, rel)`` queries against all candidate
tails as ``Q @ C.T`` where ``Q`` is a per-query vector and ``C`` a candidate
table, and scores ``(head, tail)`` pairs against all relations as
``P @ R_flat.T``. Backward passes take the cotangent of those logit matrices
and return dense per-tensor gradients.

Relation rows ``[0, R')`` hold the original relations and rows ``[R', 2R')``
their reciprocals, so head prediction is tail prediction on ``r + R'``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, NamedTuple, Optional

import numpy as np
from scipy import sparse

Tensors = Dict[str, np.ndarray]

BACKBONES = ("ComplEx", "CP", "RESCAL")


class Triple(NamedTuple):
    head: int
    rel: int
    tail: int


def _shapes(backbone: str, entity_count: int, relation_count: int, dim: int) -> Dict[str, tuple]:
    n_rel = 2 * relation_count
    if backbone == "ComplEx":
        return {"entity": (entity_count, 2 * dim), "relation": (n_rel, 2 * dim)}
    if backbone == "CP":
        return {
            "entity_head": (entity_count, dim),
            "entity_tail": (entity_count, dim),
            "relation": (n_rel, dim),
        }
    if backbone == "RESCAL":
        return {"entity": (entity_count, dim), "relation": (n_rel, dim, dim)}
    raise ValueError(f"unknown backbone {backbone!r}; expected one of {BACKBONES}")


@dataclass
class ParamStore:
    """Embedding tensors of one backbone model.

    ``relation_count`` is the original relation count R'; relation tables have
    ``2 * relation_count`` rows.
    """

    backbone: str
    dim: int
    entity_count: int
    relation_count: int
    tensors: Tensors = field(default_factory=dict)

    def __post_init__(self):
        expected = _shapes(self.backbone, self.entity_count, self.relation_count, self.dim)
        if not self.tensors:
            self.tensors = {k: np.zeros(s) for k, s in expected.items()}
        if set(self.tensors) != set(expected):
            raise ValueError(f"tensor names {sorted(self.tensors)} != {sorted(expected)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {self.tensors[name].shape} != {shape}")

    @property
    def names(self):
        return list(self.tensors)

    @property
    def size(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "ParamStore":
        return ParamStore(self.backbone, self.dim, self.entity_count, self.relation_count,
                          {k: v.copy() for k, v in self.tensors.items()})

    def with_tensors(self, tensors: Mapping[str, np.ndarray]) -> "ParamStore":
        return ParamStore(self.backbone, self.dim, self.entity_count, self.relation_count,
                          dict(tensors))

    def view(self, mask=None) -> Tensors:
        """Weights as seen by the student (masked) or the teacher (``mask=None``)."""
        if mask is None:
            return self.tensors
        return mask.apply(self.tensors)

    def is_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors.values())


def parameter_count(backbone: str, entity_count: int, relation_count: int, dim: int) -> int:
    shapes = _shapes(backbone, entity_count, relation_count, dim)
    return int(sum(np.prod(s) for s in shapes.values()))


def init_params(backbone: str, dim: int, entity_count: int, relation_count: int,
                seed: int = 0, init_scale: float = 1e-3) -> ParamStore:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    shapes = _shapes(backbone, entity_count, relation_count, dim)
    tensors = {name: rng.uniform(-init_scale, init_scale, size=shape)
               for name, shape in shapes.items()}
    return ParamStore(backbone, dim, entity_count, relation_count, tensors)


@dataclass
class SparseGrad:
    """Row-sparse gradient: for each tensor, unique row ids and their dense rows."""

    rows: Dict[str, np.ndarray] = field(default_factory=dict)
    values: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_dense(cls, grads: Mapping[str, np.ndarray]) -> "SparseGrad":
        out = cls()
        for name, g in grads.items():
            flat = g.reshape(g.shape[0], -1)
            ids = np.flatnonzero(np.any(flat != 0, axis=1))
            out.rows[name] = ids
            out.values[name] = g[ids]
        return out

    def to_dense(self, like: Mapping[str, np.ndarray]) -> Tensors:
        dense = {k: np.zeros_like(v) for k, v in like.items()}
        for name, ids in self.rows.items():
            dense[name][ids] = self.values[name]
        return dense

    @property
    def entity_rows(self):
        return {k: v for k, v in self.rows.items() if k.startswith("entity")}

    @property
    def relation_rows(self):
        return {k: v for k, v in self.rows.items() if k == "relation"}

    def is_empty(self) -> bool:
        return all(len(ids) == 0 for ids in self.rows.values())


def zeros_like(tensors: Mapping[str, np.ndarray]) -> Tensors:
    return {k: np.zeros_like(v) for k, v in tensors.items()}


def scatter_add(out: np.ndarray, ids, rows: np.ndarray) -> None:
    """``out[ids] += rows`` with repeated ids summed (a faster ``np.add.at``)."""
    ids = np.asarray(ids)
    if ids.size == 0:
        return
    if rows.size <= 8192:
        # the sparse product only pays off once its construction overhead is amortised
        np.add.at(out, ids, rows)
        return
    uniq, inv = np.unique(ids, return_inverse=True)
    onehot = sparse.csr_matrix((np.ones(ids.size), (inv.ravel(), np.arange(ids.size))),
                               shape=(uniq.size, ids.size))
    out[uniq] += (onehot @ rows.reshape(ids.size, -1)).reshape((uniq.size,) + out.shape[1:])


# Batched forward/backward kernels. ``w`` is a dict of weight arrays (a masked
# view or raw teacher tensors); ``heads``/``rels``/``tails`` are int arrays.

def _complex_halves(x, d):
    return x[..., :d], x[..., d:]


def tail_logits(backbone: str, w: Mapping[str, np.ndarray], heads, rels) -> np.ndarray:
    """Scores of every entity as tail for each query; shape (B, E)."""
    q = _tail_query(backbone, w, heads, rels)
    return q @ _tail_candidates(backbone, w).T


def _tail_candidates(backbone, w):
    return w["entity_tail"] if backbone == "CP" else w["entity"]


def _tail_query(backbone, w, heads, rels):
    if backbone == "ComplEx":
        d = w["entity"].shape[1] // 2
        h_re, h_im = _complex_halves(w["entity"][heads], d)
        r_re, r_im = _complex_halves(w["relation"][rels], d)
        return np.concatenate([h_re * r_re - h_im * r_im, h_re * r_im + h_im * r_re], axis=1)
    if backbone == "CP":
        return w["entity_head"][heads] * w["relation"][rels]
    if backbone == "RESCAL":
        return np.einsum("bi,bij->bj", w["entity"][heads], w["relation"][rels])
    raise ValueError(f"unknown backbone {backbone!r}")


def tail_backward(backbone: str, w: Mapping[str, np.ndarray], heads, rels,
                  dlogits: np.ndarray, out: Optional[Tensors] = None) -> Tensors:
    """Gradient of ``sum(dlogits * tail_logits(...))``, accumulated into ``out``."""
    if out is None:
        out = zeros_like(w)
    heads = np.asarray(heads)
    rels = np.asarray(rels)
    q = _tail_query(backbone, w, heads, rels)
    cand = _tail_candidates(backbone, w)
    cand_name = "entity_tail" if backbone == "CP" else "entity"
    out[cand_name] += dlogits.T @ q
    dq = dlogits @ cand
    if backbone == "ComplEx":
        d = w["entity"].shape[1] // 2
        h_re, h_im = _complex_halves(w["entity"][heads], d)
        r_re, r_im = _complex_halves(w["relation"][rels], d)
        dq_re, dq_im = _complex_halves(dq, d)
        dh = np.concatenate([dq_re * r_re + dq_im * r_im, dq_im * r_re - dq_re * r_im], axis=1)
        dr = np.concatenate([dq_re * h_re + dq_im * h_im, dq_im * h_re - dq_re * h_im], axis=1)
        scatter_add(out["entity"], heads, dh)
        scatter_add(out["relation"], rels, dr)
    elif backbone == "CP":
        scatter_add(out["entity_head"], heads, dq * w["relation"][rels])
        scatter_add(out["relation"], rels, dq * w["entity_head"][heads])
    else:
        ent = w["entity"][heads]
        scatter_add(out["entity"], heads, np.einsum("bj,bij->bi", dq, w["relation"][rels]))
        scatter_add(out["relation"], rels, ent[:, :, None] * dq[:, None, :])
    return out


def _pair_features(backbone, w, heads, tails):
    if backbone == "ComplEx":
        d = w["entity"].shape[1] // 2
        h_re, h_im = _complex_halves(w["entity"][heads], d)
        t_re, t_im = _complex_halves(w["entity"][tails], d)
        return np.concatenate([h_re * t_re + h_im * t_im, h_re * t_im - h_im * t_re], axis=1)
    if backbone == "CP":
        return w["entity_head"][heads] * w["entity_tail"][tails]
    if backbone == "RESCAL":
        h, t = w["entity"][heads], w["entity"][tails]
        return (h[:, :, None] * t[:, None, :]).reshape(len(heads), -1)
    raise ValueError(f"unknown backbone {backbone!r}")


def relation_logits(backbone: str, w: Mapping[str, np.ndarray], heads, tails) -> np.ndarray:
    """Scores of every relation (reciprocals included) for each pair; shape (B, 2R')."""
    p = _pair_features(backbone, w, heads, tails)
    rel = w["relation"]
    return p @ rel.reshape(rel.shape[0], -1).T


def relation_backward(backbone: str, w: Mapping[str, np.ndarray], heads, tails,
                      dlogits: np.ndarray, out: Optional[Tensors] = None) -> Tensors:
    if out is None:
        out = zeros_like(w)
    heads = np.asarray(heads)
    tails = np.asarray(tails)
    rel = w["relation"]
    rel_flat = rel.reshape(rel.shape[0], -1)
    p = _pair_features(backbone, w, heads, tails)
    out["relation"] += (dlogits.T @ p).reshape(rel.shape)
    dp = dlogits @ rel_flat
    if backbone == "ComplEx":
        d = w["entity"].shape[1] // 2
        h_re, h_im = _complex_halves(w["entity"][heads], d)
        t_re, t_im = _complex_halves(w["entity"][tails], d)
        dp_a, dp_b = _complex_halves(dp, d)
        dh = np.concatenate([dp_a * t_re + dp_b * t_im, dp_a * t_im - dp_b * t_re], axis=1)
        dt = np.concatenate([dp_a * h_re - dp_b * h_im, dp_a * h_im + dp_b * h_re], axis=1)
        scatter_add(out["entity"], heads, dh)
        scatter_add(out["entity"], tails, dt)
    elif backbone == "CP":
        scatter_add(out["entity_head"], heads, dp * w["entity_tail"][tails])
        scatter_add(out["entity_tail"], tails, dp * w["entity_head"][heads])
    else:
        n = len(heads)
        d = w["entity"].shape[1]
        dp = dp.reshape(n, d, d)
        h, t = w["entity"][heads], w["entity"][tails]
        scatter_add(out["entity"], heads, np.einsum("bij,bj->bi", dp, t))
        scatter_add(out["entity"], tails, np.einsum("bij,bi->bj", dp, h))
    return out


# Single-query public API.

def _check_ids(params: ParamStore, head=None, rel=None, tail=None):
    for name, value, bound in (("head", head, params.entity_count),
                               ("rel", rel, 2 * params.relation_count),
                               ("tail", tail, params.entity_count)):
        if value is not None and not 0 <= value < bound:
            raise IndexError(f"{name} id {value} out of range [0, {bound})")


def score_triple(params: ParamStore, mask, triple) -> float:
    h, r, t = (int(x) for x in triple)
    _check_ids(params, h, r, t)
    w = params.view(mask)
    q = _tail_query(params.backbone, w, np.array([h]), np.array([r]))
    return float(q[0] @ _tail_candidates(params.backbone, w)[t])


def score_all_tails(params: ParamStore, mask, head: int, rel: int) -> np.ndarray:
    _check_ids(params, head, rel)
    return tail_logits(params.backbone, params.view(mask), np.array([head]), np.array([rel]))[0]


def score_all_relations(params: ParamStore, mask, head: int, tail: int) -> np.ndarray:
    _check_ids(params, head=head, tail=tail)
    return relation_logits(params.backbone, params.view(mask), np.array([head]), np.array([tail]))[0]


def backward_tails(params: ParamStore, mask, head: int, rel: int, dlogits) -> SparseGrad:
    """Row-sparse gradient of ``dlogits . score_all_tails(params, mask, head, rel)``.

    With a mask, the gradient is taken w.r.t. the surviving weights only, so
    pruned positions are exactly zero.
    """
    _check_ids(params, head, rel)
    dlogits = np.asarray(dlogits, dtype=float)
    if dlogits.shape != (params.entity_count,):
        raise ValueError(f"dlogits shape {dlogits.shape} != ({params.entity_count},)")
    grads = tail_backward(params.backbone, params.view(mask), np.array([head]),
                          np.array([rel]), dlogits[None, :])
    if mask is not None:
        grads = mask.apply(grads)
    return SparseGrad.from_dense(grads)
