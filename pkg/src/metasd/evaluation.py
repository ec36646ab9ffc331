"""Filtered link-prediction metrics (MRR, Hits@k) with a mean tie convention."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional

import numpy as np

from .graph import FilterIndex, SplitData, long_tail_relations
from .models import ParamStore, tail_logits

HITS_AT = (1, 3, 10)


class EmptySplitError(ValueError):
    pass


def filtered_rank(scores, target: int, known_true: Iterable[int] = ()) -> float:
    """Rank of ``target`` among candidates not known to be true.

    Ties count half: ``1 + #higher + #equal / 2``.
    """
    scores = np.asarray(scores, dtype=float)
    if not 0 <= target < len(scores):
        raise IndexError(f"target {target} out of range [0, {len(scores)})")
    competing = np.ones(len(scores), dtype=bool)
    others = [e for e in known_true if e != target]
    competing[others] = False
    competing[target] = False
    s = scores[target]
    higher = int(np.count_nonzero(scores[competing] > s))
    equal = int(np.count_nonzero(scores[competing] == s))
    return 1.0 + higher + equal / 2.0


def filtered_ranks(params: ParamStore, mask, triples, filter_index: FilterIndex,
                   batch_size: int = 512) -> np.ndarray:
    """Filtered tail rank of every triple (reciprocal triples cover head prediction)."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    w = params.view(mask)
    out = np.empty(len(triples))
    for start in range(0, len(triples), batch_size):
        chunk = triples[start:start + batch_size]
        logits = tail_logits(params.backbone, w, chunk[:, 0], chunk[:, 1])
        rows = np.arange(len(chunk))
        target = logits[rows, chunk[:, 2]]
        for i, (h, r, t) in enumerate(chunk.tolist()):
            known = filter_index[(h, r)]
            if known:
                logits[i, list(known)] = -np.inf
        logits[rows, chunk[:, 2]] = -np.inf
        higher = np.count_nonzero(logits > target[:, None], axis=1)
        equal = np.count_nonzero(logits == target[:, None], axis=1)
        out[start:start + len(chunk)] = 1.0 + higher + equal / 2.0
    return out


@dataclass
class EvalReport:
    split: str
    view: str
    mrr: float
    hits: Dict[int, float]
    query_count: int
    subsets: Dict[str, "EvalReport"] = field(default_factory=dict)
    ranks: Optional[np.ndarray] = field(default=None, repr=False)
    effective_params: Optional[int] = None

    def to_dict(self) -> dict:
        out = {"split": self.split, "view": self.view, "mrr": self.mrr,
               "hits": {str(k): v for k, v in self.hits.items()},
               "query_count": self.query_count}
        if self.effective_params is not None:
            out["effective_params"] = self.effective_params
        if self.subsets:
            out["subsets"] = {k: v.to_dict() for k, v in self.subsets.items()}
        return out

    def summary(self) -> str:
        hits = " ".join(f"H@{k}={v:.4f}" for k, v in self.hits.items())
        return f"{self.split}/{self.view}: MRR={self.mrr:.4f} {hits} (n={self.query_count})"


def report_from_ranks(ranks: np.ndarray, split: str, view: str) -> EvalReport:
    ranks = np.asarray(ranks, dtype=float)
    if len(ranks) == 0:
        raise EmptySplitError(f"{split}: no queries to evaluate")
    n = len(ranks)
    mrr = math.fsum((1.0 / ranks).tolist()) / n
    hits = {k: int(np.count_nonzero(ranks <= k)) / n for k in HITS_AT}
    return EvalReport(split, view, mrr, hits, n, ranks=ranks)


def subset_selector(triples: np.ndarray, relations, relation_count: Optional[int],
                    tail_only: bool = False) -> np.ndarray:
    rels = triples[:, 1]
    original = rels % relation_count if relation_count else rels
    keep = np.isin(original, list(relations))
    if tail_only and relation_count:
        keep &= rels < relation_count
    return keep


def evaluate(params: ParamStore, mask, triples, filter_index: FilterIndex,
             subsets: Optional[Mapping[str, Iterable[int]]] = None, split: str = "test",
             view: Optional[str] = None, batch_size: int = 512) -> EvalReport:
    """Filtered MRR and Hits@{1,3,10} over ``triples``.

    ``triples`` is a reciprocal-augmented split (or a :class:`SplitData`, in
    which case ``split`` names the field). Each subset restricts to triples
    whose original relation is in the given set.
    """
    if isinstance(triples, SplitData):
        triples = triples.split(split)
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    view = view or ("teacher" if mask is None else "student")
    ranks = filtered_ranks(params, mask, triples, filter_index, batch_size)
    report = report_from_ranks(ranks, split, view)
    if mask is not None:
        report.effective_params = mask.size - mask.zeros
    for name, rels in (subsets or {}).items():
        keep = subset_selector(triples, set(rels), params.relation_count)
        report.subsets[name] = report_from_ranks(ranks[keep], f"{split}:{name}", view)
    return report


def long_tail_report(params: ParamStore, mask, splits: SplitData, filter_index: FilterIndex,
                     threshold: int = 1000, split: str = "test", train=None) -> Dict[str, EvalReport]:
    """Teacher and student reports restricted to long-tail relations.

    Each report carries two subsets: ``long_tail`` (both query directions) and
    ``long_tail_tail_only``. ``train`` defaults to the training stream plus
    the quiz set, i.e. the original training file.
    """
    if train is None:
        train = np.unique(np.concatenate([splits.train, splits.quiz]), axis=0)
    rels = long_tail_relations(train, threshold, params.relation_count)
    triples = splits.split(split)
    keep_both = subset_selector(triples, rels, params.relation_count)
    if not keep_both.any():
        raise EmptySplitError(f"{split}: no triples with long-tail relations (threshold {threshold})")
    keep_tail = subset_selector(triples, rels, params.relation_count, tail_only=True)
    out = {}
    for view, m in (("teacher", None), ("student", mask)):
        ranks = filtered_ranks(params, m, triples[keep_both], filter_index)
        rep = report_from_ranks(ranks, f"{split}:long_tail", view)
        rep.subsets["long_tail"] = report_from_ranks(ranks, f"{split}:long_tail", view)
        tail_ranks = ranks[keep_tail[keep_both]]
        if len(tail_ranks):
            rep.subsets["long_tail_tail_only"] = report_from_ranks(
                tail_ranks, f"{split}:long_tail_tail_only", view)
        out[view] = rep
    out["relations"] = sorted(rels)
    return out


def write_report(path, reports) -> None:
    """Serialize reports as one JSON document; see README for the schema."""
    def enc(x):
        if isinstance(x, EvalReport):
            return x.to_dict()
        if isinstance(x, dict):
            return {k: enc(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [enc(v) for v in x]
        return x
    with open(path, "w") as fh:
        json.dump(enc(reports), fh, indent=2, sort_keys=True)
