"""All-ranking top-K evaluation (recall@K, ndcg@K)."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import model as M

logger = logging.getLogger(__name__)


class EvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvalReport:
    k: int
    recall: float
    ndcg: float
    num_users: int
    split: str = "test"
    per_user_recall: dict = field(default_factory=dict, repr=False)
    per_user_ndcg: dict = field(default_factory=dict, repr=False)

    def records(self) -> list[str]:
        return [
            f"metric=recall k={self.k} value={self.recall:.6f} users={self.num_users} split={self.split}",
            f"metric=ndcg k={self.k} value={self.ndcg:.6f} users={self.num_users} split={self.split}",
        ]

    @staticmethod
    def parse(lines) -> dict[str, float]:
        out = {}
        for line in lines:
            kv = dict(tok.split("=", 1) for tok in line.split())
            out[f"{kv['metric']}@{kv['k']}"] = float(kv["value"])
        return out


def rank_items(scores, train_items) -> np.ndarray:
    """Candidate item ids by descending score; ties go to the lower id.

    ``scores`` covers every item; items in ``train_items`` are excluded.
    """
    scores = np.asarray(scores, dtype=np.float64)
    keep = np.ones(len(scores), dtype=bool)
    keep[list(train_items)] = False
    cand = np.flatnonzero(keep)
    order = np.argsort(-scores[cand], kind="stable")
    return cand[order]


def recall_at_k(ranked, test_items, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    test = set(test_items)
    if not test:
        raise ValueError("empty test set")
    hits = sum(1 for i in ranked[:k] if i in test)
    return hits / len(test)


def ndcg_at_k(ranked, test_items, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    test = set(test_items)
    if not test:
        raise ValueError("empty test set")
    dcg = sum(1.0 / math.log2(p + 2) for p, i in enumerate(ranked[:k]) if i in test)
    idcg = sum(1.0 / math.log2(p + 2) for p in range(min(len(test), k)))
    return dcg / idcg


def evaluate_scores(scores: np.ndarray, train_items, test_items, k: int, split: str = "test") -> EvalReport:
    """Macro-averaged metrics from a dense ``(num_users, num_items)`` score matrix."""
    rec, ndcg = {}, {}
    for u, test in enumerate(test_items):
        if not test:
            continue
        ranked = rank_items(scores[u], train_items[u])
        rec[u] = recall_at_k(ranked, test, k)
        ndcg[u] = ndcg_at_k(ranked, test, k)
    if not rec:
        raise EvaluationError(f"no user has {split} items to evaluate")
    return EvalReport(
        k=k,
        recall=float(np.mean(list(rec.values()))),
        ndcg=float(np.mean(list(ndcg.values()))),
        num_users=len(rec),
        split=split,
        per_user_recall=rec,
        per_user_ndcg=ndcg,
    )


def evaluate(params, graph, config, interactions, k: int = 20, split: str = "test") -> EvalReport:
    """Run one forward pass and rank every user that has ``split`` items."""
    with torch.no_grad():
        reps = M.forward(params, graph, config)
        scores = M.score_matrix(reps, graph.num_items).numpy()
    return evaluate_scores(
        scores, interactions.user_neighbors, interactions.split_items(split), k, split
    )


def random_recall_baseline(train_items, test_items, num_items: int, k: int) -> float:
    """Expected recall@K of a uniformly random ranking, averaged over users."""
    vals = []
    for train, test in zip(train_items, test_items):
        if not test:
            continue
        n_cand = num_items - len(set(train))
        vals.append(min(k, n_cand) / n_cand)
    return float(np.mean(vals))
