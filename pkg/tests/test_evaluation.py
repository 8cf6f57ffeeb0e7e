import itertools
import math

import numpy as np
import pytest
import torch

import toys
from hakg import evaluation as E
from hakg import model as M
from hakg import synthetic as S
from hakg import training as T


def brute_metrics(scores, train, test, k):
    """Rank of each candidate = number of candidates that beat it."""
    cand = [i for i in range(len(scores)) if i not in train]
    rank = {
        i: sum(1 for j in cand if scores[j] > scores[i] or (scores[j] == scores[i] and j < i))
        for i in cand
    }
    hits = sorted(rank[i] for i in test if i in rank and rank[i] < k)
    recall = len(hits) / len(test)
    dcg = 0.0
    for r in hits:
        dcg += 1.0 / math.log2(r + 2)
    idcg = 0.0
    for p in range(min(len(test), k)):
        idcg += 1.0 / math.log2(p + 2)
    return recall, dcg / idcg


# -- ranking -----------------------------------------------------------------


def test_rank_ties_and_exclusion():
    assert E.rank_items([0.5, 0.9, 0.5, 0.1], [3]).tolist() == [1, 0, 2]
    assert E.rank_items([0.2, 0.3], [0, 1]).tolist() == []


def test_rank_matches_enumeration_on_five_items():
    scores = [0.3, -0.1, 0.3, 1.2, 0.0]

    def ordered(p):
        return all(
            scores[a] > scores[b] or (scores[a] == scores[b] and a < b) for a, b in zip(p, p[1:])
        )

    valid = [list(p) for p in itertools.permutations([0, 1, 2, 4]) if ordered(p)]
    assert valid == [[0, 2, 4, 1]]
    assert E.rank_items(scores, [3]).tolist() == valid[0]


# -- metrics -----------------------------------------------------------------


def test_recall_examples():
    assert E.recall_at_k([4, 2, 7], {2, 4}, 3) == 1.0
    assert E.recall_at_k([1, 9, 2, 3], {1, 2, 3}, 2) == pytest.approx(1 / 3, abs=1e-15)
    assert E.recall_at_k([5, 6], {1}, 2) == 0.0
    with pytest.raises(ValueError):
        E.recall_at_k([1], set(), 1)


def test_ndcg_examples():
    assert E.ndcg_at_k([3, 1], {3}, 20) == 1.0
    assert E.ndcg_at_k([1, 3, 2], {3}, 20) == pytest.approx(1 / math.log2(3), abs=1e-12)
    assert E.ndcg_at_k([1, 3, 2], {3}, 20) == pytest.approx(0.6309, abs=1e-4)
    assert E.ndcg_at_k([1, 2, 3], {9}, 2) == 0.0


def test_metrics_match_brute_force_exactly():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(2, 51))
        # coarse scores so ties are common
        scores = rng.integers(0, 6, size=n).astype(float) / 5
        perm = rng.permutation(n)
        n_train = int(rng.integers(0, n - 1))
        train = set(perm[:n_train].tolist())
        rest = perm[n_train:]
        test = set(rest[: int(rng.integers(1, len(rest) + 1))].tolist())
        k = int(rng.integers(1, n + 2))
        ranked = E.rank_items(scores, train)
        want_r, want_n = brute_metrics(scores, train, test, k)
        assert E.recall_at_k(ranked, test, k) == want_r
        assert E.ndcg_at_k(ranked, test, k) == want_n


def test_recall_monotone_in_k():
    rng = np.random.default_rng(1)
    scores = rng.normal(size=40)
    ranked = E.rank_items(scores, {0, 1, 2})
    test = {5, 9, 17, 33}
    vals = [E.recall_at_k(ranked, test, k) for k in range(1, 38)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert vals[-1] == 1.0


# -- evaluate ----------------------------------------------------------------


def test_evaluate_scores_perfect_and_skips_empty():
    scores = np.array([[0.1, 0.9, 0.8, 0.0], [0.5, 0.5, 0.5, 0.5], [0.0, 0.0, 1.0, 0.9]])
    rep = E.evaluate_scores(scores, [[0], [], [2]], [[1, 2], [], [3]], k=2)
    assert rep.recall == 1.0 and rep.ndcg == 1.0
    assert rep.num_users == 2
    assert E.EvalReport.parse(rep.records()) == {"recall@2": 1.0, "ndcg@2": 1.0}
    with pytest.raises(E.EvaluationError):
        E.evaluate_scores(scores, [[], [], []], [[], [], []], k=2)


def test_evaluate_deterministic():
    ds = toys.tiny_dataset()
    g = M.GraphTensors.from_dataset(ds)
    p = toys.random_params(ds, 4, 0)
    cfg = M.ModelConfig(dim=4)
    a = E.evaluate(p, g, cfg, ds.interactions, k=2)
    b = E.evaluate(p, g, cfg, ds.interactions, k=2)
    assert a == b


def test_evaluate_perfect_params():
    ds = toys.tiny_dataset()
    g = M.GraphTensors.from_dataset(ds)
    cfg = M.ModelConfig(dim=4, layers=0)
    p = toys.random_params(ds, 4, 0)
    # one axis per item; each user points at its single test item
    eye = torch.eye(4, dtype=torch.float64)
    p.collab_item_emb = eye[:3].clone()
    p.entity_emb = torch.cat([eye[:3], eye[3:]])
    p.user_emb = eye[[2, 0, 1]].clone()
    rep = E.evaluate(p, g, cfg, ds.interactions, k=1)
    assert rep.recall == 1.0 and rep.ndcg == 1.0


def test_random_params_hit_random_baseline():
    ds = S.toy_dataset()
    ig = ds.interactions
    g = M.GraphTensors.from_dataset(ds)
    shapes = M.param_shapes(ig.num_users, ig.num_items, ds.kg.num_entities, ds.kg.num_relations_with_inverse, 16)
    cfg = M.ModelConfig(dim=16, layers=1)
    vals = [E.evaluate(T.init_params(shapes, s), g, cfg, ig, k=5).recall for s in range(50)]
    base = E.random_recall_baseline(ig.user_neighbors, ig.split_items("test"), ig.num_items, 5)
    sigma = np.std(vals, ddof=1) / math.sqrt(len(vals))
    assert abs(np.mean(vals) - base) < 3 * sigma


def test_random_baseline_formula():
    assert E.random_recall_baseline([[0, 1]], [[2]], 10, 4) == pytest.approx(0.5)
    assert E.random_recall_baseline([[0]], [[1]], 3, 5) == 1.0
