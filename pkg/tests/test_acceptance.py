"""Acceptance suite: one or more tests per numbered criterion.

Test names carry the criterion number; ``conftest.py`` turns their outcomes
into a PASS/FAIL line per criterion in the terminal summary.
"""
import math

import numpy as np
import pytest
import torch

import scalar_oracle as so
import toys
from hakg import cli
from hakg import data as D
from hakg import evaluation as E
from hakg import geometry as geo
from hakg import model as M
from hakg import synthetic as S
from hakg import training as T

# toy training setup shared by criteria 6, 7, 10 and 11
TOY_MODEL = dict(dim=64, layers=3, angle_weight=0.01)
TOY_TRAIN = dict(learning_rate=1e-2, num_negatives=8, margin=0.6, max_epochs=200, patience=200, eval_k=5)


def ball_points(rng, n, d, max_norm=0.9):
    direction = rng.normal(size=(n, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    return torch.from_numpy(direction * rng.uniform(0, max_norm, size=(n, 1)))


@pytest.fixture(scope="session")
def toy():
    return S.toy_dataset()


@pytest.fixture(scope="session")
def trained(toy):
    """200 epochs on the toy data; keeps both best-epoch and final parameters."""
    ig = toy.interactions
    shapes = M.param_shapes(ig.num_users, ig.num_items, toy.kg.num_entities, toy.kg.num_relations_with_inverse, 64)
    tconf = T.TrainConfig(**TOY_TRAIN)
    final = T.init_params(shapes, tconf.seed)
    result = T.train(toy, M.ModelConfig(**TOY_MODEL), tconf, params=final)
    return result, final


# -- 1 -----------------------------------------------------------------------


def test_criterion_01_geometry_identities():
    rng = np.random.default_rng(101)
    for d in (2, 8):
        x, y, z = (ball_points(rng, 1000, d) for _ in range(3))
        zero = torch.zeros_like(x)
        assert (geo.mobius_add(zero, y) - y).abs().max().item() < 1e-6
        assert (geo.mobius_add(y, zero) - y).abs().max().item() < 1e-6
        assert geo.mobius_add(x, -x).abs().max().item() < 1e-6
        assert (geo.mobius_add(-x, geo.mobius_add(x, y)) - y).abs().max().item() < 1e-6
        assert (geo.exp_map(z, geo.log_map(z, y)) - y).abs().max().item() < 1e-6
        v = geo.log_map(z, x)
        assert (geo.log_map(z, geo.exp_map(z, v)) - v).abs().max().item() < 1e-6
        assert (geo.expmap0(geo.logmap0(y)) - y).abs().max().item() < 1e-6


def test_criterion_01_tagged_examples():
    assert round(geo.mobius_add([0.3, 0.0], [0.4, 0.0])[0].item(), 6) == 0.625
    assert round(geo.exp_map([0.0, 0.0], [0.5, 0.0])[0].item(), 6) == 0.462117
    assert round(geo.log_map([0.0, 0.0], [0.462117, 0.0])[0].item(), 6) == 0.5


# -- 2 -----------------------------------------------------------------------


def test_criterion_02_aperture_and_collinear():
    assert geo.half_aperture([0.5, 0.0]).item() == pytest.approx(0.150568, abs=1e-6)
    assert geo.cone_angle([0.5, 0.0], [0.7, 0.0]).item() == 0.0
    assert geo.cone_angle([0.5, 0.0], [0.3, 0.0]).item() == math.pi


def _point_in_cone(x, frac, step, rng):
    """exp_x of a tangent vector making angle frac * psi(x) with the radial direction."""
    xhat = x / x.norm()
    u = torch.from_numpy(rng.normal(size=x.shape[0]))
    u = u - (u @ xhat) * xhat
    u = u / u.norm()
    theta = frac * geo.half_aperture(x).item()
    v = step * (math.cos(theta) * xhat + math.sin(theta) * u)
    return geo.exp_map(x, v), theta


def test_criterion_02_cone_transitivity():
    rng = np.random.default_rng(202)
    checked = violations = 0
    while checked < 1000:
        d = int(rng.integers(2, 6))
        x = ball_points(rng, 1, d, 0.7)[0]
        if x.norm() < 0.15:
            continue
        y, theta = _point_in_cone(x, rng.uniform(0, 1), rng.uniform(0.05, 1.0), rng)
        assert geo.cone_angle(x, y).item() == pytest.approx(theta, abs=1e-6)
        z, _ = _point_in_cone(y, rng.uniform(0, 1), rng.uniform(0.05, 1.0), rng)
        if geo.cone_angle(y, z).item() > geo.half_aperture(y).item():
            continue
        checked += 1
        violations += geo.cone_angle(x, z).item() > geo.half_aperture(x).item() + 1e-6
    assert violations == 0


# -- 3 -----------------------------------------------------------------------


def test_criterion_03_gradient_check():
    rel, kink = toys.gradient_check(seed=0, dim=4, angle_weight=0.5)
    ds = toys.tiny_dataset()
    assert (ds.interactions.num_users, ds.interactions.num_items, ds.kg.num_entities, ds.kg.num_relations) == (3, 3, 4, 2)
    good = rel[~kink]
    print(f"gradient check: {len(good)}/{len(rel)} smooth coordinates, max rel err {good.max():.2e}")
    assert np.mean(good < 1e-4) >= 0.99


# -- 4 -----------------------------------------------------------------------


def test_criterion_04_forward_oracle():
    ds = toys.tiny_dataset()
    p = toys.random_params(ds, 4, seed=11)
    reps = M.forward(p, M.GraphTensors.from_dataset(ds), M.ModelConfig(dim=4, layers=1))
    users, know, col = so.forward(toys.as_lists(p), ds.kg.triplets, ds.interactions.train, 3, 1)
    assert np.abs(reps.user.numpy() - np.array(users)).max() <= 1e-9
    assert np.abs(reps.knowledge.numpy() - np.array(know)).max() <= 1e-9
    assert np.abs(reps.collab.numpy() - np.array(col)).max() <= 1e-9
    scores = M.score_matrix(reps, 3).numpy()
    want = np.array([[so.score(users[u], know[i], col[i]) for i in range(3)] for u in range(3)])
    assert np.abs(scores - want).max() <= 1e-9


# -- 5 -----------------------------------------------------------------------


def test_criterion_05_metric_oracle():
    from test_evaluation import brute_metrics

    rng = np.random.default_rng(505)
    for _ in range(500):
        n = int(rng.integers(2, 51))
        scores = rng.integers(0, 8, size=n).astype(float)
        perm = rng.permutation(n)
        n_train = int(rng.integers(0, n - 1))
        train = set(perm[:n_train].tolist())
        rest = perm[n_train:]
        test = set(rest[: int(rng.integers(1, len(rest) + 1))].tolist())
        k = int(rng.integers(1, n + 1))
        ranked = E.rank_items(scores, train)
        want = brute_metrics(scores, train, test, k)
        assert (E.recall_at_k(ranked, test, k), E.ndcg_at_k(ranked, test, k)) == want
    assert abs(E.ndcg_at_k([0, 1, 2], {1}, 20) - 1 / math.log2(3)) <= 1e-12


# -- 6 -----------------------------------------------------------------------


def test_criterion_06_training_smoke(toy, trained):
    result, _ = trained
    ig = toy.interactions
    assert (ig.num_users, ig.num_items, toy.kg.num_entities - ig.num_items) == (30, 20, 15)
    assert len(result.history) == 200
    ratio = result.history[-1].loss / result.history[0].loss
    graph = M.GraphTensors.from_dataset(toy)
    recall = E.evaluate(result.params, graph, M.ModelConfig(**TOY_MODEL), ig, k=5, split="test").recall
    base = E.random_recall_baseline(ig.user_neighbors, ig.split_items("test"), ig.num_items, 5)
    print(f"loss ratio {ratio:.3f}; recall@5 {recall:.3f} vs random {base:.3f}")
    assert ratio <= 0.5
    assert recall > 2 * base


# -- 7 -----------------------------------------------------------------------


def test_criterion_07_angle_loss_values():
    pairs = torch.tensor([[0, 1]])
    ones = np.ones((1, 2), dtype=bool)
    inside = torch.tensor([[0.6, 0.0], [0.4, 0.0]], dtype=torch.float64)
    assert M.angle_loss(inside, pairs, ones).item() == 0.0
    # item between the origin and its entity: angle pi, aperture asin(K (1 - r^2) / r)
    outside = torch.tensor([[0.2, 0.0], [0.5, 0.0]], dtype=torch.float64)
    hand = math.pi - math.asin(0.1 * (1 - 0.25) / 0.5)
    assert abs(M.angle_loss(outside, pairs, ones).item() - hand) <= 1e-9


def test_criterion_07_angle_weight_changes_training(toy):
    short = {**TOY_TRAIN, "max_epochs": 3, "patience": 3}
    runs = {}
    for lam in (0.0, 0.01):
        mconf = M.ModelConfig(**{**TOY_MODEL, "angle_weight": lam})
        ig = toy.interactions
        shapes = M.param_shapes(ig.num_users, ig.num_items, toy.kg.num_entities, toy.kg.num_relations_with_inverse, 64)
        p = T.init_params(shapes, 2022)
        T.train(toy, mconf, T.TrainConfig(**short), params=p)
        runs[lam] = p
    diff = (runs[0.0].entity_emb - runs[0.01].entity_emb).abs().max().item()
    assert diff > 0


# -- 8 -----------------------------------------------------------------------


def _perturbed_scores(toy, override, perturb):
    ig = toy.interactions
    graph = M.GraphTensors.from_dataset(toy)
    mconf = M.ModelConfig(dim=8, layers=2, gate_override=override)
    shapes = M.param_shapes(ig.num_users, ig.num_items, toy.kg.num_entities, toy.kg.num_relations_with_inverse, 8)
    p = T.init_params(shapes, 8)
    q = p.clone()
    perturb(q, np.random.default_rng(88))
    with torch.no_grad():
        return M.score_matrix(M.forward(p, graph, mconf), ig.num_items), M.score_matrix(M.forward(q, graph, mconf), ig.num_items)


def test_criterion_08_gate_one_collab_perturbation(toy):
    def perturb(q, rng):
        q.collab_item_emb += torch.from_numpy(rng.normal(scale=0.1, size=q.collab_item_emb.shape))

    before, after = _perturbed_scores(toy, 1.0, perturb)
    change = (before - after).abs().max().item()
    assert change == 0.0, f"max score change {change:.3e}"


def test_criterion_08_gate_zero_knowledge_perturbation(toy):
    n_items = toy.interactions.num_items

    def perturb(q, rng):
        # non-item entities reach the items only through layer >= 1 KG aggregation
        rows = q.entity_emb[n_items:]
        rows += torch.from_numpy(rng.normal(scale=0.1, size=rows.shape))

    before, after = _perturbed_scores(toy, 0.0, perturb)
    change = (before - after).abs().max().item()
    assert change == 0.0, f"max score change {change:.3e}"


# -- 9 -----------------------------------------------------------------------


def test_criterion_09_data_pipeline():
    from test_data import crafted_fixture

    pairs, triplets = crafted_fixture()
    items = sorted({i for _, i in pairs})
    kp, kt = D.k_core_filter(pairs, triplets, k=10, item_ids=items)
    assert D.k_core_filter(kp, kt, k=10, item_ids=items) == (kp, kt)
    users, its, ents = {}, {}, {}
    for u, i in kp:
        users[u] = users.get(u, 0) + 1
        its[i] = its.get(i, 0) + 1
    for h, _, t in kt:
        for e in {h, t}:
            ents[e] = ents.get(e, 0) + 1
    assert min(users.values()) >= 10 and min(its.values()) >= 10
    assert all(c >= 10 for e, c in ents.items() if e not in its)
    canon = list(dict.fromkeys((h % 7, h % 3, (h * 5) % 11) for h in range(60)))
    assert len(D.add_inverse_relations(canon, 3)) == 2 * len(canon)
    many = [(u, i) for u in range(40) for i in range(u % 5, u % 5 + 12)]
    assert D.split_interactions(many, seed=9) == D.split_interactions(many, seed=9)


# -- 10 ----------------------------------------------------------------------


def test_criterion_10_ball_safety(toy, trained):
    result, final = trained
    graph = M.GraphTensors.from_dataset(toy)
    for params in (final, result.params):
        assert params.all_finite()
        with torch.no_grad():
            reps = M.forward(params, graph, M.ModelConfig(**TOY_MODEL))
        points = [reps.user, reps.knowledge, reps.collab, M.materialize(params.relation_emb)]
        points += [x for key in ("entity", "collab", "user") for x in reps.layers[key]]
        worst = max(t.norm(dim=-1).max().item() for t in points)
        assert worst <= 1 - geo.BALL_EPS
        assert all(bool(torch.isfinite(t).all()) for t in points)


# -- 11 ----------------------------------------------------------------------


def test_criterion_11_norm_vs_popularity(toy, trained, tmp_path):
    import csv

    result, _ = trained
    data_dir = S.write_dataset(toy, tmp_path / "data")
    ck = tmp_path / "ck.npz"
    T.save_checkpoint(ck, result.params, result.state, {"model": TOY_MODEL})
    args = ["export", "--data-dir", str(data_dir), "--out-dir", str(tmp_path / "out"), "--checkpoint", str(ck)]
    assert cli.main(args) == 0
    with open(tmp_path / "out" / "norm_vs_popularity.csv", encoding="utf-8") as fh:
        rows = [r for r in csv.DictReader(fh) if r["kind"] == "item"]
    pop = np.array([int(r["popularity"]) for r in rows])
    dist = np.array([float(r["dist_to_origin"]) for r in rows])
    assert pop.min() >= 1
    corr = np.corrcoef(np.log(pop), dist)[0, 1]
    print(f"pearson(log popularity, dist_to_origin) = {corr:.3f}")
    assert corr < -0.2
