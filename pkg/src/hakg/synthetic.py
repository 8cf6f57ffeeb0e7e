"""Small hierarchical toy dataset for smoke tests and demos.

Items fall into categories split into sub-categories, and each item also
carries a brand.  Every user prefers one category and picks items from it
with a skewed popularity, plus a little cross-category noise.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import Dataset, InteractionGraph, KnowledgeGraph, split_interactions

# canonical relations
IS_A = 0  # item -> sub-category
SUBCLASS_OF = 1  # sub-category -> category
MADE_BY = 2  # item -> brand


def toy_hierarchy(
    num_users: int = 30,
    num_items: int = 20,
    num_categories: int = 4,
    subcats_per_category: int = 2,
    num_brands: int = 3,
    items_per_user: int = 4,
    noise_items: int = 2,
    popularity_skew: float = 2.0,
    seed: int = 0,
):
    """Return ``(pairs, canonical triplets, num_entities)``.

    Entity ids: items first, then categories, sub-categories and brands; with
    the defaults that is 20 items plus 15 other entities.
    """
    rng = np.random.default_rng(seed)
    cat0 = num_items
    sub0 = cat0 + num_categories
    brand0 = sub0 + num_categories * subcats_per_category
    num_entities = brand0 + num_brands

    item_cat = np.arange(num_items) % num_categories
    triplets = []
    for c in range(num_categories):
        for s in range(subcats_per_category):
            triplets.append((sub0 + c * subcats_per_category + s, SUBCLASS_OF, cat0 + c))
    for i in range(num_items):
        c = item_cat[i]
        s = (i // num_categories) % subcats_per_category
        triplets.append((i, IS_A, sub0 + c * subcats_per_category + s))
        triplets.append((i, MADE_BY, brand0 + i % num_brands))

    # Zipf-like popularity inside each category
    weight = 1.0 / (1 + np.arange(num_items) // num_categories) ** 1.2
    # cross-category picks concentrate on a few globally popular items
    global_weight = 1.0 / (1 + np.arange(num_items)) ** popularity_skew
    pairs = []
    for u in range(num_users):
        c = u % num_categories
        pool = np.flatnonzero(item_cat == c)
        p = weight[pool] / weight[pool].sum()
        k = min(items_per_user, len(pool))
        chosen = set(rng.choice(pool, size=k, replace=False, p=p).tolist())
        others = np.flatnonzero(item_cat != c)
        q = global_weight[others] / global_weight[others].sum()
        chosen |= set(rng.choice(others, size=noise_items, replace=False, p=q).tolist())
        pairs += [(u, int(i)) for i in sorted(chosen)]
    return pairs, triplets, num_entities


def toy_dataset(seed: int = 0, split_seed: int = 0, hier_mode: str = "item_connected", **kwargs) -> Dataset:
    pairs, triplets, num_entities = toy_hierarchy(seed=seed, **kwargs)
    num_users = max(u for u, _ in pairs) + 1
    num_items = kwargs.get("num_items", 20)
    train, valid, test = split_interactions(pairs, (0.8, 0.1, 0.1), split_seed)
    ig = InteractionGraph.build(num_users, num_items, train, valid, test)
    kg = KnowledgeGraph.build(triplets, num_entities, 3, num_items, hier_mode)
    return Dataset(ig, kg)


def _write_user_lines(path: Path, pairs, num_users: int):
    by_user = [[] for _ in range(num_users)]
    for u, i in pairs:
        by_user[u].append(i)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, items in enumerate(by_user):
            fh.write(" ".join(map(str, [u] + sorted(items))) + "\n")


def write_dataset(ds: Dataset, out_dir) -> Path:
    """Write ``train/valid/test.txt`` and ``kg_final.txt`` (canonical triplets)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ig = ds.interactions
    _write_user_lines(out / "train.txt", ig.train, ig.num_users)
    _write_user_lines(out / "valid.txt", ig.valid, ig.num_users)
    _write_user_lines(out / "test.txt", ig.test, ig.num_users)
    canonical = ds.kg.triplets[0::2]
    with open(out / "kg_final.txt", "w", encoding="utf-8", newline="\n") as fh:
        for h, r, t in canonical:
            fh.write(f"{h} {r} {t}\n")
    with open(out / "hier_relations.txt", "w", encoding="utf-8", newline="\n") as fh:
        for r in ds.kg.hierarchical_relations:
            fh.write(f"{r}\n")
    return out
