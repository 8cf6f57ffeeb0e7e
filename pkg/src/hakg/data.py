"""Interaction and knowledge-graph ingestion, cleaning, splitting and indexing."""
from __future__ import annotations

import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components

logger = logging.getLogger(__name__)

HIER_MODES = ("given", "item_connected", "krackhardt")


class DataError(ValueError):
    """Malformed input files or an unusable dataset."""


class ParseError(DataError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class EmptyDatasetError(DataError):
    pass


# --------------------------------------------------------------------------
# loading


def _int_tokens(path, lineno: int, line: str) -> list[int]:
    out = []
    for tok in line.split():
        try:
            value = int(tok)
        except ValueError:
            raise ParseError(path, lineno, f"non-integer token {tok!r}") from None
        if value < 0:
            raise ParseError(path, lineno, f"negative id {value}")
        out.append(value)
    return out


def _lines(path):
    # universal newlines take care of CRLF
    with open(path, encoding="utf-8") as fh:
        yield from enumerate(fh, start=1)


def load_interactions(path) -> list[tuple[int, int]]:
    """Parse ``user item item ...`` lines into deduplicated (user, item) pairs."""
    pairs: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    for lineno, line in _lines(path):
        ids = _int_tokens(path, lineno, line)
        if not ids:
            continue
        user = ids[0]
        for item in ids[1:]:
            if (user, item) not in seen:
                seen.add((user, item))
                pairs.append((user, item))
    return pairs


def load_kg(path) -> list[tuple[int, int, int]]:
    """Parse ``head relation tail`` lines, keeping first occurrences in file order."""
    triplets: list[tuple[int, int, int]] = []
    seen: set[tuple[int, int, int]] = set()
    for lineno, line in _lines(path):
        if not line.strip():
            continue
        ids = _int_tokens(path, lineno, line)
        if len(ids) != 3:
            raise ParseError(path, lineno, f"expected 3 fields, got {len(ids)}")
        trip = (ids[0], ids[1], ids[2])
        if trip not in seen:
            seen.add(trip)
            triplets.append(trip)
    return triplets


def load_relation_list(path) -> list[int]:
    rels = []
    for lineno, line in _lines(path):
        ids = _int_tokens(path, lineno, line)
        if len(ids) > 1:
            raise ParseError(path, lineno, "expected one relation id per line")
        rels.extend(ids)
    return sorted(set(rels))


# --------------------------------------------------------------------------
# cleaning


def add_inverse_relations(triplets, num_relations: int) -> list[tuple[int, int, int]]:
    """Append ``(t, r + R, h)`` after every canonical ``(h, r, t)``."""
    out = []
    for h, r, t in triplets:
        if not 0 <= r < num_relations:
            raise DataError(f"relation id {r} outside canonical range [0, {num_relations})")
        out.append((h, r, t))
        out.append((t, r + num_relations, h))
    return out


def k_core_filter(pairs, triplets, k: int = 10, item_ids=None):
    """Iteratively drop sparse users, items and entities until nothing changes.

    Users and items need ``k`` interactions; non-item entities need to appear
    in ``k`` triplets.  Items are the entity ids listed in ``item_ids``
    (default: every item id seen in ``pairs``); their KG triplets go with them
    once they are filtered out of the interaction graph.
    """
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    pairs = list(dict.fromkeys(pairs))
    triplets = list(dict.fromkeys(triplets))
    items = set(item_ids) if item_ids is not None else {i for _, i in pairs}

    while True:
        user_deg: dict[int, int] = defaultdict(int)
        item_deg: dict[int, int] = defaultdict(int)
        for u, i in pairs:
            user_deg[u] += 1
            item_deg[i] += 1
        ent_deg: dict[int, int] = defaultdict(int)
        for h, _, t in triplets:
            ent_deg[h] += 1
            if t != h:
                ent_deg[t] += 1

        kept_pairs = [(u, i) for u, i in pairs if user_deg[u] >= k and item_deg[i] >= k]
        live_items = {i for _, i in kept_pairs}

        def alive(e):
            return e in live_items if e in items else ent_deg[e] >= k

        kept_trips = [(h, r, t) for h, r, t in triplets if alive(h) and alive(t)]
        if len(kept_pairs) == len(pairs) and len(kept_trips) == len(triplets):
            break
        pairs, triplets = kept_pairs, kept_trips

    if not pairs:
        raise EmptyDatasetError(f"{k}-core filtering removed every interaction")
    return pairs, triplets


def split_interactions(pairs, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Per-user shuffled split into train / valid / test pair lists.

    Each user's items are shuffled with a generator seeded by ``seed`` and cut
    at rounded ratio boundaries (valid and test sizes rounded half up); at
    least one item always stays in train.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    by_user: dict[int, list[int]] = defaultdict(list)
    for u, i in dict.fromkeys(pairs):
        by_user[u].append(i)
    rng = np.random.default_rng(seed)
    train, valid, test = [], [], []
    for u in sorted(by_user):
        items = np.array(sorted(by_user[u]))
        rng.shuffle(items)
        n = len(items)
        n_valid = int(np.floor(n * ratios[1] + 0.5))
        n_test = int(np.floor(n * ratios[2] + 0.5))
        while n - n_valid - n_test < 1:
            if n_valid >= n_test and n_valid > 0:
                n_valid -= 1
            else:
                n_test -= 1
        n_train = n - n_valid - n_test
        train += [(u, int(i)) for i in items[:n_train]]
        valid += [(u, int(i)) for i in items[n_train:n_train + n_valid]]
        test += [(u, int(i)) for i in items[n_train + n_valid:]]
    return train, valid, test


def collect_k_hop_entities(triplets, item_ids, hops: int = 2):
    """Keep triplets whose head lies fewer than ``hops`` steps from an item.

    Traversal follows the head -> tail direction.  Returns the kept triplets
    (original ids, input order) and the distance of each reached entity.
    """
    if hops < 1:
        raise DataError(f"hops must be >= 1, got {hops}")
    out_edges: dict[int, list[int]] = defaultdict(list)
    for h, _, t in triplets:
        out_edges[h].append(t)
    depth = {i: 0 for i in item_ids}
    queue = deque(depth)
    while queue:
        e = queue.popleft()
        if depth[e] + 1 > hops:
            continue
        for t in out_edges.get(e, ()):
            if t not in depth:
                depth[t] = depth[e] + 1
                queue.append(t)
    kept = [(h, r, t) for h, r, t in triplets if h in depth and depth[h] < hops]
    return kept, depth


def reindex(pairs, triplets, item_ids=None):
    """Map users to ``[0, U)``, items to ``[0, I)`` and other entities after the items.

    Returns ``(pairs, triplets, user_map, entity_map)`` where the maps go from
    original id to new id; ``entity_map`` covers items too.
    """
    users = sorted({u for u, _ in pairs})
    items = sorted(set(item_ids) if item_ids is not None else {i for _, i in pairs})
    user_map = {u: n for n, u in enumerate(users)}
    entity_map = {i: n for n, i in enumerate(items)}
    for h, _, t in triplets:
        for e in (h, t):
            if e not in entity_map:
                entity_map[e] = len(entity_map)
    # non-item entities ordered by original id for determinism
    extra = sorted(e for e in entity_map if entity_map[e] >= len(items))
    for n, e in enumerate(extra):
        entity_map[e] = len(items) + n
    new_pairs = [(user_map[u], entity_map[i]) for u, i in pairs]
    new_trips = [(entity_map[h], r, entity_map[t]) for h, r, t in triplets]
    return new_pairs, new_trips, user_map, entity_map


# --------------------------------------------------------------------------
# hierarchy tagging


def krackhardt_hierarchy(edges) -> float:
    """Krackhardt hierarchy score of a directed graph given as (src, dst) edges.

    Fraction of unordered reachable pairs that are reachable in one direction
    only.  Graphs without any reachable pair score 0.
    """
    edges = list(edges)
    if not edges:
        return 0.0
    nodes = sorted({n for e in edges for n in e})
    index = {n: k for k, n in enumerate(nodes)}
    src = np.array([index[a] for a, _ in edges])
    dst = np.array([index[b] for _, b in edges])
    n = len(nodes)
    adj = csr_matrix((np.ones(len(edges)), (src, dst)), shape=(n, n))
    _, labels = connected_components(adj, directed=True, connection="strong")
    sizes = np.bincount(labels)
    symmetric = int((sizes * (sizes - 1) // 2).sum())
    ordered = 0
    for v in range(n):
        ordered += len(breadth_first_order(adj, v, directed=True, return_predecessors=False)) - 1
    reachable = ordered - symmetric
    if reachable == 0:
        return 0.0
    return 1.0 - symmetric / reachable


def tag_hierarchical_relations(
    triplets,
    num_items: int,
    mode: str = "item_connected",
    given=None,
    threshold: float = 0.9,
):
    """Pick hierarchical canonical relations and build the (item, tail) set H.

    ``triplets`` are canonical (no inverse directions).  Returns
    ``(sorted relation ids, sorted list of (item, tail) pairs)``.
    """
    if mode not in HIER_MODES:
        raise DataError(f"unknown hierarchy mode {mode!r}; expected one of {HIER_MODES}")
    if mode == "given":
        if given is None:
            raise DataError("hierarchy mode 'given' needs an explicit relation list")
        hier = set(given)
    elif mode == "item_connected":
        hier = {r for h, r, _ in triplets if h < num_items}
    else:
        by_rel: dict[int, list[tuple[int, int]]] = defaultdict(list)
        for h, r, t in triplets:
            by_rel[r].append((h, t))
        hier = {r for r, edges in by_rel.items() if krackhardt_hierarchy(edges) >= threshold}
    pairs = sorted({(h, t) for h, r, t in triplets if r in hier and h < num_items})
    return sorted(hier), pairs


# --------------------------------------------------------------------------
# graph containers


def _adjacency(rows, cols, n_rows):
    out = [[] for _ in range(n_rows)]
    for a, b in zip(rows, cols):
        out[a].append(b)
    return [sorted(x) for x in out]


@dataclass(frozen=True)
class InteractionGraph:
    num_users: int
    num_items: int
    train: list
    valid: list
    test: list
    user_neighbors: list = field(repr=False)
    item_neighbors: list = field(repr=False)

    @classmethod
    def build(cls, num_users, num_items, train, valid=(), test=()):
        train, valid, test = (sorted(set(map(tuple, s))) for s in (train, valid, test))
        for name, split in (("train", train), ("valid", valid), ("test", test)):
            for u, i in split:
                if not (0 <= u < num_users and 0 <= i < num_items):
                    raise DataError(f"{name} pair ({u}, {i}) outside id ranges")
        if set(train) & set(valid) or set(train) & set(test) or set(valid) & set(test):
            raise DataError("train/valid/test splits overlap")
        users = [u for u, _ in train]
        items = [i for _, i in train]
        return cls(
            num_users,
            num_items,
            train,
            valid,
            test,
            _adjacency(users, items, num_users),
            _adjacency(items, users, num_items),
        )

    def popularity(self) -> np.ndarray:
        return np.array([len(x) for x in self.item_neighbors], dtype=np.int64)

    def user_degree(self) -> np.ndarray:
        return np.array([len(x) for x in self.user_neighbors], dtype=np.int64)

    def split_items(self, split: str) -> list[list[int]]:
        pairs = getattr(self, split)
        return _adjacency([u for u, _ in pairs], [i for _, i in pairs], self.num_users)


@dataclass(frozen=True)
class KnowledgeGraph:
    """Entity/relation id spaces with both triplet directions.

    ``triplets`` holds canonical triplets followed by their inverses;
    ``kg_neighbors[e]`` lists ``(relation, tail)`` sorted.
    """

    num_entities: int
    num_relations: int  # canonical count R; inverse of r is r + R
    triplets: list
    hierarchical_relations: list
    hierarchical_pairs: list
    kg_neighbors: list = field(repr=False)

    @property
    def num_relations_with_inverse(self) -> int:
        return 2 * self.num_relations

    @property
    def num_canonical_triplets(self) -> int:
        return len(self.triplets) // 2

    @classmethod
    def build(
        cls,
        canonical,
        num_entities: int,
        num_relations: int,
        num_items: int,
        hier_mode: str = "item_connected",
        given=None,
        threshold: float = 0.9,
    ):
        canonical = list(dict.fromkeys(canonical))
        for h, r, t in canonical:
            if not (0 <= h < num_entities and 0 <= t < num_entities):
                raise DataError(f"triplet ({h}, {r}, {t}) references an entity outside [0, {num_entities})")
        if num_entities < num_items:
            raise DataError("items must occupy entity ids [0, num_items)")
        hier, pairs = tag_hierarchical_relations(canonical, num_items, hier_mode, given, threshold)
        full = add_inverse_relations(canonical, num_relations)
        nbrs = [[] for _ in range(num_entities)]
        for h, r, t in full:
            nbrs[h].append((r, t))
        return cls(
            num_entities,
            num_relations,
            full,
            hier,
            pairs,
            [sorted(x) for x in nbrs],
        )


@dataclass(frozen=True)
class DatasetStats:
    num_users: int
    num_items: int
    num_interactions: int
    num_entities: int
    num_relations: int
    num_triplets: int
    popularity: np.ndarray = field(repr=False)
    _degrees: dict = field(default_factory=dict, repr=False)

    def degree_distribution(self) -> list[tuple[int, int]]:
        """(degree, node count) over users and items of the train graph."""
        return sorted(self._degrees.items())

    def lines(self) -> list[str]:
        return [
            f"users\t{self.num_users}",
            f"items\t{self.num_items}",
            f"interactions\t{self.num_interactions}",
            f"entities\t{self.num_entities}",
            f"relations\t{self.num_relations}",
            f"triplets\t{self.num_triplets}",
        ]


@dataclass(frozen=True)
class Dataset:
    interactions: InteractionGraph
    kg: KnowledgeGraph

    def stats(self) -> DatasetStats:
        ig, kg = self.interactions, self.kg
        degrees: dict[int, int] = defaultdict(int)
        for d in list(ig.user_degree()) + list(ig.popularity()):
            degrees[int(d)] += 1
        return DatasetStats(
            num_users=ig.num_users,
            num_items=ig.num_items,
            num_interactions=len(ig.train) + len(ig.valid) + len(ig.test),
            num_entities=kg.num_entities,
            num_relations=kg.num_relations,
            num_triplets=kg.num_canonical_triplets,
            popularity=ig.popularity(),
            _degrees=dict(degrees),
        )


def load_dataset(
    data_dir,
    hier_mode: str = "item_connected",
    core: int = 10,
    hops: int = 2,
    split_seed: int = 0,
    ratios=(0.8, 0.1, 0.1),
    krackhardt_threshold: float = 0.9,
) -> Dataset:
    """Build a :class:`Dataset` from a directory.

    With ``interactions.txt`` present the raw pipeline runs: k-hop KG
    collection, k-core filtering, re-indexing and a seeded per-user split.
    Otherwise ``train.txt`` / ``test.txt`` (and optional ``valid.txt``) are
    taken verbatim, with ids assumed already dense.
    """
    data_dir = Path(data_dir)
    kg_path = data_dir / "kg_final.txt"
    if not kg_path.exists():
        raise DataError(f"missing KG file: {kg_path}")
    triplets = load_kg(kg_path)
    given = None
    hier_path = data_dir / "hier_relations.txt"
    if hier_mode == "given":
        if not hier_path.exists():
            raise DataError(f"hierarchy mode 'given' needs {hier_path}")
        given = load_relation_list(hier_path)

    raw_path = data_dir / "interactions.txt"
    if raw_path.exists():
        pairs = load_interactions(raw_path)
        raw_items = sorted({i for _, i in pairs})
        triplets, _ = collect_k_hop_entities(triplets, raw_items, hops)
        pairs, triplets = k_core_filter(pairs, triplets, core, item_ids=raw_items)
        kept_items = sorted({i for _, i in pairs})
        pairs, triplets, _, _ = reindex(pairs, triplets, kept_items)
        train, valid, test = split_interactions(pairs, ratios, split_seed)
        num_items = len(kept_items)
    else:
        train_path = data_dir / "train.txt"
        test_path = data_dir / "test.txt"
        for p in (train_path, test_path):
            if not p.exists():
                raise DataError(f"missing interaction file: {p}")
        train = load_interactions(train_path)
        test = load_interactions(test_path)
        valid_path = data_dir / "valid.txt"
        valid = load_interactions(valid_path) if valid_path.exists() else []
        all_pairs = train + valid + test
        if not all_pairs:
            raise EmptyDatasetError("no interactions found")
        num_items = max(i for _, i in all_pairs) + 1
        pairs = all_pairs

    num_users = max(u for u, _ in pairs) + 1
    max_ent = max((max(h, t) for h, _, t in triplets), default=-1)
    num_entities = max(num_items, max_ent + 1)
    num_relations = max((r for _, r, _ in triplets), default=-1) + 1
    if given:
        num_relations = max(num_relations, max(given) + 1)
    ig = InteractionGraph.build(num_users, num_items, train, valid, test)
    kg = KnowledgeGraph.build(
        triplets, num_entities, num_relations, num_items, hier_mode, given, krackhardt_threshold
    )
    logger.info(
        "loaded %d users, %d items, %d train pairs, %d entities, %d canonical triplets",
        num_users, num_items, len(ig.train), num_entities, len(triplets),
    )
    return Dataset(ig, kg)
