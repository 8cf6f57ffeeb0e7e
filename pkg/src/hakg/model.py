"""Hyperbolic dual-embedding propagation: KG aggregation, collaborative
aggregation, gated fusion, layer combination, scoring and the angle loss.

Parameters are tangent vectors at the origin; every hyperbolic point is
produced by ``project_to_ball(expmap0(.))``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
import torch

from . import geometry as geo
from .data import Dataset

KG_LOG_BASES = ("center", "origin")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    layers: int = 1
    mask_prob: float = 0.5
    cone_K: float = geo.CONE_K
    angle_weight: float = 1e-4
    seed: int = 2022
    ball_eps: float = geo.BALL_EPS
    min_cone_norm: float = geo.MIN_CONE_NORM
    # "origin" swaps the KG log base point for the origin (experiment only)
    kg_log_base: str = "center"
    # test hook: pin every gate entry to this value instead of learning it
    gate_override: float | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError(f"dim must be positive, got {self.dim}")
        # 0 is a degenerate test configuration, not a tuning value
        if not 0 <= self.layers <= 3:
            raise ConfigError(f"layers must be in 0..3, got {self.layers}")
        if not 0.0 <= self.mask_prob < 1.0:
            raise ConfigError(f"mask_prob must be in [0, 1), got {self.mask_prob}")
        if self.angle_weight < 0:
            raise ConfigError(f"angle_weight must be >= 0, got {self.angle_weight}")
        if self.kg_log_base not in KG_LOG_BASES:
            raise ConfigError(f"kg_log_base must be one of {KG_LOG_BASES}")
        geo.GeometryConfig(self.dim, self.ball_eps, self.cone_K, self.min_cone_norm)


PARAM_NAMES = ("user_emb", "collab_item_emb", "entity_emb", "relation_emb", "gate_W1", "gate_W2")


@dataclass
class ModelParams:
    """Trainable tensors; embeddings are tangent vectors at the origin."""

    user_emb: torch.Tensor
    collab_item_emb: torch.Tensor
    entity_emb: torch.Tensor
    relation_emb: torch.Tensor
    gate_W1: torch.Tensor
    gate_W2: torch.Tensor

    def tensors(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def clone(self) -> "ModelParams":
        return ModelParams(**{k: v.detach().clone() for k, v in self.tensors().items()})

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self.tensors().values():
            t.requires_grad_(flag)
        return self

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.tensors().items()}

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in self.tensors().values())


def param_shapes(num_users, num_items, num_entities, num_relations_with_inverse, dim):
    return {
        "user_emb": (num_users, dim),
        "collab_item_emb": (num_items, dim),
        "entity_emb": (num_entities, dim),
        "relation_emb": (num_relations_with_inverse, dim),
        "gate_W1": (dim, dim),
        "gate_W2": (dim, dim),
    }


@dataclass
class GraphTensors:
    """Edge index tensors for the aggregators, sorted so reductions are order-fixed."""

    num_users: int
    num_items: int
    num_entities: int
    kg_heads: torch.Tensor
    kg_relations: torch.Tensor
    kg_tails: torch.Tensor
    # train interactions sorted by (item, user) and by (user, item)
    item_side_items: torch.Tensor
    item_side_users: torch.Tensor
    user_side_users: torch.Tensor
    user_side_items: torch.Tensor
    hier_pairs: torch.Tensor = field(default_factory=lambda: torch.zeros((0, 2), dtype=torch.long))

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "GraphTensors":
        ig, kg = ds.interactions, ds.kg
        trips = sorted(kg.triplets)
        kt = torch.tensor(trips, dtype=torch.long).reshape(-1, 3)
        by_item = sorted((i, u) for u, i in ig.train)
        by_user = sorted(ig.train)
        ii = torch.tensor(by_item, dtype=torch.long).reshape(-1, 2)
        uu = torch.tensor(by_user, dtype=torch.long).reshape(-1, 2)
        hp = torch.tensor(kg.hierarchical_pairs, dtype=torch.long).reshape(-1, 2)
        return cls(
            ig.num_users,
            ig.num_items,
            kg.num_entities,
            kt[:, 0],
            kt[:, 1],
            kt[:, 2],
            ii[:, 0],
            ii[:, 1],
            uu[:, 0],
            uu[:, 1],
            hp,
        )


@dataclass
class Representations:
    """Final hyperbolic representations plus the per-layer states."""

    user: torch.Tensor
    knowledge: torch.Tensor  # all entities; rows [0, num_items) are knowledge items
    collab: torch.Tensor
    layers: dict = field(default_factory=dict, repr=False)

    def knowledge_items(self, num_items: int) -> torch.Tensor:
        return self.knowledge[:num_items]


def materialize(tangent: torch.Tensor, ball_eps: float = geo.BALL_EPS) -> torch.Tensor:
    return geo.project_to_ball(geo.expmap0(tangent, ball_eps), ball_eps)


def _tangent_mean(values, index, num_rows):
    """Row-wise mean of ``values`` grouped by ``index``; also returns the counts."""
    total = torch.zeros((num_rows, values.shape[-1]), dtype=values.dtype)
    total = total.index_add(0, index, values)
    count = torch.bincount(index, minlength=num_rows).to(values.dtype).unsqueeze(-1)
    return total / count.clamp_min(1.0), count.squeeze(-1) > 0


def kg_aggregate_layer(
    entities: torch.Tensor,
    relations: torch.Tensor,
    heads: torch.Tensor,
    rels: torch.Tensor,
    tails: torch.Tensor,
    ball_eps: float = geo.BALL_EPS,
    log_base: str = "center",
) -> torch.Tensor:
    """One relation-transitive KG step over ball points.

    ``relations`` are ball points (already exp-mapped).  Entities without
    outgoing neighbors keep their previous representation.
    """
    context = geo.mobius_add(entities[tails], relations[rels], ball_eps)
    if log_base == "center":
        msgs = geo.log_map(entities[heads], context)
    else:
        msgs = geo.logmap0(context)
    mean, has = _tangent_mean(msgs, heads, entities.shape[0])
    out = materialize(mean, ball_eps)
    return torch.where(has.unsqueeze(-1), out, entities)


def collab_aggregate_layer(
    users: torch.Tensor,
    prev_items: torch.Tensor,
    item_idx: torch.Tensor,
    user_idx: torch.Tensor,
    ball_eps: float = geo.BALL_EPS,
) -> torch.Tensor:
    """Collaborative item step: mean of neighbor users' origin log maps."""
    mean, has = _tangent_mean(geo.logmap0(users[user_idx]), item_idx, prev_items.shape[0])
    return torch.where(has.unsqueeze(-1), materialize(mean, ball_eps), prev_items)


def gate_fuse(
    knowledge: torch.Tensor,
    collab: torch.Tensor,
    W1: torch.Tensor,
    W2: torch.Tensor,
    override: float | None = None,
    ball_eps: float = geo.BALL_EPS,
):
    """Blend the two item views with a sigmoid gate; returns ``(fused, gate)``.

    The blend is taken between the origin log maps of both inputs.
    """
    tk, tc = geo.logmap0(knowledge), geo.logmap0(collab)
    if override is None:
        gate = torch.sigmoid(tk @ W1.T + tc @ W2.T)
    else:
        gate = torch.full_like(tk, float(override))
    fused = materialize(gate * tk + (1 - gate) * tc, ball_eps)
    return fused, gate


def user_aggregate_layer(
    fused_items: torch.Tensor,
    prev_users: torch.Tensor,
    user_idx: torch.Tensor,
    item_idx: torch.Tensor,
    ball_eps: float = geo.BALL_EPS,
) -> torch.Tensor:
    mean, has = _tangent_mean(geo.logmap0(fused_items[item_idx]), user_idx, prev_users.shape[0])
    return torch.where(has.unsqueeze(-1), materialize(mean, ball_eps), prev_users)


def combine_layers(reps: list[torch.Tensor], ball_eps: float = geo.BALL_EPS) -> torch.Tensor:
    """Sum layer representations in the origin tangent space and map back."""
    total = torch.stack([geo.logmap0(r) for r in reps]).sum(dim=0)
    return materialize(total, ball_eps)


def forward(params: ModelParams, graph: GraphTensors, config: ModelConfig) -> Representations:
    eps = config.ball_eps
    ent = materialize(params.entity_emb, eps)
    col = materialize(params.collab_item_emb, eps)
    usr = materialize(params.user_emb, eps)
    rel = materialize(params.relation_emb, eps)
    n_items = graph.num_items

    ent_layers, col_layers, usr_layers, gates = [ent], [col], [usr], []
    for _ in range(config.layers):
        fused, gate = gate_fuse(
            ent[:n_items], col, params.gate_W1, params.gate_W2, config.gate_override, eps
        )
        gates.append(gate)
        new_ent = kg_aggregate_layer(
            ent, rel, graph.kg_heads, graph.kg_relations, graph.kg_tails, eps, config.kg_log_base
        )
        new_col = collab_aggregate_layer(usr, col, graph.item_side_items, graph.item_side_users, eps)
        new_usr = user_aggregate_layer(fused, usr, graph.user_side_users, graph.user_side_items, eps)
        ent, col, usr = new_ent, new_col, new_usr
        ent_layers.append(ent)
        col_layers.append(col)
        usr_layers.append(usr)

    return Representations(
        user=combine_layers(usr_layers, eps),
        knowledge=combine_layers(ent_layers, eps),
        collab=combine_layers(col_layers, eps),
        layers={"entity": ent_layers, "collab": col_layers, "user": usr_layers, "gate": gates},
    )


def _unit(x: torch.Tensor) -> torch.Tensor:
    # zero rows stay zero, which makes their cosine 0
    norm = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    return x / norm.clamp_min(geo.MIN_NORM)


def predict_score(e_u, e_i, e_c) -> torch.Tensor:
    """cos(user, collab item) + cos(user, knowledge item), broadcasting over rows."""
    u = _unit(geo.as_tensor(e_u))
    return (u * _unit(geo.as_tensor(e_c))).sum(-1) + (u * _unit(geo.as_tensor(e_i))).sum(-1)


def score_matrix(reps: Representations, num_items: int, users=None) -> torch.Tensor:
    """All-item scores, shape ``(len(users), num_items)``."""
    u = reps.user if users is None else reps.user[users]
    u = _unit(u)
    return u @ _unit(reps.collab).T + u @ _unit(reps.knowledge_items(num_items)).T


# --------------------------------------------------------------------------
# hierarchy constraint


def subspace_mask(pair_index: int, epoch: int, seed: int, d: int, mask_prob: float) -> np.ndarray:
    """Keep-mask over ``d`` dimensions for one hierarchical pair in one epoch.

    Each dimension is masked off with probability ``mask_prob``; an all-masked
    draw is redrawn from the same stream.
    """
    if mask_prob == 0:
        return np.ones(d, dtype=bool)
    rng = np.random.default_rng([seed, epoch, pair_index])
    while True:
        keep = rng.random(d) >= mask_prob
        if keep.any():
            return keep


def subspace_masks(num_pairs: int, epoch: int, seed: int, d: int, mask_prob: float) -> np.ndarray:
    out = np.ones((num_pairs, d), dtype=bool)
    for k in range(num_pairs):
        out[k] = subspace_mask(k, epoch, seed, d, mask_prob)
    return out


def angle_violations(
    knowledge: torch.Tensor,
    pairs: torch.Tensor,
    masks,
    K: float = geo.CONE_K,
    min_cone_norm: float = geo.MIN_CONE_NORM,
) -> torch.Tensor:
    """Per-pair ``angle - aperture`` before the hinge (masked, norms lifted)."""
    if len(pairs) == 0:
        return knowledge.new_zeros(0)
    m = torch.as_tensor(np.asarray(masks), dtype=knowledge.dtype)
    item = geo.lift_norm(knowledge[pairs[:, 0]] * m, min_cone_norm)
    ent = geo.lift_norm(knowledge[pairs[:, 1]] * m, min_cone_norm)
    return geo.cone_angle(ent, item) - geo.half_aperture(ent, K, min_cone_norm)


def angle_loss(knowledge, pairs, masks, K=geo.CONE_K, min_cone_norm=geo.MIN_CONE_NORM):
    """Sum over (item, entity) pairs of the cone-containment hinge."""
    v = angle_violations(knowledge, pairs, masks, K, min_cone_norm)
    return torch.clamp(v, min=0.0).sum()


# --------------------------------------------------------------------------
# export


def export_records(reps: Representations, num_items: int):
    """Yield ``(kind, id, coords)`` for users, collaborative items and entities."""
    for kind, table in (("user", reps.user), ("item_collab", reps.collab), ("entity", reps.knowledge)):
        arr = table.detach().numpy()
        for idx, row in enumerate(arr):
            yield kind, idx, row


def write_embeddings(path, reps: Representations, num_items: int) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for kind, idx, row in export_records(reps, num_items):
            fh.write(f"{kind} {idx} " + " ".join(repr(float(x)) for x in row) + "\n")
            n += 1
    return n


def read_embeddings(path) -> dict[str, np.ndarray]:
    rows: dict[str, list] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            kind, idx, *coords = line.split()
            rows.setdefault(kind, []).append((int(idx), [float(c) for c in coords]))
    return {k: np.array([c for _, c in sorted(v)]) for k, v in rows.items()}


def config_fields() -> list[str]:
    return [f.name for f in fields(ModelConfig)]
