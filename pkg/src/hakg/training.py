"""Contrastive + angle-loss optimisation with Adam and early stopping."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import model as M
from .data import Dataset
from .evaluation import evaluate

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

# negatives per positive and margin reported for the three benchmark datasets
PRESETS = {
    "alibaba-ifashion": {"num_negatives": 200, "margin": 0.6},
    "yelp2018": {"num_negatives": 400, "margin": 0.8},
    "last-fm": {"num_negatives": 400, "margin": 0.7},
}
LR_GRID = (1e-4, 1e-3, 1e-2)
ANGLE_WEIGHT_GRID = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1)


class TrainingError(RuntimeError):
    pass


class GradientError(TrainingError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 4096
    num_negatives: int = 200
    margin: float = 0.6
    max_epochs: int = 400
    patience: int = 10
    seed: int = 2022
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    eval_k: int = 20
    monitor: str = "valid"  # "test" reproduces the published protocol
    angle_pair_fraction: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise M.ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise M.ConfigError("batch_size must be >= 1")
        if self.num_negatives < 1:
            raise M.ConfigError("num_negatives must be >= 1")
        if not 0 < self.margin < 2:
            raise M.ConfigError(f"margin must be in (0, 2), got {self.margin}")
        if self.patience < 1:
            raise M.ConfigError("patience must be >= 1")
        if self.max_epochs < 1:
            raise M.ConfigError("max_epochs must be >= 1")
        if self.monitor not in ("valid", "test"):
            raise M.ConfigError("monitor must be 'valid' or 'test'")
        if not 0 < self.angle_pair_fraction <= 1:
            raise M.ConfigError("angle_pair_fraction must be in (0, 1]")


# --------------------------------------------------------------------------
# parameters


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(shapes: dict, seed: int) -> M.ModelParams:
    """Xavier-uniform draws; embedding rows use fan_in 1, fan_out d."""
    rng = np.random.default_rng(seed)
    out = {}
    for name in M.PARAM_NAMES:
        rows, cols = shapes[name]
        fan_in = cols if name.startswith("gate_") else 1
        a = xavier_bound(fan_in, cols)
        out[name] = torch.from_numpy(rng.uniform(-a, a, size=(rows, cols)))
    return M.ModelParams(**out)


# --------------------------------------------------------------------------
# sampling and losses


def sample_negatives(user_items, num_items: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` items drawn uniformly with replacement from outside ``user_items``."""
    excluded = np.unique(np.asarray(list(user_items), dtype=np.int64))
    n_free = num_items - len(excluded)
    if n_free <= 0:
        raise ValueError("user has interacted with every item")
    # draw a rank among free items, then shift past the excluded ids below it
    ranks = rng.integers(0, n_free, size=count)
    shift = excluded - np.arange(len(excluded))
    return ranks + np.searchsorted(shift, ranks, side="right")


def contrastive_loss(pos_score, neg_scores, margin: float) -> torch.Tensor:
    """Per-positive loss ``2 - pos + mean(relu(neg - margin))``."""
    pos = torch.as_tensor(pos_score, dtype=torch.float64)
    neg = torch.as_tensor(neg_scores, dtype=torch.float64)
    return 2.0 - pos + torch.clamp(neg - margin, min=0.0).mean(dim=-1)


@dataclass
class Batch:
    users: torch.Tensor
    pos_items: torch.Tensor
    neg_items: torch.Tensor  # (B, num_negatives)
    hier_pairs: torch.Tensor
    masks: np.ndarray


@dataclass
class LossParts:
    total: torch.Tensor
    contrastive: torch.Tensor
    angle: torch.Tensor


def total_loss(params, graph, mconf: M.ModelConfig, batch: Batch, margin: float) -> LossParts:
    reps = M.forward(params, graph, mconf)
    items = reps.knowledge_items(graph.num_items)
    eu = reps.user[batch.users]
    pos = M.predict_score(eu, items[batch.pos_items], reps.collab[batch.pos_items])
    neg = M.predict_score(
        eu.unsqueeze(1), items[batch.neg_items], reps.collab[batch.neg_items]
    )
    contrastive = contrastive_loss(pos, neg, margin).mean()
    if len(batch.hier_pairs):
        angle = M.angle_loss(
            reps.knowledge, batch.hier_pairs, batch.masks, mconf.cone_K, mconf.min_cone_norm
        )
    else:
        angle = contrastive.new_zeros(())
    return LossParts(contrastive + mconf.angle_weight * angle, contrastive, angle)


def compute_gradients(params, graph, mconf, batch, margin):
    """Return ``(LossParts, {name: grad})``; raises GradientError on non-finite values."""
    work = params.clone().requires_grad_(True)
    parts = total_loss(work, graph, mconf, batch, margin)
    parts.total.backward()
    grads = {}
    for name, t in work.tensors().items():
        g = t.grad if t.grad is not None else torch.zeros_like(t)
        if not torch.isfinite(g).all():
            bad = int((~torch.isfinite(g)).sum())
            raise GradientError(f"non-finite gradient in {name} ({bad} entries)")
        grads[name] = g.detach()
    return LossParts(parts.total.detach(), parts.contrastive.detach(), parts.angle.detach()), grads


# --------------------------------------------------------------------------
# optimiser


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)
    best_metric: float = -1.0
    best_epoch: int = 0
    epochs_since_best: int = 0
    rng_state: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, params: M.ModelParams, rng: np.random.Generator) -> "TrainState":
        zeros = {k: torch.zeros_like(v) for k, v in params.tensors().items()}
        return cls(
            exp_avg=zeros,
            exp_avg_sq={k: v.clone() for k, v in zeros.items()},
            rng_state=rng.bit_generator.state,
        )


def adam_step(params, grads, state: TrainState, lr: float, betas=(0.9, 0.999), eps=1e-8):
    """Bias-corrected Adam update applied in place to the tangent coordinates."""
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    with torch.no_grad():
        for name, p in params.tensors().items():
            g = grads[name]
            m = state.exp_avg[name].mul_(b1).add_(g, alpha=1 - b1)
            v = state.exp_avg_sq[name].mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return params


class EarlyStopper:
    """Tracks the monitored metric; ``update`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.since_best = 0

    def update(self, epoch: int, metric: float) -> bool:
        if metric > self.best:
            self.best, self.best_epoch, self.since_best = metric, epoch, 0
        else:
            self.since_best += 1
        return self.since_best >= self.patience


# --------------------------------------------------------------------------
# loop


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    contrastive: float
    angle: float
    metric: float
    seconds: float

    def line(self) -> str:
        return (
            f"{self.epoch}\t{self.loss:.8f}\t{self.contrastive:.8f}\t"
            f"{self.angle:.8f}\t{self.metric:.6f}\t{self.seconds:.3f}"
        )


LOG_HEADER = "epoch\ttotal_loss\tcontrastive_loss\tangle_loss\tmonitor_recall\twall_seconds"


@dataclass
class TrainResult:
    params: M.ModelParams
    history: list
    state: TrainState
    best_epoch: int


def _epoch_batches(train_pairs, cfg: TrainConfig, rng):
    order = rng.permutation(len(train_pairs))
    for start in range(0, len(order), cfg.batch_size):
        yield train_pairs[order[start:start + cfg.batch_size]]


def make_batch(pairs, user_items, num_items, cfg, rng, hier_pairs, masks) -> Batch:
    users, pos, negs = [], [], []
    for u, i in pairs:
        try:
            negs.append(sample_negatives(user_items[u], num_items, cfg.num_negatives, rng))
        except ValueError:
            logger.warning("user %d interacted with every item; skipping pair", u)
            continue
        users.append(u)
        pos.append(i)
    return Batch(
        torch.tensor(users, dtype=torch.long),
        torch.tensor(pos, dtype=torch.long),
        torch.tensor(np.array(negs, dtype=np.int64).reshape(len(users), cfg.num_negatives)),
        hier_pairs,
        masks,
    )


def train(
    dataset: Dataset,
    mconf: M.ModelConfig,
    tconf: TrainConfig,
    log=None,
    params: M.ModelParams | None = None,
) -> TrainResult:
    """Run the epoch loop; returns the best-epoch parameters and per-epoch history.

    ``log`` is an optional callable receiving each formatted epoch line.
    """
    ig = dataset.interactions
    graph = M.GraphTensors.from_dataset(dataset)
    shapes = M.param_shapes(
        ig.num_users, ig.num_items, dataset.kg.num_entities,
        dataset.kg.num_relations_with_inverse, mconf.dim,
    )
    if params is None:
        params = init_params(shapes, tconf.seed)
    rng = np.random.default_rng(tconf.seed)
    state = TrainState.fresh(params, rng)
    stopper = EarlyStopper(tconf.patience)
    monitor = tconf.monitor
    if monitor == "valid" and not ig.valid:
        logger.warning("no validation split; monitoring the test split")
        monitor = "test"

    train_pairs = np.array(ig.train, dtype=np.int64).reshape(-1, 2)
    hier = graph.hier_pairs
    best = params.clone()
    history: list[EpochRecord] = []

    for epoch in range(1, tconf.max_epochs + 1):
        t0 = time.perf_counter()
        masks = M.subspace_masks(len(hier), epoch, tconf.seed, mconf.dim, mconf.mask_prob)
        sums = np.zeros(3)
        n_batches = 0
        for chunk in _epoch_batches(train_pairs, tconf, rng):
            if tconf.angle_pair_fraction < 1.0 and len(hier):
                n = max(1, int(round(tconf.angle_pair_fraction * len(hier))))
                sel = np.sort(rng.choice(len(hier), size=n, replace=False))
                bh, bm = hier[sel], masks[sel]
            else:
                bh, bm = hier, masks
            batch = make_batch(chunk, ig.user_neighbors, ig.num_items, tconf, rng, bh, bm)
            parts, grads = compute_gradients(params, graph, mconf, batch, tconf.margin)
            if not torch.isfinite(parts.total):
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch}", checkpoint=best.clone()
                )
            adam_step(params, grads, state, tconf.learning_rate, tconf.betas, tconf.adam_eps)
            if not params.all_finite():
                raise TrainingDiverged(
                    f"parameters became non-finite at epoch {epoch}", checkpoint=best.clone()
                )
            sums += [parts.total.item(), parts.contrastive.item(), parts.angle.item()]
            n_batches += 1

        metric = evaluate(params, graph, mconf, ig, tconf.eval_k, monitor).recall
        rec = EpochRecord(epoch, *(sums / max(n_batches, 1)), metric, time.perf_counter() - t0)
        history.append(rec)
        if log is not None:
            log(rec.line())
        stop = stopper.update(epoch, metric)
        if stopper.best_epoch == epoch:
            best = params.clone()
        state.epoch = epoch
        state.best_metric = stopper.best
        state.best_epoch = stopper.best_epoch
        state.epochs_since_best = stopper.since_best
        state.rng_state = rng.bit_generator.state
        if stop:
            logger.info("early stop at epoch %d (best %d)", epoch, stopper.best_epoch)
            break

    return TrainResult(best, history, state, stopper.best_epoch)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: M.ModelParams, state: TrainState | None = None, meta=None):
    arrays = {f"param/{k}": v.detach().numpy() for k, v in params.tensors().items()}
    info = {"version": CHECKPOINT_VERSION, "meta": meta or {}}
    if state is not None:
        for k in M.PARAM_NAMES:
            arrays[f"adam_m/{k}"] = state.exp_avg[k].numpy()
            arrays[f"adam_v/{k}"] = state.exp_avg_sq[k].numpy()
        info["state"] = {
            "epoch": state.epoch,
            "step": state.step,
            "best_metric": state.best_metric,
            "best_epoch": state.best_epoch,
            "epochs_since_best": state.epochs_since_best,
            "rng_state": state.rng_state,
        }
    arrays["info"] = np.array(json.dumps(info))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Return ``(params, state_or_None, meta)``."""
    try:
        with np.load(path, allow_pickle=False) as npz:
            info = json.loads(str(npz["info"]))
            if info.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {info.get('version')}")
            params = M.ModelParams(
                **{k: torch.from_numpy(npz[f"param/{k}"].copy()) for k in M.PARAM_NAMES}
            )
            state = None
            if "state" in info:
                s = info["state"]
                state = TrainState(
                    epoch=s["epoch"],
                    step=s["step"],
                    exp_avg={k: torch.from_numpy(npz[f"adam_m/{k}"].copy()) for k in M.PARAM_NAMES},
                    exp_avg_sq={k: torch.from_numpy(npz[f"adam_v/{k}"].copy()) for k in M.PARAM_NAMES},
                    best_metric=s["best_metric"],
                    best_epoch=s["best_epoch"],
                    epochs_since_best=s["epochs_since_best"],
                    rng_state=s["rng_state"],
                )
    except CheckpointError:
        raise
    except Exception as exc:  # zip, key and json failures all mean a bad file
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return params, state, info.get("meta", {})


def config_dict(mconf: M.ModelConfig, tconf: TrainConfig) -> dict:
    return {"model": asdict(mconf), "train": asdict(tconf)}
