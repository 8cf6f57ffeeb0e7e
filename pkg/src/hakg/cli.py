"""Command-line entry point: ``hakg {stats,train,evaluate,export}``."""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import torch

from . import geometry as geo
from . import model as M
from . import training as T
from .data import HIER_MODES, DataError, load_dataset
from .evaluation import EvaluationError, evaluate

logger = logging.getLogger("hakg")

CONFIG_SECTION = "hakg"
RESOLVED_CONFIG = "config.resolved.json"
CHECKPOINT = "checkpoint.npz"
TRAIN_LOG = "train_log.tsv"
TRAIN_REPORT = "eval_report.txt"
EVAL_REPORT = "evaluate_report.txt"
EMBEDDINGS = "embeddings.txt"
NORM_CSV = "norm_vs_popularity.csv"
DEGREE_CSV = "degree_distribution.csv"


class RunConfigError(ValueError):
    pass


class IncompatibleCheckpoint(RuntimeError):
    pass


@dataclass
class RunConfig:
    data_dir: str = "."
    out_dir: str = "out"
    checkpoint: str = ""
    preset: str = ""
    # dataset
    hier_mode: str = "item_connected"
    krackhardt_threshold: float = 0.9
    core: int = 10
    hops: int = 2
    split_seed: int = 0
    # model
    dim: int = 64
    layers: int = 1
    mask_prob: float = 0.5
    cone_K: float = geo.CONE_K
    angle_weight: float = 1e-4
    kg_log_base: str = "center"
    # training
    learning_rate: float = 1e-3
    batch_size: int = 4096
    num_negatives: int = 200
    margin: float = 0.6
    max_epochs: int = 400
    patience: int = 10
    monitor: str = "valid"
    angle_pair_fraction: float = 1.0
    seed: int = 2022
    # evaluation / runtime
    k: int = 20
    threads: int = 1

    def model_config(self) -> M.ModelConfig:
        return M.ModelConfig(
            dim=self.dim,
            layers=self.layers,
            mask_prob=self.mask_prob,
            cone_K=self.cone_K,
            angle_weight=self.angle_weight,
            seed=self.seed,
            kg_log_base=self.kg_log_base,
        )

    def train_config(self) -> T.TrainConfig:
        return T.TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            num_negatives=self.num_negatives,
            margin=self.margin,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=self.seed,
            eval_k=self.k,
            monitor=self.monitor,
            angle_pair_fraction=self.angle_pair_fraction,
        )

    def validate(self) -> None:
        if self.hier_mode not in HIER_MODES:
            raise RunConfigError(f"hier_mode must be one of {HIER_MODES}")
        if self.preset and self.preset not in T.PRESETS:
            raise RunConfigError(f"unknown preset {self.preset!r}; known: {sorted(T.PRESETS)}")
        if self.k < 1:
            raise RunConfigError("k must be >= 1")
        if self.threads < 1:
            raise RunConfigError("threads must be >= 1")
        if self.core < 1 or self.hops < 1:
            raise RunConfigError("core and hops must be >= 1")
        try:
            self.model_config()
            self.train_config()
        except (M.ConfigError, geo.ContractViolation) as exc:
            raise RunConfigError(str(exc)) from exc

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out_dir) / CHECKPOINT


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise RunConfigError(f"{key}: cannot parse {value!r} as {kind}") from None
    return str(value)


def read_config_file(path) -> dict:
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise RunConfigError(f"cannot read config {path}: {exc}") from exc
    extra = [s for s in parser.sections() if s != CONFIG_SECTION]
    if extra:
        raise RunConfigError(f"unknown config sections: {extra}")
    if not parser.has_section(CONFIG_SECTION):
        return {}
    values = {}
    for key, value in parser.items(CONFIG_SECTION):
        if key not in _FIELD_TYPES:
            raise RunConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, value)
    return values


# flag -> RunConfig field
FLAG_FIELDS = {
    "data_dir": "data_dir",
    "out_dir": "out_dir",
    "checkpoint": "checkpoint",
    "seed": "seed",
    "lr": "learning_rate",
    "layers": "layers",
    "dim": "dim",
    "lam": "angle_weight",
    "margin": "margin",
    "negatives": "num_negatives",
    "k": "k",
    "epochs": "max_epochs",
    "patience": "patience",
    "hier_mode": "hier_mode",
    "threads": "threads",
    "preset": "preset",
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = read_config_file(args.config) if args.config else {}
    preset = values.get("preset") or getattr(args, "preset", None)
    if preset:
        if preset not in T.PRESETS:
            raise RunConfigError(f"unknown preset {preset!r}; known: {sorted(T.PRESETS)}")
        # preset values sit between defaults and explicit settings
        values = {**T.PRESETS[preset], **values}
    for flag, key in FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[key] = value
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file with a [hakg] section")
    common.add_argument("--data-dir", dest="data_dir")
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--seed", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--layers", type=int)
    common.add_argument("--dim", type=int)
    common.add_argument("--lambda", dest="lam", type=float, help="angle-loss weight")
    common.add_argument("--margin", type=float)
    common.add_argument("--negatives", type=int)
    common.add_argument("--k", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--patience", type=int)
    common.add_argument("--hier-mode", dest="hier_mode", choices=HIER_MODES)
    common.add_argument("--threads", type=int)
    common.add_argument("--preset", choices=sorted(T.PRESETS))
    common.add_argument("--checkpoint", help="checkpoint path (default: OUT_DIR/checkpoint.npz)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hakg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("stats", parents=[common], help="dataset statistics and degree distribution")
    sub.add_parser("train", parents=[common], help="train and write checkpoint, log and report")
    sub.add_parser("evaluate", parents=[common], help="all-ranking evaluation of a checkpoint")
    sub.add_parser("export", parents=[common], help="embedding dump and norm-vs-popularity CSV")
    return parser


# --------------------------------------------------------------------------
# helpers


def _dataset(cfg: RunConfig):
    data_dir = Path(cfg.data_dir)
    if not data_dir.is_dir():
        raise DataError(f"data directory not found: {data_dir}")
    return load_dataset(
        data_dir,
        hier_mode=cfg.hier_mode,
        core=cfg.core,
        hops=cfg.hops,
        split_seed=cfg.split_seed,
        krackhardt_threshold=cfg.krackhardt_threshold,
    )


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_resolved(cfg: RunConfig, out: Path) -> None:
    with open(out / RESOLVED_CONFIG, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(asdict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _dataset_meta(ds) -> dict:
    ig, kg = ds.interactions, ds.kg
    return {
        "num_users": ig.num_users,
        "num_items": ig.num_items,
        "num_entities": kg.num_entities,
        "num_relations_with_inverse": kg.num_relations_with_inverse,
    }


def _load_compatible(cfg: RunConfig, ds):
    params, _, meta = T.load_checkpoint(cfg.checkpoint_path)
    expected = M.param_shapes(
        ds.interactions.num_users,
        ds.interactions.num_items,
        ds.kg.num_entities,
        ds.kg.num_relations_with_inverse,
        params.gate_W1.shape[0],
    )
    if params.shapes() != {k: tuple(v) for k, v in expected.items()}:
        raise IncompatibleCheckpoint(
            f"checkpoint {cfg.checkpoint_path} does not match the dataset: "
            f"{params.shapes()} vs {expected}"
        )
    saved = meta.get("model")
    mconf = M.ModelConfig(**saved) if saved else cfg.model_config()
    return params, mconf


def _report_split(ds) -> str:
    return "test" if ds.interactions.test else "valid"


# --------------------------------------------------------------------------
# commands


def cmd_stats(cfg: RunConfig) -> int:
    ds = _dataset(cfg)
    stats = ds.stats()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for line in stats.lines():
        print(line)
    _write_csv(out / DEGREE_CSV, ["degree", "count"], stats.degree_distribution())
    _write_resolved(cfg, out)
    return 0


def cmd_train(cfg: RunConfig) -> int:
    ds = _dataset(cfg)
    mconf, tconf = cfg.model_config(), cfg.train_config()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / TRAIN_LOG, cfg.checkpoint_path, out / TRAIN_REPORT, out / RESOLVED_CONFIG]
    try:
        _write_resolved(cfg, out)
        with open(out / TRAIN_LOG, "w", encoding="utf-8", newline="\n") as log:
            log.write(T.LOG_HEADER + "\n")

            def emit(line):
                log.write(line + "\n")
                log.flush()
                logger.info(line)

            result = T.train(ds, mconf, tconf, log=emit)
            graph = M.GraphTensors.from_dataset(ds)
            report = evaluate(result.params, graph, mconf, ds.interactions, cfg.k, _report_split(ds))
            for rec in report.records():
                log.write("# " + rec + "\n")
        meta = {"model": asdict(mconf), "train": asdict(tconf), "dataset": _dataset_meta(ds)}
        T.save_checkpoint(cfg.checkpoint_path, result.params, result.state, meta)
        (out / TRAIN_REPORT).write_text("\n".join(report.records()) + "\n", encoding="utf-8")
    except BaseException:
        for path in written:
            path.unlink(missing_ok=True)
        raise
    for rec in report.records():
        print(rec)
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    ds = _dataset(cfg)
    params, mconf = _load_compatible(cfg, ds)
    graph = M.GraphTensors.from_dataset(ds)
    report = evaluate(params, graph, mconf, ds.interactions, cfg.k, _report_split(ds))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / EVAL_REPORT).write_text("\n".join(report.records()) + "\n", encoding="utf-8")
    _write_resolved(cfg, out)
    for rec in report.records():
        print(rec)
    return 0


def cmd_export(cfg: RunConfig) -> int:
    ds = _dataset(cfg)
    params, mconf = _load_compatible(cfg, ds)
    graph = M.GraphTensors.from_dataset(ds)
    with torch.no_grad():
        reps = M.forward(params, graph, mconf)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    M.write_embeddings(out / EMBEDDINGS, reps, graph.num_items)
    ig = ds.interactions
    rows = []
    for kind, table, degree in (
        ("user", reps.user, ig.user_degree()),
        ("item", reps.collab, ig.popularity()),
    ):
        dist = geo.dist_to_origin(table).numpy()
        rows += [(kind, n, int(degree[n]), repr(float(dist[n]))) for n in range(len(dist))]
    _write_csv(out / NORM_CSV, ["kind", "id", "popularity", "dist_to_origin"], rows)
    _write_resolved(cfg, out)
    print(f"wrote {out / EMBEDDINGS} and {out / NORM_CSV} ({len(rows)} rows)")
    return 0


COMMANDS = {"stats": cmd_stats, "train": cmd_train, "evaluate": cmd_evaluate, "export": cmd_export}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
    except RunConfigError as exc:
        print(f"hakg: configuration error: {exc}", file=sys.stderr)
        return 2
    torch.set_num_threads(cfg.threads)
    try:
        return COMMANDS[args.command](cfg)
    except (DataError, OSError, T.CheckpointError, IncompatibleCheckpoint, EvaluationError, T.TrainingError) as exc:
        print(f"hakg {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
