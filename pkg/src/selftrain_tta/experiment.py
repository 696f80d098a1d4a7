"""Sweep orchestration behind the CLI: datasets, budgets, method runs, result rows."""

from __future__ import annotations

import logging
import platform
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .adapt import adapt_with
from .config import ABLATIONS, ConfigError, RunConfig
from .data import (DatasetShard, ShapeWorldConfig, ShiftSpec, apply_shift, generate, kcluster_split, load_shard,
                   save_shard, write_histogram_csv)
from .nets import ArchDescriptor, ModelBundle
from .training import SourceTrainConfig, evaluate, rotation_accuracy, train_source

log = logging.getLogger(__name__)


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class Row:
    task: str
    method: str
    flags: str
    n: int
    seed: int
    metric_name: str
    value: float
    step: int


@dataclass
class Target:
    """Target-domain images split into an adaptation pool and a held-out eval set.

    ``pool_ids`` / ``eval_ids`` index the same underlying target shard, which is
    what the disjointness check works on.
    """

    pool: DatasetShard
    eval: DatasetShard
    pool_ids: np.ndarray
    eval_ids: np.ndarray


def split_label(k: int) -> str:
    return f"{k - 1} train - 1 test"


def splits_dir(cfg: RunConfig) -> Path:
    return cfg.out / f"splits_{cfg.task}_k{cfg.k}_s{cfg.cluster_seed}"


def _universe(cfg: RunConfig) -> DatasetShard:
    return generate(ShapeWorldConfig(task=cfg.task, seed=cfg.source_seed), cfg.source_size)


def concat(shards: list[DatasetShard], tag: str) -> DatasetShard:
    first = shards[0]
    boxes = None if first.boxes is None else np.concatenate([s.boxes for s in shards])
    prov = dict(first.provenance, split=tag)
    return DatasetShard(first.task, first.num_classes, np.concatenate([s.images for s in shards]),
                        np.concatenate([s.labels for s in shards]), boxes, prov)


def _cluster_shards(cfg: RunConfig) -> list[DatasetShard]:
    d = splits_dir(cfg)
    paths = [d / f"cluster_{j}.ttad" for j in range(cfg.k)]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise ExperimentError(f"cluster shards missing ({missing[0]} ...); run make-splits first")
    return [load_shard(p) for p in paths]


def source_shard(cfg: RunConfig) -> DatasetShard:
    if cfg.split == "shift":
        return _universe(cfg)
    shards = _cluster_shards(cfg)
    return concat([s for j, s in enumerate(shards) if j != cfg.holdout], f"k{cfg.k}-train")


def target(cfg: RunConfig) -> Target:
    if cfg.split == "shift":
        shard = generate(ShapeWorldConfig(task=cfg.task, seed=cfg.target_seed), cfg.pool_size + cfg.eval_size)
        shard = apply_shift(shard, ShiftSpec(cfg.shift, cfg.severity, cfg.target_seed))
        pool_ids = np.arange(cfg.pool_size)
        eval_ids = np.arange(cfg.pool_size, cfg.pool_size + cfg.eval_size)
    else:
        shard = _cluster_shards(cfg)[cfg.holdout]
        if len(shard) < 2:
            raise ExperimentError(f"held-out cluster has {len(shard)} images; too few to split")
        order = np.random.default_rng([cfg.cluster_seed, 7]).permutation(len(shard))
        n_eval = min(cfg.eval_size, len(shard) // 2)
        eval_ids, pool_ids = np.sort(order[:n_eval]), np.sort(order[n_eval:])
    return Target(shard.subset(pool_ids, "pool"), shard.subset(eval_ids, "eval"), pool_ids, eval_ids)


def sample_budget(t: Target, n: int, seed: int) -> tuple[DatasetShard, np.ndarray]:
    """Seeded draw of ``n`` pool images; returns the budget and its target-shard ids."""
    if n > len(t.pool):
        raise ExperimentError(f"budget n={n} exceeds the adaptation pool of {len(t.pool)} images")
    local = np.sort(np.random.default_rng([seed, 9]).choice(len(t.pool), n, replace=False))
    ids = t.pool_ids[local]
    if np.intersect1d(ids, t.eval_ids).size:
        raise ExperimentError("budget overlaps the evaluation split")
    return t.pool.subset(local, f"budget-n{n}-s{seed}"), ids


# ---------------------------------------------------------------- commands

def train_source_model(cfg: RunConfig, log_every: int = 0) -> tuple[ModelBundle, dict]:
    shard = source_shard(cfg)
    arch = ArchDescriptor(task=cfg.task)
    arch.validate()
    tcfg = SourceTrainConfig(epochs=cfg.source_epochs, lr=cfg.source_lr, seed=cfg.source_seed,
                             rotation_head=cfg.needs_rotation_head)
    model, trace = train_source(shard, arch, tcfg, log_every=log_every)
    summary = {f"train_{k}": v for k, v in evaluate(model, shard.subset(np.arange(min(len(shard), 1024)))).items()}
    if cfg.needs_rotation_head:
        summary["train_rotation_accuracy"] = rotation_accuracy(model, shard.images[:256])
    prov = {"package_version": __version__, "split": cfg.split, "source_size": len(shard),
            "source_seed": cfg.source_seed, "epochs": cfg.source_epochs, "lr": cfg.source_lr,
            "final_loss": trace[-1][2] if trace else None, **summary}
    return model, prov


def make_splits(cfg: RunConfig, encoder: ModelBundle) -> Path:
    """Write one shard per k-means cluster plus the class-histogram CSV."""
    shard = _universe(cfg)
    split = kcluster_split(shard, encoder, cfg.k, cfg.holdout, cfg.cluster_seed)
    d = splits_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    for j in range(cfg.k):
        ids = np.flatnonzero(split.assign == j)
        save_shard(shard.subset(ids, f"k{cfg.k}-cluster{j}"), d / f"cluster_{j}.ttad")
    write_histogram_csv(d / "histogram.csv", split.histogram, cfg.holdout)
    if not split.all_classes_everywhere:
        log.warning("some clusters miss at least one class (see histogram.csv)")
    return d


def variants(cfg: RunConfig) -> list[tuple[str, dict]]:
    out = [(m, {}) for m in cfg.methods]
    out += [("test", ABLATIONS[a]) for a in cfg.ablations]
    return out


def run_sweep(cfg: RunConfig, source: ModelBundle) -> tuple[list[Row], list[Row]]:
    """All (method variant, budget, seed) runs; returns metric rows and loss-trace rows."""
    if source.arch.task != cfg.task:
        raise ConfigError(f"checkpoint is a {source.arch.task} model but the config task is {cfg.task}")
    if cfg.needs_rotation_head and not source.has_rotation_head:
        raise ConfigError("ttt requested but the checkpoint has no rotation head; retrain the source")
    t = target(cfg)
    rows: list[Row] = []
    losses: list[Row] = []
    source_eval = None
    for method, overrides in variants(cfg):
        for n in cfg.budgets:
            for seed in cfg.seeds:
                budget, _ = sample_budget(t, n, seed)
                acfg = cfg.adaptation_config(n, seed, **overrides)
                model, report = adapt_with(method, source, budget, acfg)
                if method == "source_only":
                    if source_eval is None:
                        source_eval = evaluate(source, t.eval)
                    metrics = dict(source_eval)
                else:
                    metrics = evaluate(model, t.eval)
                metrics.update(report.metrics)
                report.metrics = metrics
                report.validate()
                steps = len(report.losses)
                for name in sorted(metrics):
                    rows.append(Row(cfg.task, method, report.flags, n, seed, name, float(metrics[name]), steps))
                for stage, step, value in report.losses:
                    losses.append(Row(cfg.task, method, report.flags, n, seed, f"loss_{stage}", value, step))
                log.info("%s[%s] n=%d seed=%d %s", method, report.flags, n, seed,
                         {k: round(v, 4) for k, v in metrics.items()})
    return rows, losses


def manifest(cfg: RunConfig, source_provenance: dict) -> dict:
    return {"package_version": __version__, "numpy": np.__version__, "python": platform.python_version(),
            "config": cfg.to_dict(), "checkpoint": str(cfg.checkpoint_path), "source": source_provenance,
            "cluster_features": "source encoder" if cfg.split == "kcluster" else None}


def load_source(cfg: RunConfig) -> tuple[ModelBundle, dict]:
    return checkpoint.load(cfg.checkpoint_path)


def full_source_config(cfg: RunConfig) -> RunConfig:
    """The same run config pointed at the full-dataset source checkpoint (cluster feature encoder)."""
    return replace(cfg, split="shift")
