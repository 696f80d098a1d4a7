"""Supervised task losses, source-model training, inference and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import metrics
from .data import DatasetShard
from .diffgrad import AdamState, Tensor, adam_step, backward, no_grad
from .diffgrad import functional as F
from .nets import (ArchDescriptor, ModelBundle, Predictions, encode, forward, head_forward, init_model,
                   rotate_batch, rotation_batch, rotation_head_forward)

log = logging.getLogger(__name__)


def detection_targets(shard: DatasetShard, indices, grid: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-cell class targets (background = C), box targets and object mask.

    Each object is owned by the cell containing its centre.
    """
    c = shard.num_classes
    idx = np.asarray(indices)
    cls = np.full((len(idx), grid * grid), c, dtype=np.int64)
    box = np.zeros((len(idx), grid * grid, 4), dtype=np.float32)
    for row, i in enumerate(idx):
        for k, b in zip(*shard.objects(i)):
            cx, cy = (b[0] + b[2]) / 2, (b[1] + b[3]) / 2
            gx = min(int(cx * grid), grid - 1)
            gy = min(int(cy * grid), grid - 1)
            cell = gy * grid + gx
            cls[row, cell] = k
            box[row, cell] = (cx * grid - gx, cy * grid - gy, b[2] - b[0], b[3] - b[1])
    return cls, box, cls != c


def task_loss(preds: Predictions, shard: DatasetShard, indices, grid: int = 4, box_weight: float = 1.0) -> Tensor:
    """Cross-entropy for classes; detection adds squared-L2 box regression on object cells."""
    idx = np.asarray(indices)
    if preds.task == "classification":
        return F.cross_entropy(preds.logits, shard.labels[idx])
    if preds.task == "segmentation":
        return F.cross_entropy(preds.logits, shard.labels[idx].reshape(-1))
    cls, box, obj = detection_targets(shard, idx, grid)
    loss = F.cross_entropy(preds.logits, cls.reshape(-1))
    if obj.any():
        mask = Tensor(obj[..., None].astype(np.float32), dtype=preds.boxes.dtype)
        err = F.l2_norm_sq((preds.boxes - Tensor(box, dtype=preds.boxes.dtype)) * mask, axis=-1)
        loss = loss + box_weight * F.sum(err) * (1.0 / obj.sum())
    return loss


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


@dataclass
class SourceTrainConfig:
    epochs: int = 15
    batch_size: int = 64
    lr: float = 3e-2
    seed: int = 0
    rotation_head: bool = False
    rotation_weight: float = 1.0
    warmup_epochs: float = 1.0
    final_lr_fraction: float = 1.0


def lr_at(cfg: SourceTrainConfig, step: int, total: int, steps_per_epoch: int) -> float:
    """Linear warmup, then cosine decay to ``final_lr_fraction * lr`` (1.0 keeps the rate constant)."""
    warm = max(1, int(cfg.warmup_epochs * steps_per_epoch))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    frac = (step - warm) / max(1, total - warm)
    floor = cfg.final_lr_fraction
    return cfg.lr * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * frac)))


def train_source(shard: DatasetShard, arch: ArchDescriptor, cfg: SourceTrainConfig,
                 log_every: int = 0) -> tuple[ModelBundle, list[tuple[str, int, float]]]:
    """Train on labelled source data; with ``rotation_head`` the rotation task is trained jointly."""
    model = init_model(arch, cfg.seed, rotation_head=cfg.rotation_head)
    state = AdamState(lr=cfg.lr)
    trace = []
    step = 0
    per_epoch = math.ceil(len(shard) / cfg.batch_size)
    total = cfg.epochs * per_epoch
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 100, epoch])
        for idx in batches(len(shard), cfg.batch_size, rng):
            fmap, emb = encode(model, shard.images[idx])
            loss = task_loss(head_forward(model, fmap), shard, idx, arch.grid)
            if cfg.rotation_head:
                turns = rng.integers(0, 4, size=len(idx))
                _, remb = encode(model, rotate_batch(shard.images[idx], turns))
                loss = loss + cfg.rotation_weight * F.cross_entropy(rotation_head_forward(model, remb), turns)
            backward(loss)
            state.lr = lr_at(cfg, step, total, per_epoch)
            adam_step(model.params, state)
            trace.append(("source", step, float(loss.data)))
            if log_every and step % log_every == 0:
                log.info("source epoch %d step %d loss %.4f", epoch, step, float(loss.data))
            step += 1
    return model, trace


def predict(model: ModelBundle, images: np.ndarray, batch: int = 256) -> tuple[np.ndarray, np.ndarray | None]:
    """Inference-mode class distributions (class axis last) and boxes, if any."""
    probs, boxes = [], []
    with no_grad():
        for i in range(0, len(images), batch):
            out = forward(model, images[i:i + batch])
            probs.append(F.softmax(out.logits).data)
            if out.boxes is not None:
                boxes.append(out.boxes.data)
    return np.concatenate(probs), (np.concatenate(boxes) if boxes else None)


def rotation_accuracy(model: ModelBundle, images: np.ndarray, batch: int = 64) -> float:
    correct = total = 0
    with no_grad():
        for i in range(0, len(images), batch):
            rot, labels = rotation_batch(images[i:i + batch])
            logits = rotation_head_forward(model, encode(model, rot)[1]).data
            correct += int((logits.argmax(-1) == labels).sum())
            total += len(labels)
    return correct / total


def evaluate(model: ModelBundle, shard: DatasetShard) -> dict[str, float]:
    probs, boxes = predict(model, shard.images)
    out = {"entropy": metrics.mean_entropy(probs)}
    if shard.task == "classification":
        out["accuracy"] = metrics.accuracy(probs.argmax(-1), shard.labels)
    elif shard.task == "detection":
        dets = metrics.decode_grid(probs, boxes, model.arch.grid)
        gts = metrics.ground_truth_from_shard(shard)
        out["map_lite"] = metrics.map_lite(dets, gts, shard.num_classes)
        out["d_ece"] = metrics.d_ece(dets, gts)
    else:
        out["miou"] = metrics.miou(probs.argmax(-1), shard.labels, shard.num_classes + 1)
    return out


PRIMARY_METRIC = {"classification": "accuracy", "detection": "map_lite", "segmentation": "miou"}
