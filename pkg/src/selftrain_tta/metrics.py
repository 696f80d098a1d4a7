"""Task metrics, detection calibration (D-ECE) and entropy summaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNDEFINED = float("nan")


@dataclass
class Detections:
    """Decoded detections for one image; boxes are normalised (x0, y0, x1, y1)."""

    classes: np.ndarray
    scores: np.ndarray
    boxes: np.ndarray

    def __len__(self) -> int:
        return len(self.classes)


@dataclass
class GroundTruth:
    classes: np.ndarray
    boxes: np.ndarray


@dataclass
class MetricReport:
    method: str
    task: str
    n: int
    seed: int
    flags: str = ""
    metrics: dict[str, float] = field(default_factory=dict)
    losses: list[tuple[str, int, float]] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def validate(self) -> None:
        for name in ("accuracy", "map_lite", "miou"):
            v = self.metrics.get(name)
            if v is not None and not np.isnan(v) and not 0 <= v <= 1:
                raise ValueError(f"{name}={v} outside [0, 1]")
        v = self.metrics.get("d_ece")
        if v is not None and not np.isnan(v) and not 0 <= v <= 100:
            raise ValueError(f"d_ece={v} outside [0, 100]")


def accuracy(pred_labels, labels) -> float:
    pred_labels = np.asarray(pred_labels)
    labels = np.asarray(labels)
    if pred_labels.shape != labels.shape:
        raise ValueError(f"length mismatch: {pred_labels.shape} vs {labels.shape}")
    return float(np.mean(pred_labels == labels))


def mean_entropy(probs, axis: int = -1) -> float:
    """Mean Shannon entropy in nats over all prediction units."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(terms.sum(axis=axis).mean())


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) boxes in (x0, y0, x1, y1)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def decode_grid(probs: np.ndarray, boxes: np.ndarray, grid: int) -> list[Detections]:
    """One detection per cell whose argmax is not background (class index C).

    ``probs``: (B, S*S, C+1) class distributions; ``boxes``: (B, S*S, 4) cell
    offsets (cx, cy) and image-relative (w, h), all in [0, 1].
    """
    background = probs.shape[-1] - 1
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    out = []
    for p, b in zip(probs, boxes):
        cls = p.argmax(axis=-1)
        keep = cls != background
        cx = (cols + b[:, 0]) / grid
        cy = (rows + b[:, 1]) / grid
        xyxy = np.stack([cx - b[:, 2] / 2, cy - b[:, 3] / 2, cx + b[:, 2] / 2, cy + b[:, 3] / 2], axis=-1)
        out.append(Detections(cls[keep], p[keep, cls[keep]] if keep.any() else np.zeros(0),
                              np.clip(xyxy[keep], 0, 1)))
    return out


def match_detections(dets: list[Detections], gts: list[GroundTruth], iou_thr: float = 0.5,
                     class_id: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Greedy matching in descending confidence; each ground truth is used once.

    Returns (scores, is_true_positive) over all considered detections, sorted by
    confidence. With ``class_id`` only that class is considered.
    """
    entries = []
    for img, d in enumerate(dets):
        for j in range(len(d)):
            if class_id is None or d.classes[j] == class_id:
                entries.append((-float(d.scores[j]), img, j))
    entries.sort()
    used = [np.zeros(len(g.classes), dtype=bool) for g in gts]
    scores = np.empty(len(entries))
    tp = np.zeros(len(entries), dtype=bool)
    for k, (neg, img, j) in enumerate(entries):
        scores[k] = -neg
        d, g = dets[img], gts[img]
        same = g.classes == d.classes[j]
        if not same.any():
            continue
        ious = box_iou(d.boxes[j:j + 1], g.boxes)[0]
        ious = np.where(same, ious, -1.0)
        best = int(np.argmax(ious))
        if ious[best] >= iou_thr and not used[img][best]:
            used[img][best] = True
            tp[k] = True
    return scores, tp


def eleven_point_ap(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return UNDEFINED
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    total = 0.0
    for level in range(11):
        # recall >= level / 10, compared in integers to avoid 0.30000000000000004-style misses
        above = precision[10 * ctp >= level * n_gt]
        total += above.max() if above.size else 0.0
    return float(total / 11)


def map_lite(dets: list[Detections], gts: list[GroundTruth], num_classes: int, iou_thr: float = 0.5) -> float:
    """Class-averaged 11-point AP at one IoU threshold; NaN when there is no ground truth."""
    aps = []
    for c in range(num_classes):
        n_gt = int(sum(np.sum(g.classes == c) for g in gts))
        if n_gt == 0:
            continue
        _, tp = match_detections(dets, gts, iou_thr, class_id=c)
        aps.append(eleven_point_ap(tp, n_gt))
    return float(np.mean(aps)) if aps else UNDEFINED


def d_ece(dets: list[Detections], gts: list[GroundTruth], bins: int = 10, iou_thr: float = 0.5) -> float:
    """Detection expected calibration error in percentage points; NaN with no detections."""
    scores, tp = match_detections(dets, gts, iou_thr)
    if len(scores) == 0:
        return UNDEFINED
    idx = np.minimum((scores * bins).astype(int), bins - 1)
    total = 0.0
    for b in range(bins):
        sel = idx == b
        if sel.any():
            total += sel.sum() / len(scores) * abs(tp[sel].mean() - scores[sel].mean())
    return float(total * 100)


def miou(pred_maps, label_maps, num_classes: int) -> float:
    """Dataset-level IoU per class (accumulated counts), averaged over classes present in either map."""
    pred = np.asarray(pred_maps).ravel()
    lab = np.asarray(label_maps).ravel()
    if pred.shape != lab.shape:
        raise ValueError("prediction and label maps differ in size")
    conf = np.bincount(lab * num_classes + pred, minlength=num_classes * num_classes).reshape(num_classes,
                                                                                            num_classes)
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - inter
    valid = union > 0
    return float(np.mean(inter[valid] / union[valid])) if valid.any() else UNDEFINED


def ground_truth_from_shard(shard) -> list[GroundTruth]:
    return [GroundTruth(*shard.objects(i)) for i in range(len(shard))]
