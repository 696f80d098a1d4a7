"""ShapeWorld: procedural images with controllable covariate shift.

Also holds the k-means cluster split used to carve out-of-distribution
targets, and the binary shard format.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SHAPES = ("circle", "square", "triangle", "plus", "ring")
SHIFTS = ("identity", "fog", "noise", "hue", "contrast", "style_swap")
TASK_TAGS = {"classification": 0, "detection": 1, "segmentation": 2}

SHARD_MAGIC = b"TTAD"
SHARD_VERSION = 1
_SUPERSAMPLE = 4


class ShardFormatError(ValueError):
    pass


class ClusterError(RuntimeError):
    pass


@dataclass(frozen=True)
class ShapeWorldConfig:
    task: str = "classification"
    image_size: int = 32
    num_classes: int = 5
    objects: tuple[int, int] = (1, 3)
    seed: int = 0

    def validate(self) -> None:
        if self.task not in TASK_TAGS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.image_size < 32:
            raise ValueError("image size must be >= 32")
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be in [2, {len(SHAPES)}]")
        lo, hi = self.objects
        if not 1 <= lo <= hi:
            raise ValueError("objects range must satisfy 1 <= lo <= hi")

    def to_dict(self) -> dict:
        return {"task": self.task, "image_size": self.image_size, "num_classes": self.num_classes,
                "objects": list(self.objects), "seed": self.seed}


@dataclass(frozen=True)
class ShiftSpec:
    name: str = "identity"
    severity: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.name not in SHIFTS:
            raise ValueError(f"unknown shift {self.name!r}; choose from {SHIFTS}")
        if not 0 <= self.severity <= 1:
            raise ValueError("severity must be in [0, 1]")


@dataclass
class DatasetShard:
    """Images in [0, 1] as float32 (N, 3, H, W) plus task labels.

    classification: labels (N,) class ids
    detection:      labels (N, K) class ids padded with -1, boxes (N, K, 4) as
                    normalised (x0, y0, x1, y1)
    segmentation:   labels (N, H, W) with 0 = background, class c stored as c + 1
    """

    task: str
    num_classes: int
    images: np.ndarray
    labels: np.ndarray
    boxes: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices, tag: str | None = None) -> "DatasetShard":
        idx = np.asarray(indices, dtype=np.int64)
        prov = dict(self.provenance)
        if tag is not None:
            prov["split"] = tag
        return DatasetShard(self.task, self.num_classes, self.images[idx], self.labels[idx],
                            None if self.boxes is None else self.boxes[idx], prov)

    def objects(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Ground-truth (classes, boxes) of detection image ``i`` without padding."""
        keep = self.labels[i] >= 0
        return self.labels[i][keep], self.boxes[i][keep]


# ---------------------------------------------------------------- rendering

def _shape_mask(kind: str, box: np.ndarray, size: int) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] for a shape inscribed in pixel box (x0, y0, x1, y1)."""
    n = size * _SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / _SUPERSAMPLE
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    x0, y0, x1, y1 = box
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    hw, hh = (x1 - x0) / 2, (y1 - y0) / 2
    u = (xx - cx) / hw
    v = (yy - cy) / hh
    if kind == "circle":
        inside = u * u + v * v <= 1
    elif kind == "ring":
        r2 = u * u + v * v
        inside = (r2 <= 1) & (r2 >= 0.3)
    elif kind == "square":
        inside = (np.abs(u) <= 1) & (np.abs(v) <= 1)
    elif kind == "plus":
        inside = ((np.abs(u) <= 1) & (np.abs(v) <= 0.36)) | ((np.abs(v) <= 1) & (np.abs(u) <= 0.36))
    elif kind == "triangle":
        # flat-topped so the tip still covers the top row of its box
        top = 0.2
        half_width = top + (1 - top) * (v + 1) / 2
        inside = (np.abs(v) <= 1) & (np.abs(u) <= half_width)
    else:
        raise ValueError(f"unknown shape {kind!r}")
    cov = inside.reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE).mean(axis=(1, 3))
    return cov


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.2, 0.8, size=3)
    # lit from above: always brighter at the top, so scenes have an upright orientation
    light = rng.uniform(0.08, 0.2)
    tilt = rng.uniform(-0.08, 0.08, size=3)
    t = np.linspace(-1, 1, size)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    img = base[:, None, None] - light * yy + tilt[:, None, None] * xx
    img = img + rng.normal(0, 0.03, size=(3, size, size))
    return img


def _object_color(rng: np.random.Generator, background: np.ndarray) -> np.ndarray:
    bg = background.mean(axis=(1, 2))
    for _ in range(50):
        c = rng.uniform(0, 1, size=3)
        if np.abs(c - bg).sum() > 0.6:
            return c
    return 1 - bg


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _place(rng: np.random.Generator, size: int, lo: float, hi: float, placed: list) -> np.ndarray | None:
    for _ in range(100):
        w = int(rng.integers(int(lo * size), int(hi * size) + 1))
        h = int(np.clip(round(w * rng.uniform(0.85, 1.15)), lo * size, hi * size))
        x0 = int(rng.integers(1, size - w))
        y0 = int(rng.integers(1, size - h))
        box = np.array([x0, y0, x0 + w, y0 + h], dtype=np.float64)
        # keep a one-pixel gap so masks never touch
        grown = box + np.array([-1, -1, 1, 1])
        if all(_iou(grown, b) == 0 for b in placed):
            return box
    return None


def render(config: ShapeWorldConfig, index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Render image ``index``: (image, classes, pixel boxes, segmentation map)."""
    rng = np.random.default_rng([config.seed, index])
    size = config.image_size
    img = _background(rng, size)
    seg = np.zeros((size, size), dtype=np.int32)
    if config.task == "classification":
        count, lo, hi = 1, 0.4, 0.75
    else:
        count = int(rng.integers(config.objects[0], config.objects[1] + 1))
        lo, hi = 0.3, 0.45
    classes, boxes = [], []
    for _ in range(count):
        box = _place(rng, size, lo, hi, boxes)
        if box is None:
            break
        cls = int(rng.integers(config.num_classes))
        cov = _shape_mask(SHAPES[cls], box, size)
        color = _object_color(rng, img)
        shade = 1 + rng.normal(0, 0.04, size=(1, size, size))
        img = img * (1 - cov) + (color[:, None, None] * shade) * cov
        seg[cov >= 0.5] = cls + 1
        classes.append(cls)
        boxes.append(box)
    img = np.clip(img, 0, 1).astype(np.float32)
    return img, np.array(classes, dtype=np.int64), np.array(boxes, dtype=np.float64).reshape(-1, 4), seg


def generate(config: ShapeWorldConfig, count: int, start: int = 0) -> DatasetShard:
    """Deterministic shard; image ``i`` depends only on (config.seed, start + i)."""
    config.validate()
    if count <= 0:
        raise ValueError("count must be positive")
    size = config.image_size
    images = np.empty((count, 3, size, size), dtype=np.float32)
    kmax = config.objects[1]
    if config.task == "classification":
        labels = np.empty(count, dtype=np.int64)
    elif config.task == "detection":
        labels = np.full((count, kmax), -1, dtype=np.int64)
        boxes = np.zeros((count, kmax, 4), dtype=np.float32)
    else:
        labels = np.empty((count, size, size), dtype=np.int64)
    for i in range(count):
        img, classes, bxs, seg = render(config, start + i)
        images[i] = img
        if config.task == "classification":
            labels[i] = classes[0]
        elif config.task == "detection":
            labels[i, :len(classes)] = classes
            boxes[i, :len(classes)] = bxs / size
        else:
            labels[i] = seg
    return DatasetShard(config.task, config.num_classes, images, labels,
                        boxes if config.task == "detection" else None,
                        {"config": config.to_dict(), "start": start, "count": count, "shift": None})


# ---------------------------------------------------------------- shifts

def _fog(images: np.ndarray, s: float) -> np.ndarray:
    h = images.shape[2]
    # denser towards the top of the frame, like distant scenery
    depth = np.linspace(1.0, 0.6, h)[None, None, :, None]
    alpha = np.clip(s * depth, 0, 1)
    return images * (1 - alpha) + 0.8 * alpha


def _hue(images: np.ndarray, s: float) -> np.ndarray:
    from .augment import _hue_matrix
    return np.einsum("ij,njhw->nihw", _hue_matrix(np.pi * s), images)


def _style_swap(images: np.ndarray, s: float) -> np.ndarray:
    h, w = images.shape[2:]
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (xx + yy) / 4.0)
    swapped = images[:, [2, 0, 1]]
    textured = swapped * (0.75 + 0.25 * stripes)
    return (1 - s) * images + s * textured


def apply_shift(shard: DatasetShard, spec: ShiftSpec) -> DatasetShard:
    """Pixel-space transform; labels are passed through untouched."""
    s = spec.severity
    if s == 0 or spec.name == "identity":
        images = shard.images.copy()
    else:
        x = shard.images.astype(np.float64)
        if spec.name == "fog":
            x = _fog(x, s)
        elif spec.name == "noise":
            start = shard.provenance.get("start", 0)
            noise = np.stack([np.random.default_rng([spec.seed, 7, start + i]).standard_normal(x.shape[1:])
                              for i in range(len(x))])
            x = x + 0.25 * s * noise
        elif spec.name == "hue":
            x = _hue(x, s)
        elif spec.name == "contrast":
            mean = x.mean(axis=(1, 2, 3), keepdims=True)
            x = mean + (1 - 0.8 * s) * (x - mean)
        elif spec.name == "style_swap":
            x = _style_swap(x, s)
        images = np.clip(x, 0, 1).astype(np.float32)
    prov = dict(shard.provenance)
    prov["shift"] = {"name": spec.name, "severity": spec.severity, "seed": spec.seed}
    return replace(shard, images=images, labels=shard.labels.copy(),
                   boxes=None if shard.boxes is None else shard.boxes.copy(), provenance=prov)


# ---------------------------------------------------------------- k-means split

def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        probs = d2 / total if total > 0 else np.full(len(x), 1 / len(x))
        centers.append(x[rng.choice(len(x), p=probs)])
    return np.array(centers)


def kmeans(x: np.ndarray, k: int, seed: int, max_iter: int = 100, tol: float = 1e-4,
           retries: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding. Returns (assignments, centroids).

    An empty cluster triggers a fresh seeding, at most ``retries`` times.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) < k:
        raise ClusterError(f"cannot form {k} clusters from {len(x)} points")
    for attempt in range(retries + 1):
        rng = np.random.default_rng([seed, attempt])
        centers = _kmeans_pp(x, k, rng)
        empty = False
        for _ in range(max_iter):
            assign = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
            counts = np.bincount(assign, minlength=k)
            if np.any(counts == 0):
                empty = True
                break
            new = np.stack([x[assign == j].mean(axis=0) for j in range(k)])
            shift = np.sqrt(((new - centers) ** 2).sum(-1)).max()
            centers = new
            if shift < tol:
                break
        if not empty:
            assign = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
            if np.all(np.bincount(assign, minlength=k) > 0):
                return assign, centers
    raise ClusterError(f"k-means produced an empty cluster after {retries} re-seeds")


def class_histogram(shard: DatasetShard, assign: np.ndarray, k: int) -> np.ndarray:
    """(k, C) counts of objects of each class per cluster."""
    hist = np.zeros((k, shard.num_classes), dtype=np.int64)
    for i, c in enumerate(assign):
        if shard.task == "classification":
            hist[c, shard.labels[i]] += 1
        elif shard.task == "detection":
            for cls in shard.labels[i][shard.labels[i] >= 0]:
                hist[c, cls] += 1
        else:
            present = np.unique(shard.labels[i])
            for cls in present[present > 0] - 1:
                hist[c, cls] += 1
    return hist


@dataclass
class ClusterSplit:
    train: DatasetShard
    ood: DatasetShard
    assign: np.ndarray
    histogram: np.ndarray
    holdout: int

    @property
    def all_classes_everywhere(self) -> bool:
        return bool(np.all(self.histogram > 0))


def embed_images(encoder, images: np.ndarray, batch: int = 256) -> np.ndarray:
    from .diffgrad import no_grad
    from .nets import encode
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            out.append(encode(encoder, images[i:i + batch])[1].data)
    return np.concatenate(out).astype(np.float64)


def kcluster_split(shard: DatasetShard, encoder, k: int, holdout: int, seed: int,
                   embeddings: np.ndarray | None = None) -> ClusterSplit:
    """Cluster pooled embeddings with k-means and hold out one cluster as the OOD target."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if not 0 <= holdout < k:
        raise ValueError(f"holdout must be in [0, {k})")
    emb = embed_images(encoder, shard.images) if embeddings is None else np.asarray(embeddings)
    assign, _ = kmeans(emb, k, seed)
    hist = class_histogram(shard, assign, k)
    ood_idx = np.flatnonzero(assign == holdout)
    train_idx = np.flatnonzero(assign != holdout)
    return ClusterSplit(shard.subset(train_idx, f"k{k}-train"), shard.subset(ood_idx, f"k{k}-ood{holdout}"),
                        assign, hist, holdout)


def write_histogram_csv(path: Path, hist: np.ndarray, holdout: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "role"] + [f"class_{c}" for c in range(hist.shape[1])])
        for j, row in enumerate(hist):
            w.writerow([j, "ood" if j == holdout else "train"] + [int(v) for v in row])


# ---------------------------------------------------------------- shard files

def save_shard(shard: DatasetShard, path) -> None:
    """Layout: magic, u32 version, u32 task tag, u32 N/H/W/C/K, u32 json length,
    provenance JSON, float32 images, then int32 labels and (detection) float32 boxes.
    All little-endian."""
    n, _, h, w = shard.images.shape
    kmax = shard.labels.shape[1] if shard.task == "detection" else 0
    prov = json.dumps(shard.provenance, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(SHARD_MAGIC)
        fh.write(struct.pack("<7I", SHARD_VERSION, TASK_TAGS[shard.task], n, h, w, shard.num_classes, kmax))
        fh.write(struct.pack("<I", len(prov)))
        fh.write(prov)
        fh.write(shard.images.astype("<f4").tobytes())
        fh.write(shard.labels.astype("<i4").tobytes())
        if shard.task == "detection":
            fh.write(shard.boxes.astype("<f4").tobytes())


def load_shard(path) -> DatasetShard:
    blob = Path(path).read_bytes()
    if blob[:4] != SHARD_MAGIC:
        raise ShardFormatError(f"{path}: bad magic {blob[:4]!r}, expected {SHARD_MAGIC!r}")
    head = 4 + 7 * 4 + 4
    if len(blob) < head:
        raise ShardFormatError(f"{path}: truncated header")
    version, tag, n, h, w, c, kmax = struct.unpack_from("<7I", blob, 4)
    if version != SHARD_VERSION:
        raise ShardFormatError(f"{path}: unsupported shard version {version} (expected {SHARD_VERSION})")
    tasks = {v: k for k, v in TASK_TAGS.items()}
    if tag not in tasks:
        raise ShardFormatError(f"{path}: unknown task tag {tag}")
    task = tasks[tag]
    (plen,) = struct.unpack_from("<I", blob, 32)
    label_count = {"classification": n, "detection": n * kmax, "segmentation": n * h * w}[task]
    expected = head + plen + 4 * (n * 3 * h * w) + 4 * label_count + (4 * n * kmax * 4 if task == "detection" else 0)
    if len(blob) != expected:
        raise ShardFormatError(f"{path}: size {len(blob)} bytes, expected {expected} (truncated or corrupt)")
    off = head
    provenance = json.loads(blob[off:off + plen].decode())
    off += plen
    images = np.frombuffer(blob, "<f4", n * 3 * h * w, off).reshape(n, 3, h, w).astype(np.float32)
    off += 4 * n * 3 * h * w
    labels = np.frombuffer(blob, "<i4", label_count, off).astype(np.int64)
    off += 4 * label_count
    boxes = None
    if task == "classification":
        pass
    elif task == "detection":
        labels = labels.reshape(n, kmax)
        boxes = np.frombuffer(blob, "<f4", n * kmax * 4, off).reshape(n, kmax, 4).astype(np.float32)
    else:
        labels = labels.reshape(n, h, w)
    return DatasetShard(task, c, images, labels, boxes, provenance)
