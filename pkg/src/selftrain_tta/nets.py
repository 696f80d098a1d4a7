"""Small conv encoder, task heads, predictor MLP and rotation head.

Parameters live in one flat ``name -> Tensor`` dict per model.  Name prefixes
define the groups the adaptation code works with:

``enc.``  shared feature encoder
``head.`` task head
``pred.`` two-layer predictor used only during teacher adaptation
``rot.``  rotation classifier for the TTT baseline

Weights are stored at unit scale and multiplied by their fan-in factor in the
forward pass (equalized learning rate), so a fixed Adam step changes every
layer by a comparable relative amount.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .diffgrad import Tensor
from .diffgrad import functional as F

TASKS = ("classification", "detection", "segmentation")
NUM_ROTATIONS = 4


class ArchError(ValueError):
    pass


@dataclass(frozen=True)
class ArchDescriptor:
    task: str = "classification"
    resolution: int = 32
    widths: tuple[int, ...] = (16, 32, 64)
    num_classes: int = 5
    grid: int = 4

    @property
    def embed_dim(self) -> int:
        return self.widths[-1]

    @property
    def downsample(self) -> int:
        return 2 ** len(self.widths)

    @property
    def feature_size(self) -> int:
        return self.resolution // self.downsample

    @property
    def head_classes(self) -> int:
        """Output classes of the task head; detection and segmentation add background."""
        return self.num_classes if self.task == "classification" else self.num_classes + 1

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ArchError(f"unknown task {self.task!r}")
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ArchError("channel widths must be positive")
        if self.num_classes < 2:
            raise ArchError("need at least two classes")
        if self.grid < 1:
            raise ArchError("grid size must be >= 1")
        if self.resolution % self.downsample:
            raise ArchError(f"resolution {self.resolution} not divisible by {self.downsample}")
        if self.task == "detection" and self.feature_size % self.grid:
            raise ArchError(f"feature size {self.feature_size} not divisible by grid {self.grid}")

    def to_dict(self) -> dict:
        return {"task": self.task, "resolution": self.resolution, "widths": list(self.widths),
                "num_classes": self.num_classes, "grid": self.grid}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchDescriptor":
        return cls(task=d["task"], resolution=int(d["resolution"]), widths=tuple(int(w) for w in d["widths"]),
                   num_classes=int(d["num_classes"]), grid=int(d["grid"]))


@dataclass
class ModelBundle:
    arch: ArchDescriptor
    params: dict[str, Tensor] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    @property
    def has_predictor(self) -> bool:
        return "pred.w1" in self.params

    @property
    def has_rotation_head(self) -> bool:
        return "rot.w" in self.params

    def copy(self) -> "ModelBundle":
        return ModelBundle(self.arch, {k: Tensor(v.data.copy(), requires_grad=True, name=k, dtype=v.dtype)
                                       for k, v in self.params.items()})

    def astype(self, dtype) -> "ModelBundle":
        return ModelBundle(self.arch, {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k, dtype=dtype)
                                       for k, v in self.params.items()})

    def without(self, prefix: str) -> "ModelBundle":
        return ModelBundle(self.arch, {k: v for k, v in self.params.items() if not k.startswith(prefix)})

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def equals(self, other: "ModelBundle", prefix: str = "") -> bool:
        """Bitwise parameter equality, optionally restricted to one group."""
        mine = self.group(prefix)
        theirs = other.group(prefix)
        return mine.keys() == theirs.keys() and all(
            np.array_equal(mine[k].data, theirs[k].data) and mine[k].dtype == theirs[k].dtype for k in mine)


@dataclass
class Predictions:
    """Head outputs with the class axis last.

    classification: logits (B, C)
    detection:      logits (B, S*S, C+1), boxes (B, S*S, 4) as (cx, cy, w, h) in [0, 1];
                    cx, cy are offsets inside the cell, w, h are fractions of the image
    segmentation:   logits (B, H, W, C+1)
    """

    task: str
    logits: Tensor
    boxes: Tensor | None = None


# runtime multipliers: effective weight = stored weight * gain / sqrt(fan_in)
_RELU_GAIN = float(np.sqrt(2.0))


def weight_scale(name: str, shape: tuple[int, ...]) -> float:
    fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
    relu_follows = name.startswith("enc.") or name == "pred.w1"
    return (_RELU_GAIN if relu_follows else 1.0) / np.sqrt(fan_in)


def _unit_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    return rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=shape)


def _param(arr: np.ndarray, name: str) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


def init_model(arch: ArchDescriptor, seed: int, rotation_head: bool = False) -> ModelBundle:
    """Fan-in scaled uniform weights (via the runtime scale), zero biases; deterministic in ``seed``."""
    arch.validate()
    rng = np.random.default_rng([seed, 0])
    params: dict[str, Tensor] = {}
    cin = 3
    for i, w in enumerate(arch.widths):
        params[f"enc.conv{i}.w"] = _param(_unit_uniform(rng, (w, cin, 3, 3)), f"enc.conv{i}.w")
        params[f"enc.conv{i}.b"] = _param(np.zeros(w), f"enc.conv{i}.b")
        cin = w
    d = arch.embed_dim
    k = arch.head_classes
    params["head.w"] = _param(_unit_uniform(rng, (d, k)), "head.w")
    params["head.b"] = _param(np.zeros(k), "head.b")
    if arch.task == "detection":
        params["head.box_w"] = _param(_unit_uniform(rng, (d, 4)), "head.box_w")
        params["head.box_b"] = _param(np.zeros(4), "head.box_b")
    bundle = ModelBundle(arch, params)
    if rotation_head:
        add_rotation_head(bundle, seed)
    return bundle


PREDICTOR_INITS = ("near_identity", "uniform", "identity", "zero")


def add_predictor(model: ModelBundle, seed: int, init: str = "near_identity", noise: float = 0.01) -> ModelBundle:
    """Attach a freshly initialised two-layer ReLU MLP (d -> d -> d).

    ``near_identity`` draws both weight matrices as I + N(0, noise^2); on the
    non-negative pooled embeddings that starts the predictor close to the
    identity map. ``uniform`` is the plain fan-in scaled draw.
    """
    if init not in PREDICTOR_INITS:
        raise ArchError(f"unknown predictor init {init!r}")
    rng = np.random.default_rng([seed, 1])
    d = model.arch.embed_dim
    for name in ("pred.w1", "pred.w2"):
        if init == "uniform":
            w = _unit_uniform(rng, (d, d))
        elif init == "zero":
            w = np.zeros((d, d))
        else:
            w = np.eye(d) + (rng.normal(0.0, noise, (d, d)) if init == "near_identity" else 0.0)
            w = w / weight_scale(name, (d, d))
        model.params[name] = _param(w, name)
    model.params["pred.b1"] = _param(np.zeros(d), "pred.b1")
    model.params["pred.b2"] = _param(np.zeros(d), "pred.b2")
    return model


def add_rotation_head(model: ModelBundle, seed: int) -> ModelBundle:
    rng = np.random.default_rng([seed, 2])
    d = model.arch.embed_dim
    model.params["rot.w"] = _param(_unit_uniform(rng, (d, NUM_ROTATIONS)), "rot.w")
    model.params["rot.b"] = _param(np.zeros(NUM_ROTATIONS), "rot.b")
    return model


def _w(model: ModelBundle, name: str) -> Tensor:
    p = model.params[name]
    return p * weight_scale(name, p.shape)


def _as_tensor(images) -> Tensor:
    return images if isinstance(images, Tensor) else Tensor(images, _check=False)


def encode(model: ModelBundle, images) -> tuple[Tensor, Tensor]:
    """Conv blocks (conv3x3 -> ReLU -> maxpool2); returns (feature map, pooled embedding)."""
    x = _as_tensor(images)
    arch = model.arch
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (arch.resolution, arch.resolution):
        raise ArchError(f"expected images (B, 3, {arch.resolution}, {arch.resolution}), got {x.shape}")
    p = model.params
    for i in range(len(arch.widths)):
        x = F.maxpool2d(F.relu(F.conv2d(x, _w(model, f"enc.conv{i}.w"), p[f"enc.conv{i}.b"], padding=1)))
    return x, F.global_avg_pool(x)


@lru_cache(maxsize=16)
def _upsample_matrix(src: int, dst: int) -> np.ndarray:
    """(dst*dst, src*src) bilinear interpolation weights, align_corners=False."""
    coords = (np.arange(dst) + 0.5) * src / dst - 0.5
    coords = np.clip(coords, 0, src - 1)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = coords - lo
    m = np.zeros((dst, src))
    m[np.arange(dst), lo] += 1 - frac
    m[np.arange(dst), hi] += frac
    return np.kron(m, m)


def _cells(feature_map: Tensor) -> Tensor:
    b, c, h, w = feature_map.shape
    return F.transpose(F.reshape(feature_map, (b, c, h * w)), (0, 2, 1))


def head_forward(model: ModelBundle, feature_map: Tensor) -> Predictions:
    arch = model.arch
    p = model.params
    if feature_map.ndim != 4 or feature_map.shape[1] != arch.embed_dim:
        raise ArchError(f"feature map {feature_map.shape} does not match arch embedding {arch.embed_dim}")
    if arch.task == "classification":
        return Predictions("classification", F.linear(F.global_avg_pool(feature_map), _w(model, "head.w"), p["head.b"]))
    if arch.task == "detection":
        if "head.box_w" not in p:
            raise ArchError("detection head parameters missing")
        k = feature_map.shape[2] // arch.grid
        fm = F.maxpool2d(feature_map, k) if k > 1 else feature_map
        cells = _cells(fm)
        logits = F.linear(cells, _w(model, "head.w"), p["head.b"])
        boxes = F.sigmoid(F.linear(cells, _w(model, "head.box_w"), p["head.box_b"]))
        return Predictions("detection", logits, boxes)
    cells = _cells(feature_map)
    logits = F.linear(cells, _w(model, "head.w"), p["head.b"])
    up = Tensor(_upsample_matrix(feature_map.shape[2], arch.resolution), dtype=logits.dtype)
    logits = F.matmul(up, logits)
    b = feature_map.shape[0]
    return Predictions("segmentation",
                       F.reshape(logits, (b, arch.resolution, arch.resolution, arch.head_classes)))


def forward(model: ModelBundle, images) -> Predictions:
    return head_forward(model, encode(model, images)[0])


def predictor_forward(model: ModelBundle, embedding: Tensor) -> Tensor:
    if not model.has_predictor:
        raise ArchError("model has no predictor network")
    p = model.params
    hidden = F.relu(F.linear(embedding, _w(model, "pred.w1"), p["pred.b1"]))
    return F.linear(hidden, _w(model, "pred.w2"), p["pred.b2"])


def rotation_head_forward(model: ModelBundle, embedding: Tensor) -> Tensor:
    if not model.has_rotation_head:
        raise ArchError("model has no rotation head")
    return F.linear(embedding, _w(model, "rot.w"), model.params["rot.b"])


def rotate_batch(images: np.ndarray, quarter_turns: np.ndarray) -> np.ndarray:
    """Rotate each (3, H, W) image counter-clockwise by 90 * k degrees."""
    return np.stack([np.rot90(img, k, axes=(1, 2)) for img, k in zip(images, quarter_turns)])


def rotation_batch(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All four rotations of every image with labels 0..3 (0, 90, 180, 270 degrees)."""
    b = len(images)
    labels = np.tile(np.arange(NUM_ROTATIONS), b)
    return rotate_batch(np.repeat(images, NUM_ROTATIONS, axis=0), labels), labels


