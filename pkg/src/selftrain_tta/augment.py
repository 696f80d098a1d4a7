"""Seedable weak and strong (RandAugment-style) image augmentation.

Images are float arrays of shape (3, H, W) with values in [0, 1]. Every
transform is a pure function of (image, seed, stream index, policy).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CATALOG = ("contrast", "brightness", "hue_rotate", "gaussian_noise", "cutout", "posterize",
           "shear_x", "shear_y", "translate_x", "translate_y")

_WEAK_SALT = 0x5EED
_STRONG_SALT = 0x57A6


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class AugPolicy:
    kind: str = "weak"
    rotation_deg: tuple[float, float] = (-10.0, 10.0)
    crop_fraction: float = 0.875
    ops: tuple[str, ...] = CATALOG
    n_ops: int = 2
    magnitude: float = 9 / 30

    def __post_init__(self):
        if self.kind not in ("weak", "strong"):
            raise PolicyError(f"unknown policy kind {self.kind!r}")
        lo, hi = self.rotation_deg
        if not -180 <= lo <= hi <= 180:
            raise PolicyError(f"rotation range {self.rotation_deg} outside [-180, 180]")
        if not 0 < self.crop_fraction <= 1:
            raise PolicyError(f"crop fraction must be in (0, 1], got {self.crop_fraction}")
        if self.kind == "strong":
            if not self.ops:
                raise PolicyError("strong policy needs a non-empty op pool")
            unknown = set(self.ops) - set(CATALOG)
            if unknown:
                raise PolicyError(f"ops not in catalog: {sorted(unknown)}")
            if self.n_ops < 1:
                raise PolicyError("n_ops must be >= 1")
            if not 0 <= self.magnitude <= 1:
                raise PolicyError("magnitude must be in [0, 1]")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "rotation_deg": list(self.rotation_deg), "crop_fraction": self.crop_fraction,
                "ops": list(self.ops), "n_ops": self.n_ops, "magnitude": self.magnitude}

    @classmethod
    def from_dict(cls, d: dict) -> "AugPolicy":
        return cls(kind=d["kind"], rotation_deg=tuple(d["rotation_deg"]), crop_fraction=float(d["crop_fraction"]),
                   ops=tuple(d["ops"]), n_ops=int(d["n_ops"]), magnitude=float(d["magnitude"]))


WEAK = AugPolicy("weak")
STRONG = AugPolicy("strong")


@dataclass(frozen=True)
class AugRng:
    seed: int
    index: int = 0

    def generator(self, salt: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, self.index, salt])


def _warp(img: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """Bilinear resample: output pixel p reads source ``matrix @ (p - c) + c + offset``, edges clamped."""
    _, h, w = img.shape
    c = np.array([(h - 1) / 2, (w - 1) / 2])
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pts = np.stack([yy.ravel() - c[0], xx.ravel() - c[1]])
    src = matrix @ pts + (c + offset)[:, None]
    sy = np.clip(src[0], 0, h - 1)
    sx = np.clip(src[1], 0, w - 1)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = sy - y0
    fx = sx - x0
    out = (img[:, y0, x0] * (1 - fy) * (1 - fx) + img[:, y0, x1] * (1 - fy) * fx
           + img[:, y1, x0] * fy * (1 - fx) + img[:, y1, x1] * fy * fx)
    return out.reshape(img.shape).astype(img.dtype)


def weak_augment(image: np.ndarray, rng: AugRng, policy: AugPolicy = WEAK) -> np.ndarray:
    """Random rotation in the policy range plus a random crop resized back to full size."""
    return _geometric(image, rng.generator(_WEAK_SALT), policy)


def _geometric(image: np.ndarray, g: np.random.Generator, policy: AugPolicy) -> np.ndarray:
    angle = np.deg2rad(g.uniform(*policy.rotation_deg))
    _, h, w = image.shape
    f = policy.crop_fraction
    # crop centre offset such that the crop window stays inside the image
    dy = g.uniform(-(1 - f) / 2, (1 - f) / 2) * (h - 1)
    dx = g.uniform(-(1 - f) / 2, (1 - f) / 2) * (w - 1)
    if angle == 0 and f == 1:
        return image.copy()
    cos, sin = np.cos(angle), np.sin(angle)
    matrix = f * np.array([[cos, -sin], [sin, cos]])
    return np.clip(_warp(image, matrix, np.array([dy, dx])), 0, 1)


def _gray(img: np.ndarray) -> np.ndarray:
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def _hue_matrix(angle: float) -> np.ndarray:
    """Rotation about the gray axis of RGB space."""
    c, s = np.cos(angle), np.sin(angle)
    k = 1 / 3
    r = np.sqrt(k)
    return np.array([
        [c + (1 - c) * k, k * (1 - c) - r * s, k * (1 - c) + r * s],
        [k * (1 - c) + r * s, c + k * (1 - c), k * (1 - c) - r * s],
        [k * (1 - c) - r * s, k * (1 - c) + r * s, c + k * (1 - c)],
    ])


def apply_op(image: np.ndarray, op: str, magnitude: float, g: np.random.Generator) -> np.ndarray:
    """One catalog op; magnitude 0 is the identity for every op."""
    sign = 1.0 if g.random() < 0.5 else -1.0
    m = magnitude
    _, h, w = image.shape
    if m == 0:
        return image.copy()
    if op == "contrast":
        mean = _gray(image).mean()
        return mean + (1 + sign * 0.9 * m) * (image - mean)
    if op == "brightness":
        return image * (1 + sign * 0.9 * m)
    if op == "hue_rotate":
        return np.tensordot(_hue_matrix(sign * np.pi * m), image, axes=(1, 0))
    if op == "gaussian_noise":
        return image + g.normal(0.0, 0.2 * m, size=image.shape)
    if op == "cutout":
        size = max(1, int(round(0.5 * m * h)))
        cy, cx = g.integers(0, h), g.integers(0, w)
        out = image.copy()
        out[:, max(0, cy - size // 2):cy - size // 2 + size, max(0, cx - size // 2):cx - size // 2 + size] = 0.5
        return out
    if op == "posterize":
        bits = 8 - int(round(4 * m))
        if bits >= 8:
            return image.copy()
        levels = 2 ** bits
        return np.floor(image * (levels - 1e-6)) / (levels - 1)
    if op in ("shear_x", "shear_y"):
        s = sign * 0.3 * m
        matrix = np.array([[1.0, 0.0], [s, 1.0]]) if op == "shear_x" else np.array([[1.0, s], [0.0, 1.0]])
        return _warp(image, matrix, np.zeros(2))
    if op in ("translate_x", "translate_y"):
        shift = sign * 0.3 * m
        offset = np.array([0.0, shift * w]) if op == "translate_x" else np.array([shift * h, 0.0])
        return _warp(image, np.eye(2), offset)
    raise PolicyError(f"unknown op {op!r}")


def sample_ops(rng: AugRng, policy: AugPolicy) -> list[str]:
    """The op sequence ``strong_augment`` will apply for this stream."""
    g = rng.generator(_STRONG_SALT)
    return [policy.ops[i] for i in g.integers(0, len(policy.ops), size=policy.n_ops)]


def strong_augment(image: np.ndarray, rng: AugRng, policy: AugPolicy = STRONG) -> np.ndarray:
    """Apply ``n_ops`` ops drawn uniformly from the pool, in sequence, at the policy magnitude."""
    if policy.kind != "strong":
        raise PolicyError("strong_augment needs a strong policy")
    g = rng.generator(_STRONG_SALT)
    names = [policy.ops[i] for i in g.integers(0, len(policy.ops), size=policy.n_ops)]
    out = image
    for name in names:
        out = np.clip(apply_op(out, name, policy.magnitude, g), 0, 1)
    return out.astype(image.dtype)


def augment_batch(images: np.ndarray, policy: AugPolicy, seed: int, indices) -> np.ndarray:
    fn = weak_augment if policy.kind == "weak" else strong_augment
    return np.stack([fn(img, AugRng(seed, int(i)), policy) for img, i in zip(images, indices)])
