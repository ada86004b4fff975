"""Deterministic synthetic scene generator.

Stand-in for a UAV disaster-scene dataset: a textured background plus a
handful of colored, textured shapes (rectangles / ellipses), densely
labeled with a skewed class distribution so the background dominates.
Every sample is a pure function of (spec.seed, index); there is no global
RNG state. Class appearance is stable (fixed palette + per-class texture
frequency), which makes the task learnable at desk scale.
"""
from __future__ import annotations

import colorsys
import dataclasses

import numpy as np

from .errors import ConfigError, ContractError

EVAL_INDEX_OFFSET = 1_000_000  # keeps train/eval index ranges disjoint


@dataclasses.dataclass
class SceneSpec:
    resolution: tuple = (64, 64)
    num_classes: int = 14
    shapes_per_image: tuple = (3, 8)
    class_frequency_skew: float = 0.7  # geometric decay of foreground class frequency
    seed: int = 0

    def __post_init__(self):
        self.resolution = tuple(int(v) for v in self.resolution)
        self.shapes_per_image = tuple(int(v) for v in self.shapes_per_image)

    def validate(self):
        h, w = self.resolution
        if h < 16 or w < 16:
            raise ConfigError(f"resolution {self.resolution} below minimum 16")
        if not (2 <= self.num_classes <= 255):
            raise ConfigError(f"num_classes {self.num_classes} outside [2, 255]")
        lo, hi = self.shapes_per_image
        if not (1 <= lo <= hi):
            raise ConfigError(f"invalid shapes_per_image range {self.shapes_per_image}")
        if not (0.0 < self.class_frequency_skew <= 1.0):
            raise ConfigError("class_frequency_skew must be in (0, 1]")
        return self


@dataclasses.dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray   # (H, W) int64 class ids


def class_palette(num_classes: int) -> np.ndarray:
    """Fixed, well-separated RGB base colors; class 0 is a dark background."""
    colors = [(0.16, 0.16, 0.19)]
    for c in range(1, num_classes):
        hue = (c - 1) / max(1, num_classes - 1)
        colors.append(colorsys.hsv_to_rgb(hue, 0.85, 0.92))
    return np.asarray(colors, dtype=np.float32)


def _foreground_class_weights(spec: SceneSpec) -> np.ndarray:
    k = spec.num_classes - 1
    w = spec.class_frequency_skew ** np.arange(k)
    return w / w.sum()


def _texture(yy, xx, cls, rng):
    # class-specific stripe frequency and orientation + a random phase
    freq = 0.06 + 0.025 * cls
    angle = cls * 0.85
    phase = rng.uniform(0, 2 * np.pi)
    return 0.5 + 0.5 * np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)


def generate_sample(spec: SceneSpec, index: int) -> Sample:
    spec.validate()
    rng = np.random.default_rng([spec.seed, int(index)])
    h, w = spec.resolution
    palette = class_palette(spec.num_classes)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)

    mask = np.zeros((h, w), dtype=np.int64)
    image = np.empty((h, w, 3), dtype=np.float32)
    image[:] = palette[0] * (0.75 + 0.25 * _texture(yy, xx, 0, rng))[..., None]

    lo, hi = spec.shapes_per_image
    n_shapes = int(rng.integers(lo, hi + 1))
    for s in range(n_shapes):
        if s == 0:
            # rotate through foreground classes so every class appears
            # deterministically within any num_classes-1 consecutive indices
            cls = 1 + int(index) % (spec.num_classes - 1)
        else:
            cls = 1 + int(rng.choice(spec.num_classes - 1, p=_foreground_class_weights(spec)))
        cy = rng.uniform(0.12 * h, 0.88 * h)
        cx = rng.uniform(0.12 * w, 0.88 * w)
        ry = rng.uniform(0.10, 0.26) * h
        rx = rng.uniform(0.10, 0.26) * w
        if rng.uniform() < 0.5:
            inside = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        tex = 0.75 + 0.25 * _texture(yy, xx, cls, rng)
        image[inside] = palette[cls] * tex[inside, None]
        mask[inside] = cls

    image += rng.normal(0.0, 0.02, size=image.shape).astype(np.float32)
    np.clip(image, 0.0, 1.0, out=image)
    return Sample(image=np.ascontiguousarray(image.transpose(2, 0, 1)), mask=mask)


def generate_split(spec: SceneSpec, n: int, role: str) -> list:
    """Disjoint train/eval index ranges under one seed."""
    if n < 1:
        raise ContractError("split size must be >= 1")
    if role == "train":
        base = 0
    elif role == "eval":
        base = EVAL_INDEX_OFFSET
    else:
        raise ContractError(f"role must be 'train' or 'eval', got {role!r}")
    return [generate_sample(spec, base + i) for i in range(n)]


def class_histogram(dataset) -> np.ndarray:
    """Exact per-class pixel counts over a list of Samples."""
    num_classes = int(max(s.mask.max() for s in dataset)) + 1
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in dataset:
        counts += np.bincount(s.mask.reshape(-1), minlength=num_classes)
    return counts


def export_sample(sample: Sample, image_path, mask_path):
    """Write the image as binary PPM (P6, 8-bit) and the mask as PGM (P5)."""
    img8 = (np.clip(sample.image, 0, 1) * 255).round().astype(np.uint8).transpose(1, 2, 0)
    h, w = sample.mask.shape
    with open(image_path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(img8.tobytes())
    with open(mask_path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(sample.mask.astype(np.uint8).tobytes())
