"""Seeded label and image degradations used for robustness evaluation.

Images are ``H x W x C`` float arrays in [0, 1].  Convolutions use reflect
padding; outputs are clipped back to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError

KINDS = ("label-noise", "gaussian-blur", "motion-blur", "interp", "erase")
_PARAM_NAMES = {"label-noise": "frac", "gaussian-blur": "k", "motion-blur": "k", "interp": "ratio", "erase": "frac"}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    level: float
    seed: int = 0
    target: str = "query-set"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown corruption kind {self.kind!r}")
        lvl = self.level
        if self.kind == "label-noise" and not 0 <= lvl <= 1:
            raise ConfigError("label-noise fraction must lie in [0, 1]")
        if self.kind == "gaussian-blur" and (lvl != int(lvl) or lvl < 1 or int(lvl) % 2 == 0):
            raise ConfigError("gaussian-blur kernel must be an odd integer >= 1")
        if self.kind == "motion-blur" and (lvl != int(lvl) or lvl < 3):
            raise ConfigError("motion-blur kernel must be an integer >= 3")
        if self.kind == "interp" and not 0 < lvl <= 1:
            raise ConfigError("interp ratio must lie in (0, 1]")
        if self.kind == "erase" and not 0 <= lvl < 1:
            raise ConfigError("erase area fraction must lie in [0, 1)")
        if self.target not in ("query-set", "train-labels"):
            raise ConfigError(f"unknown corruption target {self.target!r}")
        if (self.kind == "label-noise") != (self.target == "train-labels"):
            raise ConfigError("label noise targets training labels; image corruptions target the query set")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "CorruptionSpec":
        """Parse ``kind:param=value``, e.g. ``gaussian-blur:k=5`` or ``label-noise:frac=0.1``."""
        try:
            kind, arg = text.split(":", 1)
            name, value = arg.split("=", 1)
        except ValueError as exc:
            raise ConfigError(f"corruption spec {text!r} is not of the form kind:param=value") from exc
        kind = kind.strip()
        if kind not in KINDS:
            raise ConfigError(f"unknown corruption kind {kind!r}")
        if name.strip() != _PARAM_NAMES[kind]:
            raise ConfigError(f"{kind} takes parameter {_PARAM_NAMES[kind]!r}, got {name!r}")
        target = "train-labels" if kind == "label-noise" else "query-set"
        return cls(kind, float(value), seed, target)

    def __str__(self) -> str:
        value = int(self.level) if self.kind in ("gaussian-blur", "motion-blur") else self.level
        return f"{self.kind}:{_PARAM_NAMES[self.kind]}={value}"

    def apply_image(self, image: np.ndarray, seed: Optional[int] = None, fill=None) -> np.ndarray:
        seed = self.seed if seed is None else seed
        if self.kind == "gaussian-blur":
            return gaussian_blur(image, int(self.level))
        if self.kind == "motion-blur":
            return motion_blur(image, int(self.level), seed)
        if self.kind == "interp":
            return interp_degrade(image, self.level)
        if self.kind == "erase":
            return random_erase(image, self.level, seed, fill)
        raise ConfigError("label noise does not apply to images")

    def apply_images(self, images: np.ndarray, fill=None) -> np.ndarray:
        """Corrupt each image with seed ``base_seed XOR index`` so results never depend on batching."""
        return np.stack([self.apply_image(img, self.seed ^ i, fill) for i, img in enumerate(images)])


def corrupt_labels(labels, fraction: float, num_classes: int, seed: int) -> np.ndarray:
    """Reassign exactly ``round(fraction * N)`` labels to a uniformly drawn different class."""
    if not 0 <= fraction <= 1:
        raise ConfigError("fraction must lie in [0, 1]")
    labels = np.asarray(labels, dtype=np.int64).copy()
    count = int(round(fraction * len(labels)))
    if count == 0:
        return labels
    if num_classes < 2:
        raise ConfigError("label noise needs at least two classes")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(labels), size=count, replace=False)
    # uniform over the K-1 wrong classes: offset in [1, K-1] modulo K
    offsets = rng.integers(1, num_classes, size=count)
    labels[picks] = (labels[picks] + offsets) % num_classes
    return labels


def _convolve_axis(image: np.ndarray, kernel: np.ndarray, axis: int, center: int) -> np.ndarray:
    before, after = center, len(kernel) - 1 - center
    pad = [(0, 0)] * image.ndim
    pad[axis] = (before, after)
    padded = np.pad(image, pad, mode="reflect")
    n = image.shape[axis]
    out = np.zeros_like(image, dtype=np.float64)
    for i, w in enumerate(kernel):
        if w == 0:
            continue
        out += w * np.take(padded, np.arange(i, i + n), axis=axis)
    return out


def gaussian_kernel_1d(k: int) -> np.ndarray:
    """Normalized 1-D Gaussian with ``sigma = 0.3 * ((k - 1) / 2 - 1) + 0.8``."""
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"gaussian kernel size must be odd and >= 1, got {k}")
    sigma = 0.3 * ((k - 1) / 2 - 1) + 0.8
    x = np.arange(k) - (k - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def gaussian_kernel_2d(k: int) -> np.ndarray:
    g = gaussian_kernel_1d(k)
    return np.outer(g, g)


def gaussian_blur(image: np.ndarray, k: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"gaussian blur kernel must be odd and >= 1, got {k}")
    if k == 1:
        return image.copy()
    g = gaussian_kernel_1d(k)
    out = _convolve_axis(_convolve_axis(image, g, 0, k // 2), g, 1, k // 2)
    return np.clip(out, 0.0, 1.0)


def motion_kernel(k: int, vertical: bool) -> np.ndarray:
    """``k x k`` kernel with 1/k along the center column (vertical) or row (horizontal)."""
    kern = np.zeros((k, k))
    if vertical:
        kern[:, k // 2] = 1.0 / k
    else:
        kern[k // 2, :] = 1.0 / k
    return kern


def motion_blur(image: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Vertical or horizontal box blur of length ``k``, orientation chosen with probability 1/2."""
    if k < 3:
        raise ConfigError(f"motion blur kernel must be >= 3, got {k}")
    image = np.asarray(image, dtype=np.float64)
    vertical = bool(np.random.default_rng(seed).random() < 0.5)
    line = np.full(k, 1.0 / k)
    out = _convolve_axis(image, line, 0 if vertical else 1, k // 2)
    return np.clip(out, 0.0, 1.0)


def motion_orientation(seed: int) -> str:
    return "vertical" if np.random.default_rng(seed).random() < 0.5 else "horizontal"


def _resize_axis(image: np.ndarray, size: int, axis: int) -> np.ndarray:
    n = image.shape[axis]
    if size == n:
        return image.copy()
    # half-pixel centres (align_corners=False), source coordinate clamped to the edge
    src = (np.arange(size) + 0.5) * (n / size) - 0.5
    src = np.clip(src, 0.0, n - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    shape = [1] * image.ndim
    shape[axis] = size
    frac = frac.reshape(shape)
    return np.take(image, lo, axis=axis) * (1 - frac) + np.take(image, hi, axis=axis) * frac


def bilinear_resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    return _resize_axis(_resize_axis(np.asarray(image, dtype=np.float64), height, 0), width, 1)


def interp_degrade(image: np.ndarray, ratio: float) -> np.ndarray:
    """Bilinear downsize by ``ratio`` and bilinear upsize back to the original extent."""
    if not 0 < ratio <= 1:
        raise ConfigError(f"ratio must lie in (0, 1], got {ratio}")
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if ratio == 1.0:
        return image.copy()
    sh, sw = int(round(ratio * h)), int(round(ratio * w))
    if sh < 1 or sw < 1:
        raise ConfigError(f"ratio {ratio} shrinks a {h}x{w} image below one pixel")
    small = bilinear_resize(image, sh, sw)
    return np.clip(bilinear_resize(small, h, w), 0.0, 1.0)


def erase_rectangle(height: int, width: int, area_fraction: float, seed: int):
    """Rectangle ``(top, left, h, w)`` of area ``round(frac * H * W)``, aspect ratio in [0.5, 2]."""
    area = int(round(area_fraction * height * width))
    if area == 0:
        return 0, 0, 0, 0
    rng = np.random.default_rng(seed)
    aspect = rng.uniform(0.5, 2.0)
    h = min(height, max(1, int(round(np.sqrt(area * aspect)))))
    w = min(width, max(1, int(round(area / h))))
    h = min(height, max(1, int(round(area / w))))
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    return top, left, h, w


def random_erase(image: np.ndarray, area_fraction: float, seed: int, fill=None) -> np.ndarray:
    """Fill one random rectangle with ``fill`` (default: the image's channel mean)."""
    if not 0 <= area_fraction < 1:
        raise ConfigError("area fraction must lie in [0, 1)")
    image = np.asarray(image, dtype=np.float64)
    out = image.copy()
    top, left, h, w = erase_rectangle(image.shape[0], image.shape[1], area_fraction, seed)
    if h == 0:
        return out
    if fill is None:
        fill = image.reshape(-1, image.shape[-1]).mean(axis=0) if image.ndim == 3 else image.mean()
    out[top : top + h, left : left + w] = fill
    return np.clip(out, 0.0, 1.0)


def corrupt_queries(images: np.ndarray, spec: Optional[CorruptionSpec], fill=None) -> np.ndarray:
    if spec is None:
        return images
    return spec.apply_images(images, fill)
