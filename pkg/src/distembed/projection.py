"""Project Gaussian embeddings to 2-D and export them as drawable ellipses.

Codes are sampled from every distribution, pooled, projected jointly, and a
2-D diagonal Gaussian is re-fit to each distribution's projected points.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .errors import CapabilityError, ConfigError, ShapeError
from .gaussian import DiagGaussian, sample

try:  # optional capability
    from sklearn.manifold import TSNE

    HAVE_TSNE = True
except ImportError:  # pragma: no cover - depends on the environment
    HAVE_TSNE = False

METHODS = ("pca", "tsne")
TSNE_PERPLEXITY = 30.0
TSNE_ITERATIONS = 1000
ELLIPSE_STDS = 2.0


@dataclass
class ProjectedDistribution:
    label: str
    mean: np.ndarray  # (2,)
    variance: np.ndarray  # (2,) per-axis, >= 0
    points: np.ndarray  # (n, 2)


def _derived_seeds(seed: int, count: int) -> List[int]:
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(c.generate_state(1)[0]) for c in children]


def pca_2d(points: np.ndarray) -> np.ndarray:
    """Project onto the top-2 principal directions of the centred pooled points."""
    centred = points - points.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    axes = vt[:2]
    # fix the sign of each axis so results do not depend on the SVD routine
    for i in range(len(axes)):
        j = np.argmax(np.abs(axes[i]))
        if axes[i, j] < 0:
            axes[i] = -axes[i]
    proj = centred @ axes.T
    if proj.shape[1] < 2:
        proj = np.hstack([proj, np.zeros((len(proj), 2 - proj.shape[1]))])
    return proj


def tsne_2d(points: np.ndarray, seed: int) -> np.ndarray:
    if not HAVE_TSNE:
        raise CapabilityError("t-SNE needs scikit-learn; use method='pca' instead")
    perplexity = min(TSNE_PERPLEXITY, (len(points) - 1) / 3.0)
    model = TSNE(
        n_components=2,
        method="exact",
        perplexity=perplexity,
        max_iter=TSNE_ITERATIONS,
        init="pca",
        random_state=seed % (2**32),
    )
    return model.fit_transform(points)


def project_distributions(
    distributions: Sequence[DiagGaussian],
    n: int = 2000,
    method: str = "pca",
    seed: int = 0,
    labels: Optional[Sequence] = None,
) -> List[ProjectedDistribution]:
    if method not in METHODS:
        raise ConfigError(f"unknown projection method {method!r}")
    if len(distributions) == 0:
        raise ConfigError("need at least one distribution")
    if n < 2:
        raise ConfigError("need at least two samples per distribution")
    if method == "tsne" and not HAVE_TSNE:
        raise CapabilityError("t-SNE needs scikit-learn; use method='pca' instead")
    dims = {g.dim for g in distributions}
    if len(dims) != 1:
        raise ShapeError(f"distributions have mixed dimensions {sorted(dims)}")
    for g in distributions:
        if g.batch_shape != ():
            raise ShapeError("each distribution must be a single d-dimensional Gaussian")
    labels = [str(i) for i in range(len(distributions))] if labels is None else [str(v) for v in labels]
    if len(labels) != len(distributions):
        raise ShapeError("one label per distribution")

    seeds = _derived_seeds(seed, len(distributions))
    pooled = np.concatenate([sample(g.detach(), n, s) for g, s in zip(distributions, seeds)])
    proj = pca_2d(pooled) if method == "pca" else tsne_2d(pooled, seed)

    out = []
    for i, label in enumerate(labels):
        pts = proj[i * n : (i + 1) * n]
        out.append(ProjectedDistribution(label, pts.mean(axis=0), pts.var(axis=0), pts))
    return out


def _bounds(projected: Sequence[ProjectedDistribution], include_points: bool):
    lo = np.full(2, np.inf)
    hi = np.full(2, -np.inf)
    for p in projected:
        r = ELLIPSE_STDS * np.sqrt(p.variance)
        lo = np.minimum(lo, p.mean - r)
        hi = np.maximum(hi, p.mean + r)
        if include_points:
            lo = np.minimum(lo, p.points.min(axis=0))
            hi = np.maximum(hi, p.points.max(axis=0))
    span = np.maximum(hi - lo, 1e-9)
    return lo - 0.05 * span, span * 1.1


def export_ellipses(
    projected: Sequence[ProjectedDistribution],
    path: Union[str, Path],
    include_points: bool = False,
    size: int = 600,
    csv_path: Optional[Union[str, Path]] = None,
) -> Path:
    """Write an SVG with one labelled ellipse per distribution (radius 2 std per axis).

    A distribution with zero projected variance is drawn as a small dot marker.
    A companion CSV (label, mean_x, mean_y, var_x, var_y) is written next to it.
    """
    path = Path(path)
    origin, span = _bounds(projected, include_points)
    scale = size / float(span.max())

    def to_px(xy):
        x = (xy[0] - origin[0]) * scale
        y = size - (xy[1] - origin[1]) * scale
        return x, y

    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for i, p in enumerate(projected):
        hue = (i * 137) % 360
        colour = f"hsl({hue},70%,45%)"
        if include_points:
            for pt in p.points:
                px, py = to_px(pt)
                lines.append(f'<circle class="point" cx="{px:.3f}" cy="{py:.3f}" r="0.8" fill="{colour}" fill-opacity="0.3"/>')
        cx, cy = to_px(p.mean)
        rx, ry = ELLIPSE_STDS * np.sqrt(p.variance) * scale
        if rx == 0.0 and ry == 0.0:
            lines.append(f'<circle class="dot" cx="{cx:.3f}" cy="{cy:.3f}" r="2" fill="{colour}"/>')
        else:
            lines.append(
                f'<ellipse class="dist" cx="{cx:.3f}" cy="{cy:.3f}" rx="{rx:.3f}" ry="{ry:.3f}" '
                f'fill="{colour}" fill-opacity="0.15" stroke="{colour}"/>'
            )
        lines.append(f'<text x="{cx:.3f}" y="{cy:.3f}" font-size="12" text-anchor="middle">{_escape(p.label)}</text>')
    lines.append("</svg>")
    path.write_text("\n".join(lines) + "\n")

    csv_path = path.with_suffix(".csv") if csv_path is None else Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "mean_x", "mean_y", "var_x", "var_y"])
        for p in projected:
            writer.writerow([p.label] + [repr(float(v)) for v in (*p.mean, *p.variance)])
    return path


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
