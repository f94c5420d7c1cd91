"""Diagonal Gaussians and their closed-form divergences.

``variance`` holds per-dimension variances (not standard deviations).  Mean and
variance may be plain arrays or :class:`~distembed.tensor.Tensor` objects with
leading batch axes; the functions broadcast over those axes and reduce over the
last one, so ``kl_divergence(q.unsqueeze(1), priors.unsqueeze(0))`` yields an
``N x K`` matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor, as_tensor

VARIANCE_FLOOR = 1e-8
LOG_2PI = math.log(2.0 * math.pi)

Array = Union[np.ndarray, Tensor]


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else x


@dataclass
class DiagGaussian:
    mean: Array
    variance: Array

    def __post_init__(self):
        if not isinstance(self.mean, Tensor):
            self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        if not isinstance(self.variance, Tensor):
            self.variance = np.atleast_1d(np.asarray(self.variance, dtype=np.float64))
        m, v = _data(self.mean), _data(self.variance)
        if m.shape != v.shape:
            raise ShapeError(f"mean shape {m.shape} != variance shape {v.shape}")
        if m.shape[-1] < 1:
            raise ShapeError("Gaussian dimension must be >= 1")
        if np.any(v < VARIANCE_FLOOR):
            raise ValueError(f"variance entries must be >= {VARIANCE_FLOOR}")

    @property
    def dim(self) -> int:
        return _data(self.mean).shape[-1]

    @property
    def batch_shape(self) -> tuple:
        return _data(self.mean).shape[:-1]

    def unsqueeze(self, axis: int) -> "DiagGaussian":
        def up(x):
            shape = list(_data(x).shape)
            shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
            return T.reshape(x, tuple(shape)) if isinstance(x, Tensor) else x.reshape(shape)

        return DiagGaussian(up(self.mean), up(self.variance))

    def __getitem__(self, idx) -> "DiagGaussian":
        return DiagGaussian(self.mean[idx], self.variance[idx])

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(np.array(_data(self.mean)), np.array(_data(self.variance)))


def _check_dims(a: DiagGaussian, b: DiagGaussian) -> None:
    if a.dim != b.dim:
        raise ShapeError(f"dimension mismatch: {a.dim} vs {b.dim}")


def kl_divergence(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p), summed over the last axis."""
    _check_dims(q, p)
    qv, pv = as_tensor(q.variance), as_tensor(p.variance)
    diff = as_tensor(q.mean) - as_tensor(p.mean)
    terms = T.log(pv) - T.log(qv) + qv / pv - 1.0 + T.square(diff) / pv
    return 0.5 * T.tsum(terms, axis=-1)


def wasserstein_sq(a: DiagGaussian, b: DiagGaussian) -> Tensor:
    """Squared 2-Wasserstein distance: ||mean_a - mean_b||^2 + ||sqrt(var_a) - sqrt(var_b)||^2."""
    _check_dims(a, b)
    dm = as_tensor(a.mean) - as_tensor(b.mean)
    ds = T.sqrt(as_tensor(a.variance)) - T.sqrt(as_tensor(b.variance))
    return T.tsum(T.square(dm) + T.square(ds), axis=-1)


def log_pdf(g: DiagGaussian, z) -> Tensor:
    z = as_tensor(z)
    if z.shape[-1] != g.dim:
        raise ShapeError(f"point dimension {z.shape[-1]} vs Gaussian dimension {g.dim}")
    var = as_tensor(g.variance)
    terms = LOG_2PI + T.log(var) + T.square(z - as_tensor(g.mean)) / var
    return -0.5 * T.tsum(terms, axis=-1)


def sample(g: DiagGaussian, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` codes ``mean + sqrt(var) * eps``; shape ``(n, *batch, d)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    mean, var = _data(g.mean), _data(g.variance)
    eps = np.random.default_rng(seed).standard_normal((n,) + mean.shape)
    return mean + np.sqrt(var) * eps


def _log_pdf_np(mean: np.ndarray, var: np.ndarray, z: np.ndarray) -> np.ndarray:
    return -0.5 * np.sum(LOG_2PI + np.log(var) + (z - mean) ** 2 / var, axis=-1)


def mc_kl_estimate(q: DiagGaussian, p: DiagGaussian, n: int, seed: int) -> Tuple[float, float]:
    """Monte-Carlo mean and standard error of ln q(z) - ln p(z), z ~ q."""
    _check_dims(q, p)
    if n < 2:
        raise ValueError("n must be >= 2")
    z = sample(q, n, seed)
    diffs = _log_pdf_np(_data(q.mean), _data(q.variance), z) - _log_pdf_np(_data(p.mean), _data(p.variance), z)
    return float(diffs.mean()), float(diffs.std(ddof=1) / math.sqrt(n))
