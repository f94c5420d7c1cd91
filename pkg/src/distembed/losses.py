"""Distribution loss, Gaussian-mixture baseline loss and prior-guided soft labels."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .gaussian import VARIANCE_FLOOR, DiagGaussian, kl_divergence, log_pdf
from .tensor import Tensor


def _inverse_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class PriorBank:
    """K trainable diagonal-Gaussian class priors.

    Realized variances are ``softplus(variance_params) + VARIANCE_FLOOR`` so the
    parameters stay unconstrained.
    """

    def __init__(self, means, variance_params, class_weights=None):
        self.means = means if isinstance(means, Tensor) else Tensor(means, requires_grad=True)
        self.variance_params = (
            variance_params if isinstance(variance_params, Tensor) else Tensor(variance_params, requires_grad=True)
        )
        if self.means.shape != self.variance_params.shape or self.means.ndim != 2:
            raise ShapeError(f"means {self.means.shape} and variance params {self.variance_params.shape} must be K x d")
        k = self.means.shape[0]
        if class_weights is None:
            class_weights = np.full(k, 1.0 / k)
        class_weights = np.asarray(class_weights, dtype=np.float64)
        if class_weights.shape != (k,) or np.any(class_weights < 0) or abs(class_weights.sum() - 1.0) > 1e-9:
            raise ConfigError("class_weights must be K non-negative values summing to 1")
        self.class_weights = class_weights

    @classmethod
    def initialize(cls, num_classes: int, dim: int, seed: int = 0, mean_std: float = 0.1) -> "PriorBank":
        """Means ~ N(0, mean_std^2); variance params chosen so realized variances are 1."""
        rng = np.random.default_rng(seed)
        means = rng.normal(0.0, mean_std, size=(num_classes, dim))
        rho = np.full((num_classes, dim), _inverse_softplus(1.0 - VARIANCE_FLOOR))
        return cls(means, rho)

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def variances(self) -> Tensor:
        return T.softplus(self.variance_params) + VARIANCE_FLOOR

    def distribution(self) -> DiagGaussian:
        return DiagGaussian(self.means, self.variances())

    def parameters(self) -> dict:
        return {"prior.means": self.means, "prior.variance_params": self.variance_params}


@dataclass
class LossConfig:
    lam: float = 0.1
    tau: float = 0.17
    smoothing_epsilon: float = 0.1

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if not 0 < self.tau <= 1:
            raise ConfigError(f"tau must lie in (0, 1], got {self.tau}")
        if not 0 <= self.smoothing_epsilon < 1:
            raise ConfigError(f"smoothing epsilon must lie in [0, 1), got {self.smoothing_epsilon}")


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return labels


def class_logits(posterior: DiagGaussian, bank: PriorBank) -> Tensor:
    """Logits ``-KL(q_i || p_k) + ln p(k)``; ``N x K`` for a batch of N posteriors."""
    if posterior.dim != bank.dim:
        raise ShapeError(f"posterior dimension {posterior.dim} vs prior dimension {bank.dim}")
    q = posterior if posterior.batch_shape else posterior.unsqueeze(0)
    kl = kl_divergence(q.unsqueeze(-2), bank.distribution().unsqueeze(0))
    logits = np.log(bank.class_weights) - kl
    return logits if posterior.batch_shape else logits[0]


def cls_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy between target rows and softmax(logits)."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ShapeError(f"targets {targets.shape} vs logits {logits.shape}")
    n = logits.shape[0]
    return -T.tsum(T.log_softmax(logits) * targets) * (1.0 / n)


def kl_regularizer(posterior: DiagGaussian, labels, bank: PriorBank) -> Tensor:
    """Batch mean of KL(q_i || p_{y_i})."""
    labels = _check_labels(labels, bank.num_classes)
    if posterior.dim != bank.dim:
        raise ShapeError(f"posterior dimension {posterior.dim} vs prior dimension {bank.dim}")
    prior = DiagGaussian(bank.means[labels], bank.variances()[labels])
    return T.mean(kl_divergence(posterior, prior))


def distribution_loss(
    posterior: DiagGaussian, targets: np.ndarray, labels, bank: PriorBank, config: LossConfig
) -> Tuple[Tensor, Tensor, Tensor]:
    """Returns ``(total, cls_part, kl_part)`` with ``total = cls + lam * kl``."""
    labels = _check_labels(labels, bank.num_classes)
    if len(labels) != posterior.batch_shape[0]:
        raise ShapeError("labels and posteriors differ in batch size")
    cls_part = cls_loss(class_logits(posterior, bank), targets)
    kl_part = kl_regularizer(posterior, labels, bank)
    total = cls_part + config.lam * kl_part if config.lam != 0 else cls_part
    return total, cls_part, kl_part


def gm_class_logits(features, bank: PriorBank) -> Tensor:
    """Gaussian-mixture logits ``log N(z; mu_k, var_k) + ln p(k)``."""
    z = features if isinstance(features, Tensor) else Tensor(features)
    if z.shape[-1] != bank.dim:
        raise ShapeError(f"feature dimension {z.shape[-1]} vs prior dimension {bank.dim}")
    single = z.ndim == 1
    if single:
        z = T.reshape(z, (1, -1))
    ll = log_pdf(bank.distribution(), T.reshape(z, (z.shape[0], 1, z.shape[1])))
    logits = ll + np.log(bank.class_weights)
    return logits[0] if single else logits


def gm_loss(features, labels, bank: PriorBank, lambda_lkd: float = 0.1, targets=None) -> Tuple[Tensor, Tensor, Tensor]:
    """Cross-entropy over GM logits plus ``lambda_lkd`` times the mean NLL under the labeled prior.

    Returns ``(total, cls_part, nll_part)``.
    """
    labels = _check_labels(labels, bank.num_classes)
    z = features if isinstance(features, Tensor) else Tensor(features)
    if targets is None:
        targets = make_targets(labels, "onehot", bank.num_classes)
    cls_part = cls_loss(gm_class_logits(z, bank), targets)
    prior = DiagGaussian(bank.means[labels], bank.variances()[labels])
    nll = -T.mean(log_pdf(prior, z))
    return cls_part + lambda_lkd * nll, cls_part, nll


def pairwise_wasserstein(bank: PriorBank) -> np.ndarray:
    mu = bank.means.data
    sd = np.sqrt(bank.variances().data)
    return ((mu[:, None] - mu[None]) ** 2).sum(-1) + ((sd[:, None] - sd[None]) ** 2).sum(-1)


def soft_labels(bank: PriorBank, tau: float) -> np.ndarray:
    """Row r is softmax_k(-W2(p_r, p_k) / tau); no gradient flows through it."""
    if tau <= 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    logits = -pairwise_wasserstein(bank) / tau
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def make_targets(labels, mode: str, num_classes: int, epsilon: float = 0.1, matrix: Optional[np.ndarray] = None) -> np.ndarray:
    """Target rows for ``mode`` in ``onehot``, ``smoothed`` ((1-eps)*onehot + eps/K) or ``soft`` (rows of ``matrix``)."""
    labels = _check_labels(labels, num_classes)
    onehot = np.eye(num_classes)[labels]
    if mode == "onehot":
        return onehot
    if mode == "smoothed":
        if not 0 <= epsilon < 1:
            raise ConfigError(f"smoothing epsilon must lie in [0, 1), got {epsilon}")
        return (1.0 - epsilon) * onehot + epsilon / num_classes
    if mode == "soft":
        if matrix is None or np.shape(matrix) != (num_classes, num_classes):
            raise ConfigError("soft targets need a K x K matrix")
        return np.asarray(matrix, dtype=np.float64)[labels]
    raise ConfigError(f"unknown target mode {mode!r}")


def row_entropy(matrix: np.ndarray) -> np.ndarray:
    p = np.clip(matrix, 1e-300, None)
    return -(matrix * np.log(p)).sum(axis=1)


def export_soft_labels_csv(matrix: np.ndarray, path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in matrix:
            writer.writerow([repr(float(v)) for v in row])
