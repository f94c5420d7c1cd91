"""Second-order variance head and its ablation variants.

The Σ-net combines a first-order shortcut ``f1 = GAP(conv1x1(F))`` with a
second-order term built from two thin branches ``F1, F2`` (C/4 channels each).
The uncertainty fusion block takes local 3x3 min and max of each branch,
cross-multiplies them into four maps, concatenates, applies dropout and a
1x1 conv + affine norm + ReLU back to C/4 channels.  ``f2`` is a linear map of
the pooled fused map, and ``sigma = softplus(f1 + f2) + floor``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

from . import functional as F
from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

HEAD_KINDS = ("sigma", "bm", "mlp", "none")


@dataclass
class SigmaNetConfig:
    channels: int = 64
    reduction: int = 4
    pool_kernel: int = 3
    pool_stride: int = 1
    pool_padding: int = 1
    dropout: float = 0.25
    output_floor: float = 1e-6

    def __post_init__(self):
        if self.channels % self.reduction != 0:
            raise ConfigError(f"channels ({self.channels}) must be divisible by {self.reduction}")
        if self.pool_stride != 1 or 2 * self.pool_padding != self.pool_kernel - 1:
            raise ConfigError("fusion pooling must preserve spatial extents")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.dropout}")

    @property
    def thin(self) -> int:
        return self.channels // self.reduction


def init_head_params(kind: str, channels: int, seed: int = 0, reduction: int = 4) -> Dict[str, Tensor]:
    """Randomly initialized parameters for a variance head of ``kind``."""
    if kind not in HEAD_KINDS:
        raise ConfigError(f"unknown variance head {kind!r}")
    rng = np.random.default_rng(seed)
    c, t = channels, channels // reduction

    def weight(fan_in, fan_out):
        return Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n), requires_grad=True)

    params: Dict[str, Tensor] = {}
    if kind == "mlp":
        params["mlp1.w"], params["mlp1.b"] = weight(c, t), zeros(t)
        params["mlp2.w"], params["mlp2.b"] = weight(t, c), zeros(c)
        return params
    if kind == "none":
        return params
    params["shortcut.w"], params["shortcut.b"] = weight(c, c), zeros(c)
    params["branch1.w"], params["branch1.b"] = weight(c, t), zeros(t)
    params["branch2.w"], params["branch2.b"] = weight(c, t), zeros(t)
    if kind == "sigma":
        params["fusion.w"], params["fusion.b"] = weight(4 * t, t), zeros(t)
        params["fusion.gamma"] = Tensor(np.ones(t), requires_grad=True)
        params["fusion.beta"] = zeros(t)
    params["out.w"], params["out.b"] = weight(t, c), zeros(c)
    return params


def zero_params(params: Dict[str, Tensor]) -> Dict[str, Tensor]:
    return {name: Tensor(np.zeros_like(p.data), requires_grad=True) for name, p in params.items()}


def _check_input(feat: Tensor, config: SigmaNetConfig) -> None:
    if feat.ndim not in (3, 4) or feat.shape[-1] != config.channels:
        raise ShapeError(f"variance head expects (..., H, W, {config.channels}), got {feat.shape}")


def fusion_products(f1, f2, config: SigmaNetConfig = SigmaNetConfig()) -> Tensor:
    """The four cross-multiplied min/max maps, concatenated along channels."""
    f1, f2 = T.as_tensor(f1), T.as_tensor(f2)
    if f1.shape != f2.shape:
        raise ShapeError(f"fusion inputs differ: {f1.shape} vs {f2.shape}")
    geom = dict(kernel=config.pool_kernel, stride=config.pool_stride, padding=config.pool_padding)
    min1, max1 = F.pool("min", f1, **geom), F.pool("max", f1, **geom)
    min2, max2 = F.pool("min", f2, **geom), F.pool("max", f2, **geom)
    return T.concat([min1 * min2, min1 * max2, max1 * min2, max1 * max2], axis=-1)


def uncertainty_fusion(f1, f2, params: Dict[str, Tensor], config: SigmaNetConfig, mode: str = "eval", seed: int = 0) -> Tensor:
    """Fuse two thin maps into one of the same shape."""
    stacked = fusion_products(f1, f2, config)
    stacked = F.dropout(stacked, config.dropout, mode, seed)
    fused = F.conv1x1(stacked, params["fusion.w"], params["fusion.b"])
    fused = F.affine_norm(fused, params["fusion.gamma"], params["fusion.beta"])
    return T.relu(fused)


def _positive(pre: Tensor, config: SigmaNetConfig) -> Tensor:
    return T.softplus(pre) + config.output_floor


def sigma_forward(feat, params: Dict[str, Tensor], config: SigmaNetConfig, mode: str = "eval", seed: int = 0) -> Tensor:
    """Posterior variance from a feature map: ``(..., H, W, C) -> (..., C)``."""
    feat = T.as_tensor(feat)
    _check_input(feat, config)
    first = F.global_avg_pool(F.conv1x1(feat, params["shortcut.w"], params["shortcut.b"]))
    b1 = F.conv1x1(feat, params["branch1.w"], params["branch1.b"])
    b2 = F.conv1x1(feat, params["branch2.w"], params["branch2.b"])
    fused = uncertainty_fusion(b1, b2, params, config, mode, seed)
    second = F.linear(F.global_avg_pool(fused), params["out.w"], params["out.b"])
    return _positive(first + second, config)


def bm_variance_head(feat, params: Dict[str, Tensor], config: SigmaNetConfig, mode: str = "eval", seed: int = 0) -> Tensor:
    """Σ-net with the fusion block replaced by a plain elementwise product of the branches."""
    feat = T.as_tensor(feat)
    _check_input(feat, config)
    first = F.global_avg_pool(F.conv1x1(feat, params["shortcut.w"], params["shortcut.b"]))
    b1 = F.conv1x1(feat, params["branch1.w"], params["branch1.b"])
    b2 = F.conv1x1(feat, params["branch2.w"], params["branch2.b"])
    second = F.linear(F.global_avg_pool(b1 * b2), params["out.w"], params["out.b"])
    return _positive(first + second, config)


def mlp_variance_head(feat, params: Dict[str, Tensor], config: SigmaNetConfig, mode: str = "eval", seed: int = 0) -> Tensor:
    """First-order baseline: two linear layers on the pooled feature."""
    feat = T.as_tensor(feat)
    _check_input(feat, config)
    hidden = T.relu(F.linear(F.global_avg_pool(feat), params["mlp1.w"], params["mlp1.b"]))
    return _positive(F.linear(hidden, params["mlp2.w"], params["mlp2.b"]), config)


def variance_head(kind: str, feat, params: Dict[str, Tensor], config: SigmaNetConfig, mode: str = "eval", seed: int = 0):
    """Dispatch to a head; ``none`` returns a constant ``output_floor`` variance."""
    if kind == "sigma":
        return sigma_forward(feat, params, config, mode, seed)
    if kind == "bm":
        return bm_variance_head(feat, params, config, mode, seed)
    if kind == "mlp":
        return mlp_variance_head(feat, params, config, mode, seed)
    if kind == "none":
        feat = T.as_tensor(feat)
        _check_input(feat, config)
        return Tensor(np.full(feat.shape[:-3] + (config.channels,), config.output_floor))
    raise ConfigError(f"unknown variance head {kind!r}")
