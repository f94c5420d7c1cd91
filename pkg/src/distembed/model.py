"""Full embedding model: backbone -> (GAP mean, variance head) -> Gaussian posterior."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import functional as F
from . import tensor as T
from .errors import ConfigError, ShapeError
from .gaussian import DiagGaussian
from .losses import PriorBank
from .sigma_net import HEAD_KINDS, SigmaNetConfig, init_head_params, variance_head
from .tensor import Tensor

BACKBONES = ("tiny-conv", "identity-vector")


@dataclass
class ModelConfig:
    backbone: str = "tiny-conv"
    channels: int = 64
    input_height: int = 64
    input_width: int = 32
    num_classes: int = 10
    variance_head: str = "sigma"
    dropout: float = 0.25
    classifier: bool = False
    widths: Tuple[int, int] = (16, 32)

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.variance_head not in HEAD_KINDS:
            raise ConfigError(f"unknown variance head {self.variance_head!r}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        self.widths = tuple(int(w) for w in self.widths)
        SigmaNetConfig(channels=self.channels, dropout=self.dropout)

    @property
    def head_config(self) -> SigmaNetConfig:
        return SigmaNetConfig(channels=self.channels, dropout=self.dropout)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelOutput:
    posterior: DiagGaussian
    feature: Optional[Tensor] = None

    @property
    def mean(self) -> Tensor:
        return self.posterior.mean

    @property
    def variance(self) -> Tensor:
        return self.posterior.variance


def _init_backbone(config: ModelConfig, rng: np.random.Generator) -> Dict[str, Tensor]:
    params: Dict[str, Tensor] = {}
    if config.backbone != "tiny-conv":
        return params
    plan = [3, *config.widths, config.channels]
    for i, (cin, cout) in enumerate(zip(plan[:-1], plan[1:]), start=1):
        std = np.sqrt(2.0 / (9 * cin))
        params[f"backbone.conv{i}.w"] = Tensor(rng.normal(0.0, std, size=(3, 3, cin, cout)), requires_grad=True)
        params[f"backbone.conv{i}.b"] = Tensor(np.zeros(cout), requires_grad=True)
        params[f"backbone.norm{i}.gamma"] = Tensor(np.ones(cout), requires_grad=True)
        params[f"backbone.norm{i}.beta"] = Tensor(np.zeros(cout), requires_grad=True)
    return params


class EmbedModel:
    """Maps an image (or a vector, for the identity backbone) to a diagonal-Gaussian posterior."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        seeds = rng.integers(0, 2**31 - 1, size=3)
        self.params: Dict[str, Tensor] = _init_backbone(config, rng)
        head = init_head_params(config.variance_head, config.channels, seed=int(seeds[0]))
        self.params.update({f"head.{k}": v for k, v in head.items()})
        if config.classifier:
            std = 1.0 / np.sqrt(config.channels)
            self.params["classifier.w"] = Tensor(
                np.random.default_rng(int(seeds[1])).normal(0, std, size=(config.channels, config.num_classes)),
                requires_grad=True,
            )
            self.params["classifier.b"] = Tensor(np.zeros(config.num_classes), requires_grad=True)
        self.bank = PriorBank.initialize(config.num_classes, config.channels, seed=int(seeds[2]))

    # -- parameters -------------------------------------------------------
    def parameters(self) -> Dict[str, Tensor]:
        out = dict(self.params)
        out.update(self.bank.parameters())
        return out

    def head_params(self) -> Dict[str, Tensor]:
        return {k[len("head."):]: v for k, v in self.params.items() if k.startswith("head.")}

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Copy arrays into parameters; validates every shape before mutating anything."""
        params = self.parameters()
        missing = [name for name in params if name not in state]
        if missing:
            raise ShapeError(f"checkpoint lacks tensor {missing[0]!r}")
        for name, p in params.items():
            if np.shape(state[name]) != p.shape:
                raise ShapeError(f"tensor {name!r}: checkpoint shape {np.shape(state[name])} vs model {p.shape}")
        for name, p in params.items():
            p.data[...] = state[name]

    # -- forward ----------------------------------------------------------
    def backbone(self, x, mode: str = "eval") -> Tensor:
        cfg = self.config
        x = T.as_tensor(x)
        if cfg.backbone == "identity-vector":
            if x.ndim != 2 or x.shape[1] != cfg.channels:
                raise ShapeError(f"identity-vector backbone expects N x {cfg.channels}, got {x.shape}")
            return T.reshape(x, (x.shape[0], 1, 1, cfg.channels))
        if x.ndim != 4 or x.shape[1:] != (cfg.input_height, cfg.input_width, 3):
            raise ShapeError(f"tiny-conv backbone expects N x {cfg.input_height} x {cfg.input_width} x 3, got {x.shape}")
        h = x
        n_blocks = len(cfg.widths) + 1
        for i in range(1, n_blocks + 1):
            p = self.params
            h = F.conv2d(h, p[f"backbone.conv{i}.w"], p[f"backbone.conv{i}.b"], stride=1, padding=1)
            h = F.affine_norm(h, p[f"backbone.norm{i}.gamma"], p[f"backbone.norm{i}.beta"])
            h = T.relu(h)
            if i < n_blocks:  # last block keeps stride 1
                h = F.pool("avg", h, kernel=2, stride=2)
        return h

    def forward(self, x, mode: str = "eval", seed: int = 0, keep_feature: bool = False) -> ModelOutput:
        feat = self.backbone(x, mode)
        mu = F.global_avg_pool(feat)
        var = variance_head(self.config.variance_head, feat, self.head_params(), self.config.head_config, mode, seed)
        return ModelOutput(DiagGaussian(mu, var), feat if keep_feature else None)

    __call__ = forward

    def classifier_logits(self, mean: Tensor) -> Tensor:
        if "classifier.w" not in self.params:
            raise ConfigError("model was built without a classifier")
        return F.linear(mean, self.params["classifier.w"], self.params["classifier.b"])

    def embed(self, x: np.ndarray, batch_size: int = 64) -> Tuple[np.ndarray, np.ndarray]:
        """Eval-mode posterior means and variances as arrays, computed in chunks."""
        means, variances = [], []
        with T.no_grad():
            for start in range(0, len(x), batch_size):
                out = self.forward(x[start : start + batch_size], mode="eval")
                means.append(out.mean.data)
                variances.append(T.as_tensor(out.variance).data)
        d = self.config.channels
        if not means:
            return np.zeros((0, d)), np.zeros((0, d))
        return np.concatenate(means), np.concatenate(variances)
