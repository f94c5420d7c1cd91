"""Named finite-difference suites covering every differentiable component.

Each suite builds a small random problem from a seed and returns the max
relative error per parameter tensor.  ``mutation="kl-sign"`` flips the sign of
the KL gradient (value unchanged) so callers can confirm a broken gradient is
caught.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Dict, Optional

import numpy as np

from . import functional as F
from . import losses
from . import tensor as T
from .errors import ConfigError
from .gaussian import DiagGaussian, kl_divergence
from .gradcheck import DEFAULT_TOL, check_gradients
from .losses import LossConfig, PriorBank, distribution_loss, gm_loss, make_targets
from .model import EmbedModel, ModelConfig
from .sigma_net import SigmaNetConfig, init_head_params, variance_head
from .tensor import Tensor

MUTATIONS = ("kl-sign",)


def _param(rng, shape, scale=1.0) -> Tensor:
    return Tensor(scale * rng.normal(size=shape), requires_grad=True)


def _weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    # a random projection makes every output entry matter to the scalar
    return T.tsum(out * w)


def suite_tensor_ops(seed: int) -> Dict[str, float]:
    rng = np.random.default_rng(seed)
    p = {
        "a": _param(rng, (3, 4)),
        "b": _param(rng, (4,)),
        "pos": Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True),
        "m": _param(rng, (4, 2)),
        "img": _param(rng, (2, 5, 4, 3)),
        "k": _param(rng, (3, 3, 3, 2), 0.5),
        "g": Tensor(rng.uniform(0.5, 1.5, size=2), requires_grad=True),
    }
    w1, w2 = rng.normal(size=(3, 2)), rng.normal(size=(2, 5, 4, 2))

    def loss():
        a, b, pos = p["a"], p["b"], p["pos"]
        x = a * b + a / pos - T.exp(0.3 * a) + T.log(pos) + T.sqrt(pos) + T.square(a - b)
        x = T.softplus(x) + T.relu(x)
        h = T.matmul(x, p["m"])
        ls = T.log_softmax(h)
        s1 = _weighted_sum(ls, w1) + T.mean(T.transpose(x)[1:3]) + T.tsum(T.concat([a, pos], axis=0), axis=0)[2]
        y = F.conv2d(p["img"], p["k"], padding=1)
        y = F.affine_norm(y, p["g"], 0.0)
        z = F.pool("max", y, 3, 1, 1) * F.pool("min", y, 3, 1, 1) + F.pool("avg", y, 2, 1, 0).sum() * 0.01
        return s1 + _weighted_sum(z, w2)

    return check_gradients(loss, p, seed=seed)


def _head_suite(kind: str, seed: int, mode: str = "train") -> Dict[str, float]:
    rng = np.random.default_rng(seed)
    cfg = SigmaNetConfig(channels=8)
    params = init_head_params(kind, 8, seed=seed)
    for t in params.values():  # move away from the zero init so every path is active
        t.data[...] = t.data + 0.3 * rng.normal(size=t.shape)
    feat = Tensor(rng.normal(size=(2, 4, 3, 8)), requires_grad=True)
    w = rng.normal(size=(2, 8))
    all_params = dict(params, feature=feat)
    return check_gradients(lambda: _weighted_sum(variance_head(kind, feat, params, cfg, mode, seed), w), all_params, seed=seed)


def suite_sigma_net(seed: int) -> Dict[str, float]:
    return _head_suite("sigma", seed)


def suite_bm_head(seed: int) -> Dict[str, float]:
    return _head_suite("bm", seed)


def suite_mlp_head(seed: int) -> Dict[str, float]:
    return _head_suite("mlp", seed)


def suite_distribution_loss(seed: int) -> Dict[str, float]:
    rng = np.random.default_rng(seed)
    bank = PriorBank.initialize(4, 5, seed=seed, mean_std=1.0)
    mean = _param(rng, (6, 5))
    var_param = _param(rng, (6, 5), 0.5)
    labels = rng.integers(0, 4, size=6)
    targets = make_targets(labels, "smoothed", 4, 0.1)
    params = dict(bank.parameters(), **{"posterior.mean": mean, "posterior.variance_params": var_param})

    def loss():
        q = DiagGaussian(mean, T.softplus(var_param) + 1e-3)
        return distribution_loss(q, targets, labels, bank, LossConfig(lam=0.1))[0]

    return check_gradients(loss, params, seed=seed)


def suite_gm_loss(seed: int) -> Dict[str, float]:
    rng = np.random.default_rng(seed)
    bank = PriorBank.initialize(4, 5, seed=seed, mean_std=1.0)
    feats = _param(rng, (6, 5))
    labels = rng.integers(0, 4, size=6)
    params = dict(bank.parameters(), features=feats)
    return check_gradients(lambda: gm_loss(feats, labels, bank, 0.1)[0], params, seed=seed)


def suite_full_model(seed: int) -> Dict[str, float]:
    """Whole model plus distribution loss on a tiny input; a sample of entries per tensor."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(channels=8, input_height=8, input_width=4, num_classes=3, widths=(4, 4))
    model = EmbedModel(cfg, seed=seed)
    for name, t in model.params.items():
        if name.startswith("head."):
            t.data[...] = t.data + 0.3 * rng.normal(size=t.shape)
    x = rng.uniform(size=(3, 8, 4, 3))
    labels = np.array([0, 1, 2])
    targets = make_targets(labels, "smoothed", 3, 0.1)

    def loss():
        out = model.forward(x, mode="train", seed=seed)
        return distribution_loss(out.posterior, targets, labels, model.bank, LossConfig(lam=0.1))[0]

    return check_gradients(loss, model.parameters(), max_entries=6, seed=seed)


SUITES: Dict[str, Callable[[int], Dict[str, float]]] = {
    "tensor-ops": suite_tensor_ops,
    "sigma-net": suite_sigma_net,
    "bm-head": suite_bm_head,
    "mlp-head": suite_mlp_head,
    "distribution-loss": suite_distribution_loss,
    "gm-loss": suite_gm_loss,
    "full-model": suite_full_model,
}


def _sign_flipped_kl(q, p):
    kl = kl_divergence(q, p)
    # same value, negated gradient
    return 2.0 * T.stop_gradient(kl) - kl


@contextlib.contextmanager
def mutated(mutation: Optional[str]):
    if mutation is None:
        yield
        return
    if mutation not in MUTATIONS:
        raise ConfigError(f"unknown mutation {mutation!r}; known: {MUTATIONS}")
    original = losses.kl_divergence
    losses.kl_divergence = _sign_flipped_kl
    try:
        yield
    finally:
        losses.kl_divergence = original


def run_suites(seed: int = 0, names=None, mutation: Optional[str] = None) -> Dict[str, Dict[str, float]]:
    names = list(SUITES) if names is None else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ConfigError(f"unknown gradient suite {unknown[0]!r}; known: {', '.join(SUITES)}")
    with mutated(mutation):
        return {name: SUITES[name](seed) for name in names}


def summarize(results: Dict[str, Dict[str, float]], tol: float = DEFAULT_TOL) -> Dict[str, tuple]:
    """Per suite: (max error, worst tensor name, passed)."""
    out = {}
    for suite, errs in results.items():
        worst = max(errs, key=errs.get) if errs else ""
        top = errs.get(worst, 0.0)
        out[suite] = (top, worst, top <= tol)
    return out
