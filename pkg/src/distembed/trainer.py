"""Two-stage training: smoothed labels first, prior-derived soft labels second."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DomainError, NumericError, ShapeError
from .losses import LossConfig, cls_loss, distribution_loss, gm_loss, make_targets, soft_labels
from .tensor import Tensor, no_grad

LOSS_MODES = ("distribution", "gm", "ce")
TARGET_MODES = ("onehot", "smoothed", "soft")


@dataclass
class TrainConfig:
    stage1_epochs: int = 40
    stage2_epochs: int = 10
    base_lr: float = 3.5e-4
    warmup_epochs: int = 5
    decay_epochs: Tuple[int, ...] = (20, 30)
    decay_factor: float = 3.0
    batch_size: int = 32
    seed: int = 0
    loss: str = "distribution"
    stage1_targets: str = "smoothed"
    stage2_targets: str = "soft"
    lam: float = 0.1
    tau: float = 0.17
    smoothing_epsilon: float = 0.1

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.loss not in LOSS_MODES:
            raise ConfigError(f"loss must be one of {LOSS_MODES}, got {self.loss!r}")
        for mode in (self.stage1_targets, self.stage2_targets):
            if mode not in TARGET_MODES:
                raise ConfigError(f"target mode must be one of {TARGET_MODES}, got {mode!r}")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError("decay_epochs must be strictly increasing")
        if self.stage1_epochs < 1 or self.stage2_epochs < 0 or self.batch_size < 1:
            raise ConfigError("epoch counts and batch size must be positive")
        if not 0 <= self.warmup_epochs < self.stage1_epochs:
            raise ConfigError("warmup_epochs must be smaller than stage1_epochs")
        if self.base_lr < 0 or self.decay_factor <= 0:
            raise ConfigError("base_lr must be >= 0 and decay_factor > 0")
        self.loss_config  # validates lam/tau/epsilon

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(lam=self.lam, tau=self.tau, smoothing_epsilon=self.smoothing_epsilon)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Linear warmup to ``base_lr``, then division by ``decay_factor`` at each decay epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < config.warmup_epochs:
        return config.base_lr * (epoch + 1) / config.warmup_epochs
    passed = sum(1 for d in config.decay_epochs if epoch >= d)
    return config.base_lr / config.decay_factor**passed


class Adam:
    """Adaptive-moment optimizer with bias correction.

    Parameters whose ``grad`` is ``None`` are skipped entirely for the step.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Dict[str, Tensor], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if lr != 0.0:
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_tensors(self) -> Dict[str, np.ndarray]:
        out = {"adam.t": np.array([float(self.t)])}
        for name in self.m:
            out[f"adam.m/{name}"] = self.m[name].copy()
            out[f"adam.v/{name}"] = self.v[name].copy()
        return out

    def load_state_tensors(self, tensors: Dict[str, np.ndarray]) -> None:
        self.t = int(tensors.get("adam.t", np.zeros(1))[0])
        self.m = {k[len("adam.m/"):]: v.copy() for k, v in tensors.items() if k.startswith("adam.m/")}
        self.v = {k[len("adam.v/"):]: v.copy() for k, v in tensors.items() if k.startswith("adam.v/")}


def optimizer_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: Adam, lr: float) -> Adam:
    """Functional wrapper: install ``grads`` then apply one :class:`Adam` step."""
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and np.shape(g) != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {np.shape(g)}, parameter {p.shape}")
        p.grad = None if g is None else np.asarray(g, dtype=np.float64)
    state.step(params, lr)
    return state


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    lr: float
    total: float
    cls: float
    kl: float
    wall_ms: float
    snapshot: Optional[dict] = None


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)
    soft_labels: List[np.ndarray] = field(default_factory=list)

    def extend(self, other: "TrainLog") -> "TrainLog":
        return TrainLog(self.records + other.records, self.soft_labels + other.soft_labels)

    def losses(self) -> List[float]:
        return [r.total for r in self.records]

    def deterministic_view(self) -> list:
        """Records without wall-clock time, for reproducibility comparisons."""
        return [(r.epoch, r.stage, r.lr, r.total, r.cls, r.kl) for r in self.records]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "lr", "total", "cls", "kl", "wall_ms"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.lr), repr(r.total), repr(r.cls), repr(r.kl), f"{r.wall_ms:.1f}"])

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps([asdict(r) for r in self.records], indent=2))


Hook = Callable[[object, int], None]


def compute_loss(model, x, labels, targets, config: TrainConfig, mode: str = "train", seed: int = 0):
    """Forward pass plus the configured loss; returns ``(total, cls_part, reg_part, output)``."""
    out = model.forward(x, mode=mode, seed=seed)
    if config.loss == "distribution":
        total, cls_part, reg = distribution_loss(out.posterior, targets, labels, model.bank, config.loss_config)
    elif config.loss == "gm":
        total, cls_part, reg = gm_loss(out.mean, labels, model.bank, config.lam, targets)
    else:
        total = cls_part = cls_loss(model.classifier_logits(out.mean), targets)
        reg = Tensor(0.0)
    return total, cls_part, reg, out


def _first_nonfinite(model, out) -> str:
    candidates = {"posterior.mean": out.mean, "posterior.variance": out.variance}
    candidates.update(model.parameters())
    for name, t in candidates.items():
        data = t.data if isinstance(t, Tensor) else np.asarray(t)
        if not np.all(np.isfinite(data)):
            return name
        grad = getattr(t, "grad", None)
        if grad is not None and not np.all(np.isfinite(grad)):
            return f"{name}.grad"
    return "loss"


def _run_epochs(
    model,
    x: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    stage: int,
    epochs: Sequence[int],
    target_fn: Callable[[np.ndarray], np.ndarray],
    optimizer: Adam,
    log: TrainLog,
    before_epoch: Optional[Hook],
    after_epoch: Optional[Callable[[object, int], Optional[dict]]],
    epoch_start: Optional[Callable[[], None]] = None,
) -> None:
    labels = np.asarray(labels, dtype=np.int64)
    if len(x) == 0 or len(x) != len(labels):
        raise ShapeError("training data must be non-empty with one label per sample")
    if labels.max() >= model.bank.num_classes:
        raise ShapeError(f"labels exceed the {model.bank.num_classes} classes of the prior bank")
    params = model.parameters()
    for epoch in epochs:
        t0 = time.perf_counter()
        if before_epoch is not None:
            before_epoch(model, epoch)
        if epoch_start is not None:
            epoch_start()
        lr = lr_schedule(epoch, config)
        rng = np.random.default_rng([config.seed, stage, epoch])
        order = rng.permutation(len(x))
        sums = np.zeros(3)
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            yb = labels[idx]
            model.zero_grad()
            batch_seed = int(rng.integers(2**31 - 1))
            try:
                total, cls_part, reg, out = compute_loss(model, x[idx], yb, target_fn(yb), config, "train", batch_seed)
            except DomainError as exc:
                with no_grad(), np.errstate(invalid="ignore", over="ignore"):
                    out = model.forward(x[idx], mode="train", seed=batch_seed)
                raise NumericError(
                    f"non-finite values at epoch {epoch}; first non-finite tensor: {_first_nonfinite(model, out)}"
                ) from exc
            if not np.isfinite(total.item()):
                raise NumericError(f"non-finite loss at epoch {epoch}; first non-finite tensor: {_first_nonfinite(model, out)}")
            total.backward()
            optimizer.step(params, lr)
            sums += len(idx) * np.array([total.item(), cls_part.item(), reg.item()])
        sums /= len(order)
        snapshot = after_epoch(model, epoch) if after_epoch is not None else None
        log.records.append(
            EpochRecord(epoch, stage, lr, float(sums[0]), float(sums[1]), float(sums[2]), 1000 * (time.perf_counter() - t0), snapshot)
        )


def train_stage1(
    model,
    x: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    optimizer: Optional[Adam] = None,
    before_epoch: Optional[Hook] = None,
    after_epoch=None,
) -> TrainLog:
    """Stage 1: fixed targets (smoothed by default) for ``stage1_epochs`` epochs."""
    optimizer = optimizer if optimizer is not None else Adam()
    k = model.bank.num_classes
    mode = config.stage1_targets
    if mode == "soft":
        raise ConfigError("stage 1 uses fixed targets; soft labels belong to stage 2")
    log = TrainLog()
    _run_epochs(
        model, x, labels, config, 1, range(config.stage1_epochs),
        lambda y: make_targets(y, mode, k, config.smoothing_epsilon),
        optimizer, log, before_epoch, after_epoch,
    )
    return log


def train_stage2(
    model,
    x: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    optimizer: Optional[Adam] = None,
    start_epoch: Optional[int] = None,
    before_epoch: Optional[Hook] = None,
    after_epoch=None,
) -> TrainLog:
    """Stage 2: targets from the prior bank's soft-label matrix, refreshed at every epoch start."""
    if config.loss == "ce" and config.stage2_targets == "soft":
        raise ConfigError("soft labels need class priors; the cross-entropy baseline has none")
    optimizer = optimizer if optimizer is not None else Adam()
    start = config.stage1_epochs if start_epoch is None else start_epoch
    k = model.bank.num_classes
    log = TrainLog()
    current = {}

    def refresh():
        if config.stage2_targets == "soft":
            current["matrix"] = soft_labels(model.bank, config.tau)
            log.soft_labels.append(current["matrix"].copy())

    def targets(y):
        if config.stage2_targets == "soft":
            return make_targets(y, "soft", k, matrix=current["matrix"])
        return make_targets(y, config.stage2_targets, k, config.smoothing_epsilon)

    _run_epochs(
        model, x, labels, config, 2, range(start, start + config.stage2_epochs),
        targets, optimizer, log, before_epoch, after_epoch, epoch_start=refresh,
    )
    return log
