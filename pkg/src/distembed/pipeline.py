"""End-to-end runs shared by the command line and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .checkpoint import save_model
from .config import RunConfig, parse_kv_list
from .corruption import CorruptionSpec, corrupt_labels
from .data import (
    DatasetIndex,
    Splits,
    SyntheticSpec,
    generate_synthetic,
    index_market_dir,
    load_index_images,
    splits_of,
)
from .errors import ConfigError, DataError
from .model import EmbedModel, ModelConfig
from .retrieval import EvalReport, RetrievalSet, evaluate
from .trainer import Adam, TrainConfig, TrainLog, train_stage1, train_stage2

# short names accepted in --synthetic strings
_SYNTH_ALIASES = {"k": "num_classes", "n": "per_class", "h": "height", "w": "width", "noise": "noise_std"}
_SYNTH_TYPES = {
    "num_classes": int, "per_class": int, "mode": str, "dim": int, "mean_scale": float, "std": float,
    "height": int, "width": int, "noise_std": float, "num_cams": int, "train_fraction": float,
    "policy": str, "seed": int,
}


def synthetic_spec(rc: RunConfig, num_classes_only: bool = False) -> SyntheticSpec:
    """Parse ``data.synthetic`` (``k=10,per_class=60,...``); the run seed is the default data seed."""
    kwargs = {"seed": rc.seed}
    for key, value in parse_kv_list(rc.get("data.synthetic")).items():
        name = _SYNTH_ALIASES.get(key, key)
        if name not in _SYNTH_TYPES:
            raise ConfigError(f"unknown synthetic option {key!r}")
        try:
            kwargs[name] = _SYNTH_TYPES[name](value)
        except ValueError as exc:
            raise ConfigError(f"synthetic option {key}: bad value {value!r}") from exc
    return SyntheticSpec(**kwargs)


def train_config(rc: RunConfig) -> TrainConfig:
    stage2 = rc.get_bool("train.stage2")
    return TrainConfig(
        stage1_epochs=rc.get_int("train.stage1_epochs"),
        stage2_epochs=rc.get_int("train.stage2_epochs") if stage2 else 0,
        base_lr=rc.get_float("train.base_lr"),
        warmup_epochs=rc.get_int("train.warmup_epochs"),
        decay_epochs=rc.get_ints("train.decay_epochs"),
        decay_factor=rc.get_float("train.decay_factor"),
        batch_size=rc.get_int("train.batch_size"),
        seed=rc.seed,
        loss=rc.get("train.loss"),
        stage1_targets="onehot" if rc.get("train.loss") == "ce" else "smoothed",
        stage2_targets="soft",
        lam=rc.get_float("train.lam"),
        tau=rc.get_float("train.tau"),
        smoothing_epsilon=rc.get_float("train.smoothing_epsilon"),
    )


def model_config(rc: RunConfig, num_classes: int, sample_shape: Optional[tuple] = None) -> ModelConfig:
    """Model settings; the backbone and input geometry follow the data when it is known."""
    loss = rc.get("train.loss")
    backbone, channels = rc.get("model.backbone"), rc.get_int("model.channels")
    height, width = 64, 32
    if sample_shape is not None:
        if len(sample_shape) == 1:
            backbone, channels = "identity-vector", int(sample_shape[0])
        else:
            height, width = int(sample_shape[0]), int(sample_shape[1])
    return ModelConfig(
        backbone=backbone,
        channels=channels,
        input_height=height,
        input_width=width,
        num_classes=num_classes,
        variance_head=rc.get("model.variance_head"),
        dropout=rc.get_float("model.dropout"),
        classifier=loss == "ce",
    )


@dataclass
class RunData:
    images: np.ndarray
    index: DatasetIndex
    splits: Splits
    description: str

    @property
    def num_classes(self) -> int:
        return self.index.num_classes

    def part(self, name: str) -> np.ndarray:
        return self.images[getattr(self.splits, name)]


def load_data(rc: RunConfig) -> RunData:
    path = rc.get("data.dataset")
    if path:
        index = index_market_dir(path)
        splits = splits_of(index)
        if not splits.train or not splits.query or not splits.gallery:
            raise DataError(f"dataset {path} needs non-empty train, query and gallery splits")
        # images are loaded in index order so split indices address them directly
        images = load_index_images(index, range(len(index)))
        return RunData(images, index, splits, f"market:{path}")
    spec = synthetic_spec(rc)
    ds = generate_synthetic(spec)
    return RunData(ds.samples, ds.index, splits_of(ds.index), f"synthetic:{rc.get('data.synthetic')}")


def training_labels(rc: RunConfig, data: RunData) -> np.ndarray:
    labels = data.index.labels(data.splits.train)
    noise = rc.get_float("data.train_label_noise")
    if noise > 0:
        labels = corrupt_labels(labels, noise, data.num_classes, rc.seed)
    return labels


def evaluate_model(
    model: EmbedModel,
    data: RunData,
    distance: str = "euclidean",
    corruption: Optional[CorruptionSpec] = None,
) -> EvalReport:
    """Embed queries (optionally corrupted) and the clean gallery, then score retrieval."""
    queries = data.part("query")
    if corruption is not None:
        # erasing fills with the training-set channel mean
        fill = data.part("train").reshape(-1, data.images.shape[-1]).mean(axis=0) if data.images.ndim == 4 else None
        queries = corruption.apply_images(queries, fill)
    qm, qv = model.embed(queries)
    gm, gv = model.embed(data.part("gallery"))
    q = RetrievalSet(qm, data.index.ids(data.splits.query), data.index.cams(data.splits.query), qv)
    g = RetrievalSet(gm, data.index.ids(data.splits.gallery), data.index.cams(data.splits.gallery), gv)
    return evaluate(q, g, distance)


def corruption_spec(rc: RunConfig) -> Optional[CorruptionSpec]:
    text = rc.get("eval.corrupt").strip()
    if not text:
        return None
    spec = CorruptionSpec.parse(text, seed=rc.seed)
    if spec.target != "query-set":
        raise ConfigError("label noise is a training option (--train-label-noise), not an eval corruption")
    return spec


@dataclass
class TrainResult:
    model: EmbedModel
    log: TrainLog
    report: EvalReport
    files: Dict[str, Path] = field(default_factory=dict)
    initial_state: Dict[str, np.ndarray] = field(default_factory=dict)


def run_training(rc: RunConfig, data: Optional[RunData] = None, write: bool = True) -> TrainResult:
    """Stage 1, optional stage 2, then a clean evaluation on the held-out split.

    With ``write`` the output directory receives per-stage checkpoints, the
    training log (CSV and JSON), the final report and the resolved config.
    """
    tc = train_config(rc)
    if tc.stage2_epochs > 0 and tc.loss == "ce":
        raise ConfigError("stage 2 needs class priors; use --no-stage2 with the cross-entropy baseline")
    data = load_data(rc) if data is None else data
    mc = model_config(rc, data.num_classes, data.images.shape[1:])
    model = EmbedModel(mc, seed=rc.seed)
    initial = model.state_dict()
    x = data.part("train")
    labels = training_labels(rc, data)
    out = rc.out
    files: Dict[str, Path] = {}
    # the output directory is left out so runs written to different places stay byte-identical
    meta = {"run_config": {k: v for k, v in rc.values.items() if k != "run.out"}, "train_config": tc.to_dict(), "data": data.description}
    if write:
        files["config"] = rc.write(out)

    optimizer = Adam()
    log = train_stage1(model, x, labels, tc, optimizer)
    if write:
        files["stage1"] = out / "stage1.gckp"
        save_model(files["stage1"], model, optimizer, tc.stage1_epochs, dict(meta, stage=1))
    if tc.stage2_epochs > 0:
        log = log.extend(train_stage2(model, x, labels, tc, optimizer))
        if write:
            files["stage2"] = out / "stage2.gckp"
            save_model(files["stage2"], model, optimizer, tc.stage1_epochs + tc.stage2_epochs, dict(meta, stage=2))
    if write:
        files["model"] = out / "model.gckp"
        save_model(files["model"], model, None, tc.stage1_epochs + tc.stage2_epochs, dict(meta, stage="final"))

    report = evaluate_model(model, data, rc.get("eval.distance"), corruption_spec(rc))
    if write:
        files["log_csv"], files["log_json"] = out / "train_log.csv", out / "train_log.json"
        log.to_csv(files["log_csv"])
        log.to_json(files["log_json"])
        files["report_json"], files["report_csv"] = out / "report.json", out / "report.csv"
        report.to_json(files["report_json"])
        report.to_csv(files["report_csv"])
    return TrainResult(model, log, report, files, initial)


def sweep(model: EmbedModel, data: RunData, specs: List[Optional[CorruptionSpec]], distance: str = "euclidean") -> List[Tuple[str, EvalReport]]:
    return [(str(s) if s is not None else "clean", evaluate_model(model, data, distance, s)) for s in specs]
