"""Run configuration: INI file plus command-line overrides.

Keys are dotted ``section.key`` names (``train.base_lr``).  Precedence, lowest
to highest: built-in defaults, values stored in a checkpoint (eval-type
commands only), the ``--config`` file, then explicit command-line flags.  The
fully resolved configuration is written to ``resolved_config.ini`` in the
output directory, and can be fed back through ``--config`` to repeat a run.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Union

from .errors import ConfigError

DEFAULTS: Dict[str, str] = {
    "run.seed": "0",
    "run.out": "runs/default",
    "data.synthetic": "k=10,per_class=60",
    "data.dataset": "",
    "data.train_label_noise": "0.0",
    "model.backbone": "tiny-conv",
    "model.channels": "64",
    "model.variance_head": "sigma",
    "model.dropout": "0.25",
    "train.loss": "distribution",
    "train.stage1_epochs": "40",
    "train.stage2_epochs": "10",
    "train.stage2": "true",
    "train.base_lr": "3.5e-4",
    "train.warmup_epochs": "5",
    "train.decay_epochs": "20,30",
    "train.decay_factor": "3",
    "train.batch_size": "32",
    "train.lam": "0.1",
    "train.tau": "0.17",
    "train.smoothing_epsilon": "0.1",
    "eval.distance": "euclidean",
    "eval.corrupt": "",
    "project.method": "pca",
    "project.samples": "2000",
    "project.ids": "",
}

RESOLVED_NAME = "resolved_config.ini"


def _split_key(key: str):
    if "." not in key:
        raise ConfigError(f"config key {key!r} must be dotted as section.key")
    return key.split(".", 1)


def read_ini(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
    return {f"{section}.{key}": value for section in parser.sections() for key, value in parser[section].items()}


def _parse_bool(key: str, text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


@dataclass
class RunConfig:
    values: Dict[str, str] = field(default_factory=lambda: dict(DEFAULTS))

    @classmethod
    def resolve(
        cls,
        file_path: Optional[Union[str, Path]] = None,
        overrides: Optional[Mapping[str, object]] = None,
        base: Optional[Mapping[str, str]] = None,
    ) -> "RunConfig":
        """Merge defaults, ``base`` (e.g. from a checkpoint), the file, then ``overrides``."""
        values = dict(DEFAULTS)
        for layer in (base or {}, read_ini(file_path) if file_path else {}, overrides or {}):
            for key, value in layer.items():
                if value is None:
                    continue
                if key not in DEFAULTS:
                    raise ConfigError(f"unknown config key {key!r}")
                values[key] = _to_text(value)
        rc = cls(values)
        rc.validate()
        return rc

    def get(self, key: str) -> str:
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def get_int(self, key: str) -> int:
        try:
            return int(self.get(key))
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {self.get(key)!r}") from exc

    def get_float(self, key: str) -> float:
        try:
            return float(self.get(key))
        except ValueError as exc:
            raise ConfigError(f"{key}: expected a number, got {self.get(key)!r}") from exc

    def get_bool(self, key: str) -> bool:
        return _parse_bool(key, self.get(key))

    def get_ints(self, key: str):
        text = self.get(key).strip()
        try:
            return tuple(int(v) for v in text.split(",") if v.strip())
        except ValueError as exc:
            raise ConfigError(f"{key}: expected comma-separated integers, got {text!r}") from exc

    @property
    def seed(self) -> int:
        return self.get_int("run.seed")

    @property
    def out(self) -> Path:
        return Path(self.get("run.out"))

    def section(self, name: str) -> Dict[str, str]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def validate(self) -> None:
        """Build every typed config once so bad values fail before any work starts."""
        from .pipeline import model_config, synthetic_spec, train_config

        self.get_int("run.seed")
        train_config(self)
        if not self.get("data.dataset"):
            synthetic_spec(self, num_classes_only=False)
        model_config(self, num_classes=2)
        noise = self.get_float("data.train_label_noise")
        if not 0 <= noise <= 1:
            raise ConfigError("data.train_label_noise must lie in [0, 1]")
        if self.get("eval.distance") not in ("euclidean", "cosine", "wasserstein"):
            raise ConfigError(f"unknown distance {self.get('eval.distance')!r}")
        if self.get("project.method") not in ("pca", "tsne"):
            raise ConfigError(f"unknown projection method {self.get('project.method')!r}")
        if self.get_int("project.samples") < 2:
            raise ConfigError("project.samples must be >= 2")

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for key in sorted(self.values):
            section, name = _split_key(key)
            if not parser.has_section(section):
                parser.add_section(section)
            parser.set(section, name, self.values[key])
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def write(self, directory: Union[str, Path]) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / RESOLVED_NAME
        path.write_text(self.to_ini())
        return path


def _to_text(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_kv_list(text: str) -> Dict[str, str]:
    """Parse ``a=1,b=2`` into a dict of strings."""
    out = {}
    for part in _nonempty(text.split(",")):
        if "=" not in part:
            raise ConfigError(f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _nonempty(parts: Iterable[str]):
    return [p.strip() for p in parts if p.strip()]
