"""Dataset indexing, synthetic data and image files.

Market-1501 style names look like ``0002_c1s1_000451_01.jpg``: identity,
camera (``c1``), sequence, frame and box index.  Identities -1 and 0 mark
junk and distractor images.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from .errors import CapabilityError, ConfigError, DataError, DecodeError

logger = logging.getLogger(__name__)

try:  # optional PNG/JPEG support
    from PIL import Image as _PILImage

    HAVE_PIL = True
except ImportError:  # pragma: no cover - depends on environment
    _PILImage = None
    HAVE_PIL = False

MARKET_NAME = re.compile(r"^(-?\d+)_c(\d+)s(\d+)_(\d+)_(\d+)\.(jpg|jpeg|png|ppm)$", re.IGNORECASE)
MARKET_SUBDIRS = {"bounding_box_train": "train", "query": "query", "bounding_box_test": "gallery"}
SPLITS = ("train", "query", "gallery")
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".ppm"}


@dataclass
class Entry:
    handle: Union[str, int]
    raw_id: int
    cam: int
    split: str
    label: int = -1
    distractor: bool = False


@dataclass
class DatasetIndex:
    entries: List[Entry]
    num_classes: int
    relabel: Dict[int, int]
    rejects: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def select(self, split: str) -> List[int]:
        return [i for i, e in enumerate(self.entries) if e.split == split]

    def ids(self, indices=None) -> np.ndarray:
        idx = range(len(self.entries)) if indices is None else indices
        return np.array([self.entries[i].raw_id for i in idx], dtype=np.int64)

    def cams(self, indices=None) -> np.ndarray:
        idx = range(len(self.entries)) if indices is None else indices
        return np.array([self.entries[i].cam for i in idx], dtype=np.int64)

    def labels(self, indices=None) -> np.ndarray:
        idx = range(len(self.entries)) if indices is None else indices
        return np.array([self.entries[i].label for i in idx], dtype=np.int64)


def parse_market_name(name: str) -> Optional[tuple]:
    """``(identity, camera)`` from a Market-style filename, or ``None`` if it does not parse."""
    m = MARKET_NAME.match(name)
    if m is None:
        return None
    return int(m.group(1)), int(m.group(2))


def _relabel(entries: List[Entry]) -> Dict[int, int]:
    train_ids = sorted({e.raw_id for e in entries if e.split == "train" and not e.distractor})
    mapping = {raw: i for i, raw in enumerate(train_ids)}
    for e in entries:
        e.label = mapping.get(e.raw_id, -1) if e.split == "train" else -1
    return mapping


def index_market_dir(root: Union[str, Path]) -> DatasetIndex:
    """Index a Market-style directory (subdirs ``bounding_box_train``, ``query``, ``bounding_box_test``).

    Image files directly under ``root`` count as training images.  Unparseable
    names go to ``rejects``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    sources = [(root, "train")] + [(root / sub, tag) for sub, tag in MARKET_SUBDIRS.items() if (root / sub).is_dir()]
    entries, rejects = [], []
    for folder, tag in sources:
        for path in sorted(folder.iterdir()):
            if not path.is_file() or path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            parsed = parse_market_name(path.name)
            if parsed is None:
                rejects.append(str(path))
                continue
            pid, cam = parsed
            entries.append(Entry(str(path), pid, cam, tag, distractor=pid in (-1, 0)))
    if not entries:
        raise DataError(f"no usable images found under {root}")
    mapping = _relabel(entries)
    return DatasetIndex(entries, len(mapping), mapping, rejects)


# -- images ----------------------------------------------------------------
def _read_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DecodeError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise DecodeError(f"{path}: only binary PPM (P6) is supported")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DecodeError(f"{path}: malformed PPM header") from exc
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    count = width * height * 3
    if len(data) - pos < count * dtype.itemsize:
        raise DecodeError(f"{path}: truncated PPM payload")
    raw = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    return raw.reshape(height, width, 3).astype(np.float64) / maxval


def load_image(path: Union[str, Path]) -> np.ndarray:
    """Read an image as an ``H x W x 3`` float array in [0, 1]."""
    path = Path(path)
    suffix = path.suffix.lower()
    if not path.is_file():
        raise DecodeError(f"{path}: no such file")
    if suffix == ".ppm":
        return _read_ppm(path)
    if suffix in (".png", ".jpg", ".jpeg"):
        if not HAVE_PIL:
            raise CapabilityError(f"{path}: PNG/JPEG decoding needs Pillow")
        try:
            with _PILImage.open(path) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float64)
        except Exception as exc:
            raise DecodeError(f"{path}: cannot decode image ({exc})") from exc
        return arr / 255.0
    raise DecodeError(f"{path}: unsupported image format {suffix!r}")


def save_image(image, path: Union[str, Path]) -> int:
    """Write an 8-bit binary PPM; out-of-range values are clamped.

    Returns the number of clamped values (also logged as a warning).
    """
    arr = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"expected H x W x 3 image, got {arr.shape}")
    clamped = int(np.count_nonzero((arr < 0) | (arr > 1)))
    if clamped:
        logger.warning("save_image %s: clamped %d out-of-range values", path, clamped)
    q = np.round(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)
    h, w, _ = q.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes())
    return clamped


# -- synthetic data --------------------------------------------------------
@dataclass
class SyntheticSpec:
    num_classes: int = 10
    per_class: int = 60
    mode: str = "image"
    dim: int = 16
    mean_scale: float = 3.0
    std: float = 0.3
    height: int = 64
    width: int = 32
    noise_std: float = 0.08
    num_cams: int = 4
    train_fraction: float = 2 / 3
    policy: str = "closed-set"
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("synthetic data needs K >= 2")
        if self.mode not in ("vector", "image"):
            raise ConfigError(f"unknown synthetic mode {self.mode!r}")
        if self.std < 0 or self.noise_std < 0:
            raise ConfigError("noise levels must be non-negative")
        if self.per_class < 1 or self.num_cams < 1:
            raise ConfigError("per_class and num_cams must be >= 1")


@dataclass
class SyntheticDataset:
    index: DatasetIndex
    samples: np.ndarray
    spec: SyntheticSpec
    prototypes: Optional[np.ndarray] = None


def _vector_samples(spec: SyntheticSpec, rng: np.random.Generator):
    directions = rng.normal(size=(spec.num_classes, spec.dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = spec.mean_scale * directions
    noise = rng.normal(size=(spec.num_classes, spec.per_class, spec.dim))
    return means, means[:, None, :] + spec.std * noise


def image_prototypes(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Per-class prototype: two-colour vertical split plus horizontal stripes.

    Classes share colour pairs in groups of two, so fine stripe frequency is
    needed to tell some identities apart (and is what blur and downsampling erase).
    """
    k, h, w = spec.num_classes, spec.height, spec.width
    palettes = (k + 1) // 2
    left = rng.uniform(0.15, 0.85, size=(palettes, 3))
    right = rng.uniform(0.15, 0.85, size=(palettes, 3))
    freqs = rng.permutation(np.arange(6, 6 + k))  # distinct cycles over the image height
    rows = np.arange(h)[:, None]
    protos = np.empty((k, h, w, 3))
    for c in range(k):
        pal = c % palettes
        base = np.where(np.arange(w)[None, :, None] < w // 2, left[pal], right[pal]) * np.ones((h, 1, 1))
        stripes = 0.12 * np.sign(np.sin(2 * np.pi * freqs[c] * (rows + 0.5) / h))
        protos[c] = base + stripes[:, :, None]
    return protos


def _image_samples(spec: SyntheticSpec, rng: np.random.Generator):
    protos = image_prototypes(spec, rng)
    k, n = spec.num_classes, spec.per_class
    cam_cast = rng.uniform(-0.04, 0.04, size=(spec.num_cams, 3))
    out = np.empty((k, n, spec.height, spec.width, 3))
    for c in range(k):
        for i in range(n):
            img = protos[c] * rng.uniform(0.9, 1.1)
            img = np.roll(img, int(rng.integers(-2, 3)), axis=1)
            img = img + cam_cast[i % spec.num_cams] + spec.noise_std * rng.normal(size=img.shape)
            out[c, i] = np.clip(img, 0.0, 1.0)
    return protos, out


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Deterministic synthetic dataset; identities are ``1..K`` and cameras ``1..num_cams``."""
    rng = np.random.default_rng(spec.seed)
    if spec.mode == "vector":
        protos, samples = _vector_samples(spec, rng)
    else:
        protos, samples = _image_samples(spec, rng)
    entries = []
    for c in range(spec.num_classes):
        for i in range(spec.per_class):
            entries.append(Entry(len(entries), c + 1, i % spec.num_cams + 1, "train"))
    index = DatasetIndex(entries, spec.num_classes, {})
    flat = samples.reshape((-1,) + samples.shape[2:])
    dataset = SyntheticDataset(index, flat, spec, protos)
    split(index, spec.policy, seed=spec.seed, train_fraction=spec.train_fraction)
    return dataset


@dataclass
class Splits:
    train: List[int]
    query: List[int]
    gallery: List[int]


def split(index: DatasetIndex, policy: str = "closed-set", seed: int = 0, train_fraction: float = 2 / 3) -> Splits:
    """Assign split tags in place and relabel training identities.

    ``closed-set``: per identity, the first ``train_fraction`` of its images train;
    the rest form the test set, with the lowest camera as query and the others as gallery.
    ``identity-half``: a seeded half of the identities trains; for each test identity
    the lowest camera forms the query and the other cameras the gallery.
    """
    by_id: Dict[int, List[int]] = {}
    for i, e in enumerate(index.entries):
        if not e.distractor:
            by_id.setdefault(e.raw_id, []).append(i)
    ids = sorted(by_id)
    if policy not in ("closed-set", "identity-half"):
        raise ConfigError(f"unknown split policy {policy!r}")
    if len({e.cam for e in index.entries}) < 2:
        raise ConfigError("cross-camera query/gallery split needs at least two cameras")
    if policy == "identity-half" and len(ids) < 2:
        raise ConfigError("identity-half split needs at least two identities")
    if not 0 < train_fraction < 1:
        raise ConfigError("train_fraction must lie in (0, 1)")

    def assign_test(members: List[int]) -> None:
        cams = sorted({index.entries[i].cam for i in members})
        for i in members:
            index.entries[i].split = "query" if index.entries[i].cam == cams[0] and len(cams) > 1 else "gallery"

    for e in index.entries:
        if e.distractor:
            e.split = "gallery"
    if policy == "closed-set":
        for pid in ids:
            members = by_id[pid]
            cut = int(round(train_fraction * len(members)))
            for i in members[:cut]:
                index.entries[i].split = "train"
            assign_test(members[cut:])
    else:
        rng = np.random.default_rng(seed)
        train_ids = set(rng.permutation(ids)[: len(ids) // 2].tolist())
        for pid in ids:
            if pid in train_ids:
                for i in by_id[pid]:
                    index.entries[i].split = "train"
            else:
                assign_test(by_id[pid])
    index.relabel = _relabel(index.entries)
    index.num_classes = len(index.relabel)
    return Splits(index.select("train"), index.select("query"), index.select("gallery"))


def splits_of(index: DatasetIndex) -> Splits:
    return Splits(index.select("train"), index.select("query"), index.select("gallery"))


def export_synthetic(dataset: SyntheticDataset, root: Union[str, Path]) -> Path:
    """Write image-mode samples as PPM files in a Market-style directory layout."""
    if dataset.spec.mode != "image":
        raise ConfigError("only image-mode synthetic data can be exported as images")
    root = Path(root)
    folders = {tag: sub for sub, tag in MARKET_SUBDIRS.items()}
    for sub in folders.values():
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, e in enumerate(dataset.index.entries):
        name = f"{e.raw_id:04d}_c{e.cam}s1_{i:06d}_00.ppm"
        save_image(dataset.samples[i], root / folders[e.split] / name)
    return root


def load_index_images(index: DatasetIndex, indices) -> np.ndarray:
    return np.stack([load_image(index.entries[i].handle) for i in indices])
