"""Query/gallery retrieval metrics: CMC and mAP under the Market-1501 protocol.

For each query the gallery is ranked by ascending distance (ties keep gallery
order).  Gallery items sharing both identity and camera with the query are
removed before scoring.  Identities -1 and 0 (distractors) stay in the ranking
but never count as matches.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DataError, ShapeError
from .gaussian import DiagGaussian

DISTANCE_MODES = ("euclidean", "cosine", "wasserstein")
DISTRACTOR_IDS = (-1, 0)


@dataclass
class RetrievalSet:
    """Embeddings plus identity and camera labels.

    ``features`` is ``N x d``; ``variances`` (same shape) is needed only for the
    Wasserstein distance mode.
    """

    features: np.ndarray
    ids: np.ndarray
    cams: np.ndarray
    variances: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.ids = np.asarray(self.ids).reshape(-1)
        self.cams = np.asarray(self.cams).reshape(-1)
        n = len(self.features)
        if len(self.ids) != n or len(self.cams) != n:
            raise ShapeError("features, ids and cams must have equal length")
        if self.variances is not None:
            self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
            if self.variances.shape != self.features.shape:
                raise ShapeError("variances must match features in shape")

    def __len__(self) -> int:
        return len(self.features)

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[DiagGaussian], ids, cams) -> "RetrievalSet":
        means = np.stack([np.asarray(g.mean, dtype=np.float64) for g in gaussians])
        variances = np.stack([np.asarray(g.variance, dtype=np.float64) for g in gaussians])
        return cls(means, ids, cams, variances)


@dataclass
class EvalReport:
    cmc: np.ndarray
    map: float
    ap: np.ndarray
    mode: str
    num_valid: int
    num_skipped: int
    skipped: List[int] = field(default_factory=list)

    def rank(self, r: int) -> float:
        return float(self.cmc[min(r, len(self.cmc)) - 1])

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "cmc": [float(v) for v in self.cmc],
            "map": float(self.map),
            "ap": [float(v) for v in self.ap],
            "num_valid": self.num_valid,
            "num_skipped": self.num_skipped,
            "skipped": list(self.skipped),
        }

    def to_json(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def summary_row(self) -> dict:
        return {"rank1": self.rank(1), "rank5": self.rank(5), "rank10": self.rank(10), "map": float(self.map)}

    def to_csv(self, path: Union[str, Path]) -> None:
        row = self.summary_row()
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(row))
            writer.writeheader()
            writer.writerow({k: repr(v) for k, v in row.items()})


def pairwise_distance(queries: RetrievalSet, gallery: RetrievalSet, mode: str = "euclidean") -> np.ndarray:
    """``Q x G`` non-negative distance matrix."""
    q, g = queries.features, gallery.features
    if q.shape[1] != g.shape[1]:
        raise ShapeError(f"query dimension {q.shape[1]} vs gallery dimension {g.shape[1]}")
    if mode == "euclidean":
        sq = (q * q).sum(1)[:, None] + (g * g).sum(1)[None] - 2.0 * q @ g.T
        return np.sqrt(np.maximum(sq, 0.0))
    if mode == "cosine":
        qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
        gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
        return np.maximum(1.0 - qn @ gn.T, 0.0)
    if mode == "wasserstein":
        if queries.variances is None or gallery.variances is None:
            raise ContractError("wasserstein distance needs Gaussian embeddings (variances)")
        dm = ((q[:, None, :] - g[None]) ** 2).sum(-1)
        ds = ((np.sqrt(queries.variances)[:, None, :] - np.sqrt(gallery.variances)[None]) ** 2).sum(-1)
        return dm + ds
    raise ContractError(f"unknown distance mode {mode!r}")


def evaluate_distances(
    dist: np.ndarray, q_ids, q_cams, g_ids, g_cams, mode: str = "precomputed"
) -> EvalReport:
    """CMC/mAP from a precomputed ``Q x G`` distance matrix."""
    q_ids, q_cams = np.asarray(q_ids).reshape(-1), np.asarray(q_cams).reshape(-1)
    g_ids, g_cams = np.asarray(g_ids).reshape(-1), np.asarray(g_cams).reshape(-1)
    num_g = len(g_ids)
    if num_g == 0:
        raise DataError("gallery is empty")
    if len(q_ids) == 0:
        raise DataError("query set is empty")
    if dist.shape != (len(q_ids), num_g):
        raise ShapeError(f"distance matrix {dist.shape} vs {len(q_ids)} queries x {num_g} gallery")
    distractor = np.isin(g_ids, DISTRACTOR_IDS)
    hits = np.zeros(num_g)
    aps, skipped = [], []
    for qi in range(len(q_ids)):
        order = np.argsort(dist[qi], kind="stable")
        junk = (g_ids[order] == q_ids[qi]) & (g_cams[order] == q_cams[qi])
        order = order[~junk]
        match = (g_ids[order] == q_ids[qi]) & ~distractor[order]
        if not match.any():
            skipped.append(qi)
            continue
        positions = np.flatnonzero(match)  # 0-based ranks of positives
        hits[positions[0]:] += 1
        aps.append(np.mean(np.arange(1, len(positions) + 1) / (positions + 1)))
    valid = len(aps)
    if valid == 0:
        cmc = np.zeros(num_g)
        mean_ap = 0.0
    else:
        cmc = hits / valid
        mean_ap = float(np.mean(aps))
    return EvalReport(cmc, mean_ap, np.asarray(aps), mode, valid, len(skipped), skipped)


def evaluate(queries: RetrievalSet, gallery: RetrievalSet, mode: str = "euclidean") -> EvalReport:
    if len(gallery) == 0:
        raise DataError("gallery is empty")
    dist = pairwise_distance(queries, gallery, mode)
    return evaluate_distances(dist, queries.ids, queries.cams, gallery.ids, gallery.cams, mode)


def cmc_curve(report: EvalReport, ranks: Sequence[int]) -> List[tuple]:
    out = []
    for r in ranks:
        if not 1 <= r <= len(report.cmc):
            raise ValueError(f"rank {r} outside 1..{len(report.cmc)}")
        out.append((int(r), float(report.cmc[r - 1])))
    return out
