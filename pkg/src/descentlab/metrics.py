"""Post-training evaluation: normalized loss, ROC-AUC, KNN-DAT, peak detection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


class UndefinedNormalizationError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class LossNormalizer:
    """Mean squared deviation of all entries from their pooled scalar mean."""

    denominator: float
    mean: float

    @classmethod
    def from_data(cls, data) -> LossNormalizer:
        y = np.asarray(getattr(data, "samples", data), dtype=np.float64)
        mean = float(y.mean())
        dev = y - mean
        return cls(float(np.mean(dev * dev)), mean)

    def normalize(self, raw_mse: float) -> float:
        return normalized_loss(raw_mse, self)


def normalized_loss(raw_mse: float, normalizer: LossNormalizer) -> float:
    if not normalizer.denominator > 0:
        raise UndefinedNormalizationError("reference dataset is constant; loss normalization undefined")
    return raw_mse / normalizer.denominator


@dataclass(frozen=True)
class ScoredSample:
    score: float
    label: str  # "clean" or "anomaly"


def reconstruction_errors(model, data: np.ndarray) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != model.arch.input_dim:
        raise ValueError(f"data must have shape (M, {model.arch.input_dim}), got {data.shape}")
    diff = model.reconstruct(data) - data
    return np.mean(diff * diff, axis=1)


def reconstruction_scores(model, data: np.ndarray, labels: Sequence) -> list[ScoredSample]:
    """Per-row mean squared reconstruction error, tagged clean/anomaly.

    ``labels`` may be strings, booleans (True = anomaly) or the integer flags
    used by :mod:`descentlab.datagen` (2 = anomaly).
    """
    errors = reconstruction_errors(model, data)
    if len(labels) != len(errors):
        raise ValueError("labels length must equal the number of rows")
    return [ScoredSample(float(e), _label(lab)) for e, lab in zip(errors, labels)]


def _label(lab) -> str:
    if isinstance(lab, str):
        if lab not in ("clean", "anomaly"):
            raise ValueError(f"unknown label {lab!r}")
        return lab
    if isinstance(lab, (bool, np.bool_)):
        return "anomaly" if lab else "clean"
    return "anomaly" if int(lab) == 2 else "clean"


def roc_auc_scores(scores: np.ndarray, is_anomaly: np.ndarray) -> float:
    """Mann-Whitney AUC with anomalies as positives; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(is_anomaly, dtype=bool)
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs at least one clean and one anomaly sample")
    ranks = rankdata(scores)  # average ranks resolve ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc(scored: Sequence[ScoredSample]) -> float:
    return roc_auc_scores(
        np.array([s.score for s in scored]),
        np.array([s.label == "anomaly" for s in scored]),
    )


@dataclass(frozen=True)
class KnnDatConfig:
    k: int = 10

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k!r}")


def _pairwise_sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T
    np.maximum(d, 0.0, out=d)
    return d


def knn_neighbors(embeddings: np.ndarray, k: int, chunk: int = 1024) -> np.ndarray:
    """Indices of each row's ``k`` nearest other rows (Euclidean).

    Distances are computed exactly per candidate pair; ties go to the lower
    index through a stable sort.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    m = len(x)
    if not 0 < k < m:
        raise ValueError(f"k={k} must be in [1, {m - 1}]")
    others = np.arange(m)
    width = min(m - 1, k + 16)
    sq = (x * x).sum(1)
    # rounding error bound of the expanded-form distances
    slack = 1e-9 * (sq + sq.max())
    out = np.empty((m, k), dtype=np.int64)
    for start in range(0, m, chunk):
        rows = np.arange(start, min(start + chunk, m))
        # the expanded form is only used to shortlist; ranking uses exact distances
        d = _pairwise_sq_dists(x[rows], x)
        d[np.arange(len(rows)), rows] = np.inf
        part = np.partition(d, width, axis=1) if width < m - 1 else None
        for i, row in enumerate(rows):
            exact = None
            if part is not None:
                cutoff = part[i, width]
                cand = np.flatnonzero(d[i] < cutoff)
                if len(cand) >= k:
                    exact = ((x[cand] - x[row]) ** 2).sum(1)
                    order = np.argsort(exact, kind="stable")[:k]
                    if exact[order[-1]] >= cutoff - 2 * slack[row]:
                        exact = None  # k-th distance too close to the cutoff
            if exact is None:
                cand = others[others != row]
                exact = ((x[cand] - x[row]) ** 2).sum(1)
                order = np.argsort(exact, kind="stable")[:k]
            out[row] = cand[order]
    return out


def knn_dat(embeddings: np.ndarray, batch_labels: Sequence[int], cfg: KnnDatConfig = KnnDatConfig()) -> float:
    """Mean fraction of each point's ``k`` nearest neighbours sharing its batch.

    Neighbours are searched over the pooled embeddings, excluding the point
    itself. 1 means the batches are fully separated; ``(N_b - 1)/(N - 1)``
    is the expectation for perfectly mixed batches.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(batch_labels)
    if x.ndim != 2 or len(labels) != len(x):
        raise ValueError("embeddings must be (M, b) with one batch label per row")
    if cfg.k >= len(x):
        raise ValueError(f"k={cfg.k} must be smaller than the number of points ({len(x)})")
    nbrs = knn_neighbors(x, cfg.k)
    # one division of an integer count keeps the result independent of summation order
    same = int(np.count_nonzero(labels[nbrs] == labels[:, None]))
    return same / (len(x) * cfg.k)


def knn_dat_per_target(embeddings: np.ndarray, batch_labels: Sequence[int], source: int,
                       cfg: KnnDatConfig = KnnDatConfig()) -> dict[int, float]:
    """KNN-DAT of the source pooled with each target batch separately."""
    labels = np.asarray(batch_labels)
    x = np.asarray(embeddings)
    out = {}
    for target in sorted(set(labels.tolist()) - {source}):
        keep = (labels == source) | (labels == target)
        out[int(target)] = knn_dat(x[keep], labels[keep], cfg)
    return out


@dataclass(frozen=True)
class PeakProfile:
    first_min: tuple[float, float] | None
    peak: tuple[float, float] | None
    second_min: tuple[float, float] | None
    descent_count: int
    minima: list[tuple[float, float]]
    maxima: list[tuple[float, float]]
    smoothed: list[float]

    @property
    def peak_ratio(self) -> float:
        """Height of the main peak over the lowest point before it."""
        if self.peak is None or self.first_min is None:
            return math.nan
        return self.peak[1] / self.first_min[1]


def smooth3(values: Sequence[float]) -> np.ndarray:
    """Centered 3-point moving average; endpoints average their 2 points."""
    y = np.asarray(values, dtype=np.float64)
    out = y.copy()
    out[1:-1] = (y[:-2] + y[1:-1] + y[2:]) / 3.0
    out[0] = (y[0] + y[1]) / 2.0
    out[-1] = (y[-2] + y[-1]) / 2.0
    return out


def peak_profile(x: Sequence[float], y: Sequence[float], smooth: bool = True) -> PeakProfile:
    """Locate the descents of a loss curve.

    Runs of equal values are treated as one point. A descent segment is a
    maximal strictly falling stretch; ``descent_count`` 2 means double
    descent. ``peak`` is the highest interior local maximum, ``first_min``
    the lowest point before it and ``second_min`` the lowest point after.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 5 or len(y) != len(x):
        raise ValueError("peak_profile needs at least 5 (x, y) points")
    if np.any(np.diff(x) <= 0):
        raise ValueError("x values must be strictly increasing")
    s = smooth3(y) if smooth else y.copy()

    # collapse plateaus to their first index
    keep = np.concatenate([[True], np.diff(s) != 0])
    idx = np.flatnonzero(keep)
    v = s[idx]
    minima, maxima = [], []
    for j in range(1, len(v) - 1):
        if v[j] < v[j - 1] and v[j] < v[j + 1]:
            minima.append(int(idx[j]))
        elif v[j] > v[j - 1] and v[j] > v[j + 1]:
            maxima.append(int(idx[j]))
    signs = np.sign(np.diff(v))
    descents = int(np.sum((signs[1:] < 0) & (signs[:-1] > 0))) + int(len(signs) > 0 and signs[0] < 0)

    peak = first_min = second_min = None
    if maxima:
        p = max(maxima, key=lambda i: (s[i], -i))
        lo = int(np.argmin(s[:p]))
        hi = p + int(np.argmin(s[p:]))
        peak, first_min, second_min = (x[p], s[p]), (x[lo], s[lo]), (x[hi], s[hi])
    return PeakProfile(
        first_min, peak, second_min, descents,
        [(x[i], s[i]) for i in minima], [(x[i], s[i]) for i in maxima], s.tolist(),
    )
