"""Ingestion and noising of external tabular data.

Covers expression matrices with a batch column (one row per cell, one
column per gene) and attribute tables with an anomaly label column. Noise
for real rows is scaled per sample so that ``||x|| / ||noise||`` is exactly
the requested linear SNR.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import Dataset, Flag, db_to_linear
from .rng import substream

log = logging.getLogger(__name__)

_TRUE = {"1", "true", "yes", "anomaly", "outlier", "abnormal"}
_FALSE = {"0", "false", "no", "normal", "clean", "inlier"}


class SchemaError(ValueError):
    pass


class RowError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class CsvSchema:
    feature_columns: tuple[str, ...] | None = None  # None: every non-meta column
    batch_column: str | None = None
    label_column: str | None = None
    delimiter: str = ","
    strict: bool = True


@dataclass
class TabularDataset:
    matrix: np.ndarray
    batch_label: np.ndarray
    feature_names: list[str]
    batch_names: list[str] = field(default_factory=lambda: ["0"])
    anomaly_flag: np.ndarray | None = None
    skipped_rows: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.batch_label = np.asarray(self.batch_label, dtype=np.int64)
        if self.matrix.ndim != 2 or self.matrix.shape[1] != len(self.feature_names):
            raise ValueError("matrix width must equal the number of feature names")
        if self.batch_label.shape != (len(self.matrix),):
            raise ValueError("one batch label per row required")
        if self.anomaly_flag is not None:
            self.anomaly_flag = np.asarray(self.anomaly_flag, dtype=bool)

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    def take(self, rows) -> TabularDataset:
        rows = np.asarray(rows, dtype=np.int64)
        return replace(
            self,
            matrix=self.matrix[rows],
            batch_label=self.batch_label[rows],
            anomaly_flag=None if self.anomaly_flag is None else self.anomaly_flag[rows],
            meta=dict(self.meta),
        )

    def to_dataset(self) -> Dataset:
        flags = np.zeros(self.n_rows, np.int8)
        if self.anomaly_flag is not None:
            flags[self.anomaly_flag] = Flag.ANOMALY
        return Dataset(self.matrix.copy(), flags, self.batch_label.copy(), meta=dict(self.meta))

    def to_csv(self, path: str | Path, delimiter: str = ",", batch_column: str = "batch",
               label_column: str = "label") -> None:
        """Write features, then batch name, then anomaly label if present."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, delimiter=delimiter)
            header = list(self.feature_names) + [batch_column]
            if self.anomaly_flag is not None:
                header.append(label_column)
            writer.writerow(header)
            for i, row in enumerate(self.matrix):
                out = [repr(float(v)) for v in row] + [self.batch_names[self.batch_label[i]]]
                if self.anomaly_flag is not None:
                    out.append(int(self.anomaly_flag[i]))
                writer.writerow(out)


def _parse_label(text: str) -> bool:
    key = text.strip().lower()
    if key in _TRUE:
        return True
    if key in _FALSE:
        return False
    raise ValueError(f"unrecognized anomaly label {text!r}")


def load_csv(path: str | Path, schema: CsvSchema = CsvSchema()) -> TabularDataset:
    """Read a delimited file with a header row.

    Rows with empty or NaN entries are always dropped and counted. A value
    that does not parse raises :class:`RowError` in strict mode and is
    skipped (and counted) otherwise. Batch names are interned to ids in
    order of first appearance.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        meta_cols = {c for c in (schema.batch_column, schema.label_column) if c}
        features = list(schema.feature_columns) if schema.feature_columns else [
            h for h in header if h not in meta_cols
        ]
        missing = [c for c in features + sorted(meta_cols) if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        fidx = [header.index(c) for c in features]
        bidx = header.index(schema.batch_column) if schema.batch_column else None
        lidx = header.index(schema.label_column) if schema.label_column else None

        rows, batches, labels = [], [], []
        batch_ids: dict[str, int] = {}
        skipped = 0
        for line_no, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                if len(rec) != len(header):
                    raise ValueError(f"expected {len(header)} fields, got {len(rec)}")
                cells = [rec[j].strip() for j in fidx]
                if any(c == "" or c.lower() == "nan" for c in cells):
                    skipped += 1
                    continue
                values = [float(c) for c in cells]
                label = _parse_label(rec[lidx]) if lidx is not None else None
            except ValueError as exc:
                if schema.strict:
                    raise RowError(str(exc), line_no) from None
                skipped += 1
                continue
            if not all(math.isfinite(v) for v in values):
                skipped += 1
                continue
            name = rec[bidx].strip() if bidx is not None else "0"
            batches.append(batch_ids.setdefault(name, len(batch_ids)))
            rows.append(values)
            labels.append(label)

    if skipped:
        log.warning("%s: skipped %d row(s) with missing or malformed values", path, skipped)
    matrix = np.array(rows, dtype=np.float64).reshape(len(rows), len(features))
    return TabularDataset(
        matrix,
        np.array(batches, dtype=np.int64),
        features,
        list(batch_ids) or ["0"],
        np.array(labels, dtype=bool) if lidx is not None else None,
        skipped,
        {"source": str(path)},
    )


def select_top_features(ds: TabularDataset, k: int) -> TabularDataset:
    """Keep the ``k`` highest-variance columns, in their original order.

    Ties are broken toward the lower column index. Variance is taken on the
    values as ingested (no log transform).
    """
    n = ds.matrix.shape[1]
    if int(k) != k or not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k!r}")
    var = ds.matrix.var(axis=0)
    order = np.lexsort((np.arange(n), -var))
    keep = np.sort(order[:k])
    meta = dict(ds.meta, feature_ranking="variance of raw ingested values", top_k=int(k))
    return replace(
        ds,
        matrix=ds.matrix[:, keep],
        feature_names=[ds.feature_names[j] for j in keep],
        meta=meta,
    )


def real_noise_vector(x: np.ndarray, snr_db: float, seed: int | np.random.Generator,
                      mask: np.ndarray | None = None) -> np.ndarray:
    """``x`` plus Gaussian noise whose norm is exactly ``||x|| / 10**(snr_db/20)``.

    With ``mask`` the noise is confined to those features. A zero row has no
    defined noise level and is returned unchanged with a warning.
    """
    x = np.asarray(x, dtype=np.float64)
    norm_x = float(np.linalg.norm(x))
    if norm_x == 0.0:
        log.warning("zero-norm row: no noise added")
        return x.copy()
    rng = seed if isinstance(seed, np.random.Generator) else substream(seed, "real-noise")
    v = rng.standard_normal(x.shape)
    if mask is not None:
        v = np.where(mask, v, 0.0)
    norm_v = float(np.linalg.norm(v))
    if norm_v == 0.0:
        return x.copy()
    return x + (norm_x / norm_v) * v / db_to_linear(snr_db)


def add_sample_noise(ds: Dataset, p: float, snr_db: float, seed: int) -> Dataset:
    """Real-data sample noise: each row noised with probability ``p``."""
    if not 0 <= p <= 1:
        raise ValueError(f"probability must be in [0, 1], got {p!r}")
    rng = substream(seed, "real-sample-noise")
    hit = rng.random(ds.n_rows) < p
    samples = ds.samples.copy()
    for i in np.flatnonzero(hit):
        samples[i] = real_noise_vector(samples[i], snr_db, rng)
    flags = ds.flags.copy()
    flags[hit] = Flag.NOISY
    meta = dict(ds.meta, noise_mode="sample", noise_p=p, snr_db=snr_db, n_contaminated=int(hit.sum()))
    return replace(ds, samples=samples, flags=flags, meta=meta)


def add_feature_noise(ds: Dataset, p: float, snr_db: float, seed: int) -> Dataset:
    """Real-data feature noise on a fixed ``floor(n p)`` column subset."""
    if not 0 <= p <= 1:
        raise ValueError(f"probability must be in [0, 1], got {p!r}")
    rng = substream(seed, "real-feature-noise")
    n = ds.n_features
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=math.floor(n * p), replace=False)] = True
    samples = ds.samples.copy()
    flags = ds.flags.copy()
    if mask.any():
        for i in range(ds.n_rows):
            samples[i] = real_noise_vector(samples[i], snr_db, rng, mask)
        flags[:] = Flag.NOISY
    meta = dict(ds.meta, noise_mode="feature", noise_p=p, snr_db=snr_db,
                noisy_features=np.flatnonzero(mask).tolist())
    return replace(ds, samples=samples, flags=flags, noisy_feature_mask=mask, meta=meta)


def split_source_target(ds: TabularDataset, source_batch: int | str
                        ) -> tuple[TabularDataset, dict[int, TabularDataset]]:
    """Separate the source batch; group the remaining rows per batch."""
    if isinstance(source_batch, str):
        if source_batch not in ds.batch_names:
            raise ValueError(f"unknown batch {source_batch!r}; known: {ds.batch_names}")
        source_batch = ds.batch_names.index(source_batch)
    present = set(ds.batch_label.tolist())
    if source_batch not in present:
        raise ValueError(f"batch id {source_batch} not present in the dataset")
    source = ds.take(np.flatnonzero(ds.batch_label == source_batch))
    targets = {
        int(b): ds.take(np.flatnonzero(ds.batch_label == b))
        for b in sorted(present - {source_batch})
    }
    return source, targets


def train_test_split(ds: TabularDataset, n_train: int, seed: int) -> tuple[TabularDataset, TabularDataset]:
    """Seeded shuffle, then the first ``n_train`` rows train and the rest test."""
    if not 0 < n_train < ds.n_rows:
        raise ValueError(f"n_train must be in [1, {ds.n_rows - 1}], got {n_train}")
    perm = substream(seed, "real-split").permutation(ds.n_rows)
    return ds.take(perm[:n_train]), ds.take(perm[n_train:])


def concat(parts: Sequence[TabularDataset]) -> TabularDataset:
    first = parts[0]
    flags = None
    if first.anomaly_flag is not None:
        flags = np.concatenate([p.anomaly_flag for p in parts])
    return replace(
        first,
        matrix=np.vstack([p.matrix for p in parts]),
        batch_label=np.concatenate([p.batch_label for p in parts]),
        anomaly_flag=flags,
    )
