"""Linear-subspace data and its four contamination models.

Clean samples are ``theta * D @ z`` with ``z ~ N(0, I_d)`` and
``D_ij ~ N(0, 1)`` of shape ``n x d``. The contaminations are

* sample noise: each row, with probability ``p``, gets ``N(0, I_n)`` added;
* feature noise: a fixed set of ``floor(n * p)`` columns gets ``N(0, 1)``
  noise on every row;
* domain shift: test rows are projected with ``(D + s D') / sqrt(1 + s^2)``;
* anomalies: ``floor(N * p)`` rows are replaced by raw ``N(0, I_n)`` draws.

``theta`` is picked so that ``E||theta D z||^2 / E||eps||^2`` equals the
requested linear SNR squared.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .rng import substream

SCENARIOS = ("sample-noise", "feature-noise", "domain-shift", "anomaly")


class Flag(enum.IntEnum):
    CLEAN = 0
    NOISY = 1
    ANOMALY = 2


def db_to_linear(snr_db: float) -> float:
    """Amplitude ratio for a level in decibels: ``10 ** (db / 20)``."""
    if not math.isfinite(snr_db):
        raise ValueError(f"SNR in dB must be finite, got {snr_db!r}")
    return 10.0 ** (snr_db / 20.0)


def _check_d(d: int) -> None:
    if int(d) != d or d < 1:
        raise ValueError(f"latent dimension must be a positive integer, got {d!r}")


def theta_sample_noise(snr_db: float, d: int) -> float:
    _check_d(d)
    return db_to_linear(snr_db) / math.sqrt(d)


def theta_feature_noise(snr_db: float, d: int, p: float) -> float:
    """Signal scale when only a ``p`` fraction of the features carry noise."""
    _check_d(d)
    if not p > 0 or p > 1:
        raise ValueError(f"feature-noise probability must be in (0, 1], got {p!r}")
    return math.sqrt(p / d) * db_to_linear(snr_db)


def theta_shifted(snr_db: float, d: int, s: float) -> float:
    """Signal scale for rows projected through the unnormalized ``D + s D'``."""
    _check_d(d)
    if not s >= 0:
        raise ValueError(f"shift scale must be nonnegative, got {s!r}")
    return db_to_linear(snr_db) / math.sqrt((s * s + 1.0) * d)


def _check_probability(p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability must be in [0, 1], got {p!r}")


@dataclass(frozen=True)
class SubspaceSpec:
    latent_dim: int = 20
    ambient_dim: int = 50
    n_train: int = 5000
    n_test: int = 10000
    seed: int = 0

    def __post_init__(self):
        for name in ("latent_dim", "ambient_dim", "n_train", "n_test"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.ambient_dim <= self.latent_dim:
            raise ValueError(
                f"ambient_dim ({self.ambient_dim}) must exceed latent_dim ({self.latent_dim})"
            )


@dataclass(frozen=True)
class NoiseSpec:
    mode: str
    probability: float
    snr_db: float
    latent_dim: int = 20

    def __post_init__(self):
        if self.mode not in ("sample", "feature"):
            raise ValueError(f"noise mode must be 'sample' or 'feature', got {self.mode!r}")
        _check_probability(self.probability)
        db_to_linear(self.snr_db)
        _check_d(self.latent_dim)

    @property
    def linear_snr(self) -> float:
        return db_to_linear(self.snr_db)

    @property
    def theta(self) -> float:
        if self.mode == "sample" or self.probability == 0:
            # p=0 feature noise adds nothing; fall back to the full-noise scale
            return theta_sample_noise(self.snr_db, self.latent_dim)
        return theta_feature_noise(self.snr_db, self.latent_dim, self.probability)


@dataclass(frozen=True)
class AnomalySpec:
    probability: float
    sar_db: float
    latent_dim: int = 20

    def __post_init__(self):
        _check_probability(self.probability)
        db_to_linear(self.sar_db)
        _check_d(self.latent_dim)

    @property
    def theta(self) -> float:
        return theta_sample_noise(self.sar_db, self.latent_dim)


@dataclass(frozen=True)
class ShiftSpec:
    """Domain shift of strength ``s``, optionally with sample noise on train."""

    shift_scale: float
    noise: NoiseSpec | None = None

    def __post_init__(self):
        if not self.shift_scale >= 0:
            raise ValueError(f"shift scale must be nonnegative, got {self.shift_scale!r}")
        if self.noise is not None and self.noise.mode != "sample":
            raise ValueError("domain-shift noise must be sample noise")


@dataclass(frozen=True)
class ProjectionMatrix:
    entries: np.ndarray
    kind: str = "base"
    shift_scale: float = 0.0

    def __post_init__(self):
        if self.kind not in ("base", "perturbation", "shifted"):
            raise ValueError(f"unknown projection kind {self.kind!r}")
        if self.entries.ndim != 2:
            raise ValueError("projection entries must be a matrix")

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape

    def project(self, latents: np.ndarray) -> np.ndarray:
        return latents @ self.entries.T


@dataclass
class Dataset:
    samples: np.ndarray
    flags: np.ndarray
    batch_label: np.ndarray
    noisy_feature_mask: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ValueError("samples must be a 2-d matrix")
        self.flags = np.asarray(self.flags, dtype=np.int8)
        self.batch_label = np.asarray(self.batch_label, dtype=np.int64)
        if self.flags.shape != (len(self.samples),):
            raise ValueError("flags length must equal the number of rows")
        if self.batch_label.shape != (len(self.samples),):
            raise ValueError("batch_label length must equal the number of rows")
        if self.noisy_feature_mask is not None:
            self.noisy_feature_mask = np.asarray(self.noisy_feature_mask, dtype=bool)
            if self.noisy_feature_mask.shape != (self.samples.shape[1],):
                raise ValueError("noisy_feature_mask length must equal the number of features")

    @classmethod
    def clean(cls, samples: np.ndarray, batch: int = 0, **meta) -> Dataset:
        n = len(samples)
        return cls(samples, np.zeros(n, np.int8), np.full(n, batch, np.int64), meta=dict(meta))

    @property
    def n_rows(self) -> int:
        return self.samples.shape[0]

    @property
    def n_features(self) -> int:
        return self.samples.shape[1]

    def count(self, flag: Flag) -> int:
        return int(np.count_nonzero(self.flags == flag))

    def head(self, k: int) -> Dataset:
        """First ``k`` rows; used for nested sample-wise subsets."""
        if not 0 < k <= self.n_rows:
            raise ValueError(f"cannot take {k} rows out of {self.n_rows}")
        return self.take(np.arange(k))

    def take(self, rows) -> Dataset:
        rows = np.asarray(rows)
        return Dataset(
            self.samples[rows].copy(),
            self.flags[rows].copy(),
            self.batch_label[rows].copy(),
            None if self.noisy_feature_mask is None else self.noisy_feature_mask.copy(),
            dict(self.meta),
        )

    def to_csv(self, path: str | Path) -> None:
        """Write ``f0..f{n-1},flag,batch`` with round-trippable floats."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"f{j}" for j in range(self.n_features)] + ["flag", "batch"])
            for row, flag, batch in zip(self.samples, self.flags, self.batch_label):
                writer.writerow([repr(float(v)) for v in row] + [Flag(flag).name.lower(), int(batch)])

    @classmethod
    def from_csv(cls, path: str | Path) -> Dataset:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[-2:] != ["flag", "batch"]:
                raise ValueError(f"{path}: expected trailing 'flag,batch' columns")
            rows, flags, batches = [], [], []
            for line in reader:
                rows.append([float(v) for v in line[:-2]])
                flags.append(Flag[line[-2].upper()])
                batches.append(int(line[-1]))
        width = len(header) - 2
        samples = np.array(rows, dtype=np.float64).reshape(len(rows), width)
        return cls(samples, np.array(flags, np.int8), np.array(batches, np.int64))


def sample_latents(spec: SubspaceSpec, split: str = "train") -> np.ndarray:
    """Standard-normal latent vectors for the train or test split.

    Train and test use separate streams, so they are disjoint draws and the
    train latents for a smaller ``n_train`` are a prefix of a larger one.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    rows = spec.n_train if split == "train" else spec.n_test
    rng = substream(spec.seed, f"latents-{split}")
    return rng.standard_normal((rows, spec.latent_dim))


def sample_projection(spec: SubspaceSpec, seed_offset: int = 0) -> ProjectionMatrix:
    rng = substream(spec.seed, "projection", seed_offset)
    return ProjectionMatrix(rng.standard_normal((spec.ambient_dim, spec.latent_dim)), "base")


def make_shifted_projection(base: ProjectionMatrix, s: float, seed: int) -> ProjectionMatrix:
    """``(D + s D') / sqrt(1 + s^2)`` with a fresh standard-normal ``D'``."""
    if base.kind != "base":
        raise ValueError(f"shifted projection needs a base matrix, got kind={base.kind!r}")
    if not s >= 0:
        raise ValueError(f"shift scale must be nonnegative, got {s!r}")
    perturbation = substream(seed, "perturbation").standard_normal(base.shape)
    entries = (base.entries + s * perturbation) / math.sqrt(1.0 + s * s)
    return ProjectionMatrix(entries, "shifted", float(s))


def apply_sample_noise(clean: Dataset, noise: NoiseSpec, seed: int) -> Dataset:
    """Add ``N(0, I_n)`` to each row independently with probability ``p``."""
    if noise.mode != "sample":
        raise ValueError("apply_sample_noise needs a sample-mode NoiseSpec")
    rng = substream(seed, "sample-noise")
    hit = rng.random(clean.n_rows) < noise.probability
    eps = rng.standard_normal(clean.samples.shape)
    samples = clean.samples.copy()
    samples[hit] += eps[hit]
    flags = clean.flags.copy()
    flags[hit] = Flag.NOISY
    meta = dict(clean.meta, noise_mode="sample", noise_p=noise.probability,
                snr_db=noise.snr_db, n_contaminated=int(hit.sum()))
    return replace(clean, samples=samples, flags=flags, meta=meta)


def apply_feature_noise(clean: Dataset, noise: NoiseSpec, seed: int) -> Dataset:
    """Add unit Gaussian noise to the same ``floor(n p)`` columns of every row."""
    if noise.mode != "feature":
        raise ValueError("apply_feature_noise needs a feature-mode NoiseSpec")
    rng = substream(seed, "feature-noise")
    n = clean.n_features
    k = math.floor(n * noise.probability)
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=k, replace=False)] = True
    eps = rng.standard_normal(clean.samples.shape)
    samples = clean.samples.copy()
    samples[:, mask] += eps[:, mask]
    flags = clean.flags.copy()
    if k:
        flags[:] = Flag.NOISY
    meta = dict(clean.meta, noise_mode="feature", noise_p=noise.probability,
                snr_db=noise.snr_db, noisy_features=np.flatnonzero(mask).tolist(),
                n_contaminated=int(flags.astype(bool).sum()))
    return replace(clean, samples=samples, flags=flags, noisy_feature_mask=mask, meta=meta)


def inject_anomalies(clean: Dataset, spec: AnomalySpec, seed: int) -> Dataset:
    """Replace exactly ``floor(N p)`` uniformly chosen rows with ``N(0, I_n)``."""
    rng = substream(seed, "anomalies")
    k = math.floor(clean.n_rows * spec.probability)
    rows = rng.choice(clean.n_rows, size=k, replace=False)
    samples = clean.samples.copy()
    samples[rows] = rng.standard_normal((k, clean.n_features))
    flags = clean.flags.copy()
    flags[rows] = Flag.ANOMALY
    meta = dict(clean.meta, anomaly_p=spec.probability, sar_db=spec.sar_db, n_contaminated=k)
    return replace(clean, samples=samples, flags=flags, meta=meta)


def anomaly_eval_set(spec: SubspaceSpec, anomaly: AnomalySpec, n_anomalies: int | None = None) -> Dataset:
    """Clean test rows plus fresh anomalies, for ROC-AUC evaluation."""
    _, clean_test = build_scenario(spec, "anomaly", anomaly)
    k = spec.n_test if n_anomalies is None else n_anomalies
    rng = substream(spec.seed, "anomalies-eval")
    outliers = Dataset(rng.standard_normal((k, spec.ambient_dim)),
                       np.full(k, Flag.ANOMALY, np.int8), np.zeros(k, np.int64))
    return Dataset(
        np.vstack([clean_test.samples, outliers.samples]),
        np.concatenate([clean_test.flags, outliers.flags]),
        np.concatenate([clean_test.batch_label, outliers.batch_label]),
        meta=dict(clean_test.meta),
    )


def build_scenario(spec: SubspaceSpec, scenario: str, params=None) -> tuple[Dataset, Dataset]:
    """Contaminated train set and clean (or shifted) test set for a scenario.

    ``params`` is a NoiseSpec for the noise scenarios, a ShiftSpec (or bare
    shift scale) for domain shift, and an AnomalySpec for anomalies.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    base = sample_projection(spec)
    z_train = sample_latents(spec, "train")
    z_test = sample_latents(spec, "test")
    meta = {"scenario": scenario, "seed": spec.seed}

    if scenario in ("sample-noise", "feature-noise"):
        if not isinstance(params, NoiseSpec):
            raise ValueError(f"{scenario} needs a NoiseSpec")
        if params.latent_dim != spec.latent_dim:
            raise ValueError("NoiseSpec.latent_dim does not match the subspace spec")
        theta = params.theta
        train = Dataset.clean(theta * base.project(z_train), **meta, theta=theta)
        test = Dataset.clean(theta * base.project(z_test), **meta, theta=theta)
        if scenario == "sample-noise":
            train = apply_sample_noise(train, params, spec.seed)
        else:
            train = apply_feature_noise(train, params, spec.seed)
        return train, test

    if scenario == "anomaly":
        if not isinstance(params, AnomalySpec):
            raise ValueError("anomaly scenario needs an AnomalySpec")
        theta = params.theta
        train = Dataset.clean(theta * base.project(z_train), **meta, theta=theta)
        test = Dataset.clean(theta * base.project(z_test), **meta, theta=theta)
        return inject_anomalies(train, params, spec.seed), test

    shift = params if isinstance(params, ShiftSpec) else ShiftSpec(float(params or 0.0))
    shifted = make_shifted_projection(base, shift.shift_scale, spec.seed)
    # clean shift carries no theta; with noise the normalized D'' keeps theta unchanged
    theta = 1.0 if shift.noise is None else shift.noise.theta
    meta["shift_scale"] = shift.shift_scale
    train = Dataset.clean(theta * base.project(z_train), batch=0, **meta, theta=theta)
    test = Dataset.clean(theta * shifted.project(z_test), batch=1, **meta, theta=theta)
    if shift.noise is not None:
        train = apply_sample_noise(train, shift.noise, spec.seed)
    return train, test
