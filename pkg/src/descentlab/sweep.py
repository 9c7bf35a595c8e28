"""Model-wise, epoch-wise and sample-wise sweeps over seeds.

A sweep expands into independent runs identified by :class:`RunKey`. Runs
execute serially or in a process pool; results are keyed, so the
aggregated :class:`CurveTable` does not depend on completion order or on
the degree of parallelism. Within one seed every run sees the same dataset
realization, so curves differ only along the swept axis.
"""

from __future__ import annotations

import csv
import functools
import hashlib
import json
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from concurrent.futures.process import BrokenProcessPool
from dataclasses import asdict, dataclass, field, is_dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from . import realdata
from .datagen import (
    SCENARIOS,
    AnomalySpec,
    Dataset,
    Flag,
    NoiseSpec,
    ShiftSpec,
    SubspaceSpec,
    anomaly_eval_set,
    build_scenario,
)
from .metrics import KnnDatConfig, LossNormalizer, knn_dat, knn_dat_per_target, reconstruction_errors, roc_auc_scores
from .neuralnet import Architecture, TrainConfig, init_model, train
from .rng import substream

log = logging.getLogger(__name__)

AXES = ("hidden_dim", "bottleneck_dim", "grid", "epochs", "n_train")
MODEL_AXES = ("hidden_dim", "bottleneck_dim", "grid")
REAL_MODES = ("sample-noise", "feature-noise", "domain-shift", "anomaly")


@dataclass(frozen=True)
class RealDataSpec:
    path: str
    mode: str
    delimiter: str = ","
    feature_columns: tuple[str, ...] | None = None
    batch_column: str | None = None
    label_column: str | None = None
    top_features: int | None = 1000
    p: float = 0.0
    snr_db: float = 0.0
    source_batch: str | None = None
    n_train: int = 5000
    strict: bool = False

    def __post_init__(self):
        if self.mode not in REAL_MODES:
            raise ValueError(f"real-data mode must be one of {REAL_MODES}, got {self.mode!r}")
        if self.mode == "domain-shift" and (self.batch_column is None or self.source_batch is None):
            raise ValueError("real-data domain shift needs batch_column and source_batch")
        if self.mode == "anomaly" and self.label_column is None:
            raise ValueError("real-data anomaly mode needs label_column")


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple[int, ...]
    scenario: str
    params: NoiseSpec | ShiftSpec | AnomalySpec | RealDataSpec
    data: SubspaceSpec = SubspaceSpec(n_train=2000, n_test=2000)
    hidden_dim: int = 64
    bottleneck_dim: int = 25
    grid_bottleneck: tuple[int, ...] = ()
    activation: str = "relu"
    train: TrainConfig = TrainConfig(epochs=100)
    seeds: tuple[int, ...] = (0, 1, 2)
    export_embeddings: bool = False
    save_checkpoints: bool = False
    knn: KnnDatConfig = KnnDatConfig()
    knn_max_per_batch: int = 2000

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}, got {self.axis!r}")
        if self.scenario not in SCENARIOS + ("real",):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if (self.scenario == "real") != isinstance(self.params, RealDataSpec):
            raise ValueError("the 'real' scenario and RealDataSpec params go together")
        if not self.values:
            raise ValueError("axis values must be non-empty")
        for vals, name in ((self.values, "values"), (self.grid_bottleneck, "grid_bottleneck")):
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise ValueError(f"{name} must be strictly increasing")
            if any(int(v) != v or v < 1 for v in vals):
                raise ValueError(f"{name} must be positive integers")
        if self.axis == "grid" and not self.grid_bottleneck:
            raise ValueError("grid axis needs grid_bottleneck values")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be a non-empty list of distinct integers")

    def architectures(self, n_features: int) -> list[tuple[tuple[int, ...], Architecture]]:
        def arch(h, b):
            return Architecture(n_features, h, b, self.activation)

        if self.axis == "hidden_dim":
            return [((v,), arch(v, self.bottleneck_dim)) for v in self.values]
        if self.axis == "bottleneck_dim":
            return [((v,), arch(self.hidden_dim, v)) for v in self.values]
        if self.axis == "grid":
            return [((h, b), arch(h, b)) for h in self.values for b in self.grid_bottleneck]
        return [((v,), arch(self.hidden_dim, self.bottleneck_dim)) for v in self.values]

    @property
    def scenario_hash(self) -> str:
        """Digest of everything except the swept values and the seed list."""
        payload = _jsonable({
            "scenario": self.scenario, "params": self.params, "data": replace(self.data, seed=0),
            "hidden_dim": self.hidden_dim, "bottleneck_dim": self.bottleneck_dim,
            "activation": self.activation, "train": replace(self.train, seed=0), "axis": self.axis,
        })
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def run_keys(self) -> list[RunKey]:
        h = self.scenario_hash
        if self.axis == "epochs":
            return [RunKey(h, (max(self.values),), s) for s in self.seeds]
        if self.axis == "grid":
            xs = [(a, b) for a in self.values for b in self.grid_bottleneck]
        else:
            xs = [(v,) for v in self.values]
        return [RunKey(h, x, s) for s in self.seeds for x in xs]


def _jsonable(obj):
    if is_dataclass(obj):
        return {k: _jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


@dataclass(frozen=True, order=True)
class RunKey:
    scenario_hash: str
    x: tuple[int, ...]
    seed: int

    @property
    def run_id(self) -> str:
        return f"{self.scenario_hash}_{'x'.join(map(str, self.x))}_s{self.seed}"


@dataclass
class RunResult:
    key: RunKey
    status: str = "ok"
    error: str = ""
    hidden_dim: int = 0
    bottleneck_dim: int = 0
    epochs: int = 0
    n_train: int = 0
    raw_train_mse: float = math.nan
    raw_test_mse: float = math.nan
    train_loss: float = math.nan
    test_loss: float = math.nan
    extra: dict[str, float] = field(default_factory=dict)
    epoch_curve: list[tuple[int, float, float]] = field(default_factory=list)
    wall_seconds: float = 0.0
    embeddings: dict[str, np.ndarray] = field(default_factory=dict)
    params: np.ndarray | None = None


@dataclass
class Realization:
    train: Dataset
    test: Dataset
    extra_tests: dict[str, Dataset] = field(default_factory=dict)
    auc_set: Dataset | None = None
    # batch-labelled sets pooled for KNN-DAT (source first)
    knn_sets: list[Dataset] = field(default_factory=list)
    knn_source: int = 0


@functools.lru_cache(maxsize=4)
def _load_real(params: RealDataSpec) -> realdata.TabularDataset:
    schema = realdata.CsvSchema(
        feature_columns=params.feature_columns, batch_column=params.batch_column,
        label_column=params.label_column, delimiter=params.delimiter, strict=params.strict,
    )
    ds = realdata.load_csv(params.path, schema)
    if params.top_features and params.top_features < ds.matrix.shape[1]:
        ds = realdata.select_top_features(ds, params.top_features)
    return ds


@functools.lru_cache(maxsize=4)
def realize(scenario: str, params, data: SubspaceSpec, seed: int) -> Realization:
    """Dataset realization shared by every run of one seed."""
    if scenario != "real":
        spec = replace(data, seed=seed)
        train_ds, test_ds = build_scenario(spec, scenario, params)
        if scenario == "anomaly":
            pool = anomaly_eval_set(spec, params)
            outliers = pool.take(np.flatnonzero(pool.flags == Flag.ANOMALY))
            return Realization(train_ds, test_ds, {"anomaly": outliers}, auc_set=pool)
        if scenario == "domain-shift":
            return Realization(train_ds, test_ds, knn_sets=[train_ds, test_ds])
        return Realization(train_ds, test_ds)

    table = _load_real(params)
    if params.mode == "domain-shift":
        source, targets = realdata.split_source_target(table, params.source_batch)
        target_sets = {table.batch_names[b]: t.to_dataset() for b, t in targets.items()}
        pooled = realdata.concat(list(targets.values())).to_dataset()
        src = source.to_dataset()
        if params.p > 0:
            src = realdata.add_sample_noise(src, params.p, params.snr_db, seed)
        return Realization(src, pooled, {f"target:{k}": v for k, v in target_sets.items()},
                           knn_sets=[src] + list(target_sets.values()),
                           knn_source=source.batch_label[0] if source.n_rows else 0)

    tr, te = realdata.train_test_split(table, params.n_train, seed)
    train_ds, test_ds = tr.to_dataset(), te.to_dataset()
    if params.mode == "sample-noise":
        train_ds = realdata.add_sample_noise(train_ds, params.p, params.snr_db, seed)
    elif params.mode == "feature-noise":
        train_ds = realdata.add_feature_noise(train_ds, params.p, params.snr_db, seed)
    else:
        clean = test_ds.take(np.flatnonzero(test_ds.flags != Flag.ANOMALY))
        outliers = test_ds.take(np.flatnonzero(test_ds.flags == Flag.ANOMALY))
        return Realization(train_ds, clean, {"anomaly": outliers}, auc_set=test_ds)
    return Realization(train_ds, test_ds)


def _subsample(ds: Dataset, cap: int, seed: int, tag: int) -> np.ndarray:
    if ds.n_rows <= cap:
        return ds.samples
    rows = np.sort(substream(seed, "knn-subsample", tag).choice(ds.n_rows, cap, replace=False))
    return ds.samples[rows]


def execute_run(spec: SweepSpec, key: RunKey) -> RunResult:
    """Train and evaluate one (axis value, seed) cell. Never raises."""
    try:
        return _execute(spec, key)
    except Exception as exc:  # report-and-continue
        log.warning("run %s failed: %s\n%s", key.run_id, exc, traceback.format_exc())
        return RunResult(key, status="failed", error=f"{type(exc).__name__}: {exc}")


def _execute(spec: SweepSpec, key: RunKey) -> RunResult:
    data = spec.data
    if spec.axis == "n_train" and spec.scenario != "real":
        data = replace(data, n_train=max(spec.values))
    real = realize(spec.scenario, spec.params, data, key.seed)

    train_ds = real.train
    n_train = train_ds.n_rows
    if spec.axis == "n_train":
        n_train = key.x[0]
        train_ds = train_ds.head(n_train)

    arch = dict(spec.architectures(train_ds.n_features))[
        key.x if spec.axis in MODEL_AXES else (spec.values[0],)
    ]
    cfg = replace(spec.train, seed=key.seed)
    if spec.axis == "epochs":
        cfg = replace(cfg, epochs=key.x[0], eval_period=1)

    embed_sets: dict[str, np.ndarray] = {}
    if spec.export_embeddings:
        embed_sets = {"train": train_ds.samples, "test": real.test.samples}
    knn_inputs = []
    if real.knn_sets:
        knn_inputs = [_subsample(d, spec.knn_max_per_batch, key.seed, i) for i, d in enumerate(real.knn_sets)]
        for i, x in enumerate(knn_inputs):
            embed_sets[f"knn{i}"] = x

    model = init_model(arch, key.seed)
    rec = train(model, train_ds, real.test, cfg, embed_sets)

    result = RunResult(
        key, hidden_dim=arch.hidden_dim, bottleneck_dim=arch.bottleneck_dim, epochs=cfg.epochs,
        n_train=n_train, raw_train_mse=rec.final_train_mse, raw_test_mse=rec.final_test_mse,
        train_loss=rec.final_train_loss, test_loss=rec.final_test_loss, wall_seconds=rec.wall_seconds,
    )
    if spec.axis == "epochs":
        tr_norm = LossNormalizer.from_data(train_ds)
        te_norm = LossNormalizer.from_data(real.test)
        wanted = set(spec.values)
        result.epoch_curve = [
            (e, tr_norm.normalize(a), te_norm.normalize(b))
            for e, a, b in zip(rec.eval_epochs, rec.train_mse, rec.test_mse) if e in wanted
        ]
    for name, ds in real.extra_tests.items():
        if ds.n_rows:
            raw = float(np.mean(reconstruction_errors(model, ds.samples)))
            result.extra[f"test_loss[{name}]"] = LossNormalizer.from_data(ds).normalize(raw)
    if real.auc_set is not None:
        errs = reconstruction_errors(model, real.auc_set.samples)
        result.extra["roc_auc"] = roc_auc_scores(errs, real.auc_set.flags == Flag.ANOMALY)
    if knn_inputs:
        emb = np.vstack([rec.embeddings.pop(f"knn{i}") for i in range(len(knn_inputs))])
        labels = np.concatenate([np.full(len(x), i) for i, x in enumerate(knn_inputs)])
        result.extra["knn_dat"] = knn_dat(emb, labels, spec.knn)
        if len(knn_inputs) > 2:
            for target, value in knn_dat_per_target(emb, labels, 0, spec.knn).items():
                result.extra[f"knn_dat[{target}]"] = value
    if spec.export_embeddings:
        result.embeddings = rec.embeddings
    if spec.save_checkpoints:
        result.params = model.flat.copy()
    return result


def schedule(spec: SweepSpec, runs: Iterable[RunKey], parallelism: int = 1) -> Iterator[RunResult]:
    """Execute runs with at most ``parallelism`` workers, yielding as they finish."""
    runs = list(runs)
    if parallelism < 1:
        raise ValueError("parallelism must be at least 1")
    if len(set(runs)) != len(runs):
        raise ValueError("duplicate run keys")
    if parallelism == 1:
        for key in runs:
            yield execute_run(spec, key)
        return

    suspects = []
    with ProcessPoolExecutor(max_workers=min(parallelism, len(runs))) as pool:
        futures = {pool.submit(execute_run, spec, k): k for k in runs}
        for fut in as_completed(futures):
            key = futures[fut]
            try:
                yield fut.result()
            except BrokenProcessPool:
                suspects.append(key)  # culprit or collateral of the same crash
            except Exception as exc:
                yield RunResult(key, status="failed", error=f"{type(exc).__name__}: {exc}")
    # rerun each affected key alone so only the crashing one is blamed
    for key in sorted(suspects, key=runs.index):
        with ProcessPoolExecutor(max_workers=1) as pool:
            try:
                yield pool.submit(execute_run, spec, key).result()
            except BrokenProcessPool:
                yield RunResult(key, status="failed", error="worker process crashed")
            except Exception as exc:
                yield RunResult(key, status="failed", error=f"{type(exc).__name__}: {exc}")


@dataclass
class CurveRow:
    x: tuple[int, ...]
    stats: dict[str, tuple[float, float]]
    n_seeds: int


@dataclass
class CurveTable:
    """Seed-aggregated losses (normalized) along one axis.

    ``stats`` maps a metric name (``train_loss``, ``test_loss``, plus any
    extras such as ``roc_auc``) to ``(mean, standard error)``.
    """

    axis: str
    rows: list[CurveRow]

    @property
    def x_names(self) -> list[str]:
        return ["hidden_dim", "bottleneck_dim"] if self.axis == "grid" else [self.axis]

    @property
    def metrics(self) -> list[str]:
        names: list[str] = []
        for row in self.rows:
            names += [m for m in row.stats if m not in names]
        base = [m for m in ("train_loss", "test_loss") if m in names]
        return base + sorted(m for m in names if m not in base)

    def x(self) -> np.ndarray:
        return np.array([r.x[0] for r in self.rows], dtype=np.float64)

    def mean(self, metric: str = "test_loss") -> np.ndarray:
        return np.array([r.stats.get(metric, (math.nan, math.nan))[0] for r in self.rows])

    def stderr(self, metric: str = "test_loss") -> np.ndarray:
        return np.array([r.stats.get(metric, (math.nan, math.nan))[1] for r in self.rows])

    def matrix(self, metric: str = "test_loss") -> tuple[list[int], list[int], np.ndarray]:
        """Grid results as (hidden values, bottleneck values, mean matrix)."""
        hs = sorted({r.x[0] for r in self.rows})
        bs = sorted({r.x[1] for r in self.rows})
        out = np.full((len(hs), len(bs)), math.nan)
        for r in self.rows:
            out[hs.index(r.x[0]), bs.index(r.x[1])] = r.stats.get(metric, (math.nan,))[0]
        return hs, bs, out

    def to_csv(self, path: str | Path) -> None:
        metrics = self.metrics
        header = list(self.x_names)
        for m in metrics:
            header += [f"mean_{m}", f"stderr_{m}"]
        header.append("n_seeds")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in self.rows:
                line = list(r.x)
                for m in metrics:
                    mu, se = r.stats.get(m, (math.nan, math.nan))
                    line += [repr(mu), repr(se)]
                line.append(r.n_seeds)
                w.writerow(line)

    @classmethod
    def from_csv(cls, path: str | Path) -> CurveTable:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            n_x = header.index(next(h for h in header if h.startswith("mean_")))
            axis = "grid" if n_x == 2 else header[0]
            metrics = [h[5:] for h in header[n_x:-1] if h.startswith("mean_")]
            rows = []
            for line in reader:
                x = tuple(int(float(v)) for v in line[:n_x])
                stats = {}
                for i, m in enumerate(metrics):
                    stats[m] = (float(line[n_x + 2 * i]), float(line[n_x + 2 * i + 1]))
                rows.append(CurveRow(x, stats, int(line[-1])))
        return cls(axis, rows)


def _mean_se(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(np.mean(arr))
    se = float(np.std(arr, ddof=1) / math.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return mean, se


def aggregate(spec: SweepSpec, results: Iterable[RunResult]) -> CurveTable:
    """Pure fold of keyed run results into a curve; order-independent."""
    ok = sorted((r for r in results if r.status == "ok"), key=lambda r: r.key)
    samples: dict[tuple[int, ...], dict[str, list[float]]] = {}

    def add(x, metric, value):
        if isinstance(value, float) and not math.isnan(value):
            samples.setdefault(x, {}).setdefault(metric, []).append(value)

    for r in ok:
        if spec.axis == "epochs":
            for epoch, tr, te in r.epoch_curve:
                add((epoch,), "train_loss", tr)
                add((epoch,), "test_loss", te)
            continue
        add(r.key.x, "train_loss", r.train_loss)
        add(r.key.x, "test_loss", r.test_loss)
        for m, v in r.extra.items():
            add(r.key.x, m, float(v))

    rows = []
    for x in sorted(samples):
        stats = {m: _mean_se(v) for m, v in samples[x].items()}
        n = max(len(v) for v in samples[x].values())
        rows.append(CurveRow(x, stats, n))
    return CurveTable(spec.axis, rows)


def collect(spec: SweepSpec, parallelism: int = 1) -> tuple[CurveTable, list[RunResult]]:
    results = list(schedule(spec, spec.run_keys(), parallelism))
    results.sort(key=lambda r: r.key)
    return aggregate(spec, results), results


def run_model_wise(spec: SweepSpec, parallelism: int = 1) -> CurveTable:
    if spec.axis not in MODEL_AXES:
        raise ValueError(f"model-wise sweep needs axis in {MODEL_AXES}, got {spec.axis!r}")
    return collect(spec, parallelism)[0]


def run_epoch_wise(spec: SweepSpec, parallelism: int = 1) -> CurveTable:
    if spec.axis != "epochs":
        raise ValueError("epoch-wise sweep needs axis='epochs'")
    return collect(spec, parallelism)[0]


def run_sample_wise(spec: SweepSpec, parallelism: int = 1) -> CurveTable:
    if spec.axis != "n_train":
        raise ValueError("sample-wise sweep needs axis='n_train'")
    if spec.scenario == "real":
        raise ValueError("sample-wise sweeps are defined for synthetic data only")
    return collect(spec, parallelism)[0]


RUN_COLUMNS = [
    "run_id", "scenario_hash", "axis", "hidden_dim", "bottleneck_dim", "epochs", "n_train", "seed",
    "status", "raw_train_mse", "raw_test_mse", "train_loss", "test_loss",
]


def write_runs_csv(path: str | Path, spec: SweepSpec, results: list[RunResult]) -> None:
    """One row per run; extra metric columns follow the fixed ones, sorted by name."""
    extras = sorted({m for r in results for m in r.extra})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RUN_COLUMNS + extras + ["wall_seconds", "error"])
        for r in sorted(results, key=lambda r: r.key):
            w.writerow([
                r.key.run_id, r.key.scenario_hash, spec.axis, r.hidden_dim, r.bottleneck_dim,
                r.epochs, r.n_train, r.key.seed, r.status, repr(r.raw_train_mse),
                repr(r.raw_test_mse), repr(r.train_loss), repr(r.test_loss),
            ] + [repr(float(r.extra.get(m, math.nan))) for m in extras]
              + [f"{r.wall_seconds:.3f}", r.error])


def write_embeddings(directory: str | Path, result: RunResult) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, emb in sorted(result.embeddings.items()):
        path = directory / f"{result.key.run_id}_{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"e{j}" for j in range(emb.shape[1])] + ["batch"])
            batch = 0 if name == "train" else 1
            for row in emb:
                w.writerow([repr(float(v)) for v in row] + [batch])
        written.append(path)
    return written
