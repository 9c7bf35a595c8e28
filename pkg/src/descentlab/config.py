"""Experiment configuration files (YAML or JSON).

Layout::

    profile: desk               # desk | paper
    output_dir: out/fig3a
    scenario:                   # exactly one block
      sample-noise: {p: 0.9, snr_db: -15}
    data:  {latent_dim: 20, ambient_dim: 50, n_train: 2000, n_test: 2000}
    model: {hidden_dim: 64, bottleneck_dim: 25, activation: relu}
    train: {learning_rate: 0.001, epochs: 100, batch_size: 10, eval_period: 10}
    sweep: {axis: hidden_dim, values: {start: 4, stop: 200, step: 8}, seeds: [0, 1, 2]}

Anything left out is filled from the profile defaults: the full-scale
hyperparameters (``paper``) or a scaled-down version of them that fits on a
desktop CPU (``desk``).
"""

from __future__ import annotations

import copy
import difflib
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .datagen import AnomalySpec, NoiseSpec, ShiftSpec, SubspaceSpec
from .metrics import KnnDatConfig
from .neuralnet import ACTIVATIONS, TrainConfig
from .sweep import AXES, SweepSpec, RealDataSpec

PROFILES = ("desk", "paper")
SCENARIO_KEYS = ("sample-noise", "feature-noise", "domain-shift", "anomaly", "real")

_SYNTHETIC = {
    "desk": {
        "data": {"latent_dim": 20, "ambient_dim": 50, "n_train": 2000, "n_test": 2000},
        "model": {"hidden_dim": 64, "bottleneck_dim": 25, "activation": "relu"},
        "train": {"learning_rate": 0.001, "epochs": 100, "batch_size": 10,
                  "eval_period": 10, "shuffle_each_epoch": True},
        "sweep": {"values": {"start": 4, "stop": 200, "step": 8}, "seeds": [0, 1, 2]},
    },
    "paper": {
        "data": {"latent_dim": 20, "ambient_dim": 50, "n_train": 5000, "n_test": 10000},
        "model": {"hidden_dim": 64, "bottleneck_dim": 25, "activation": "relu"},
        "train": {"learning_rate": 0.001, "epochs": 200, "batch_size": 10,
                  "eval_period": 10, "shuffle_each_epoch": True},
        "sweep": {"values": {"start": 4, "stop": 500, "step": 4}, "seeds": [0, 1, 2, 3, 4]},
    },
}
_REAL = {
    "desk": {
        "model": {"hidden_dim": 500, "bottleneck_dim": 100, "activation": "relu"},
        "train": {"learning_rate": 0.001, "epochs": 100, "batch_size": 128,
                  "eval_period": 10, "shuffle_each_epoch": True},
        "sweep": {"values": {"start": 10, "stop": 500, "step": 30}, "seeds": [0, 1, 2]},
    },
    "paper": {
        "model": {"hidden_dim": 500, "bottleneck_dim": 300, "activation": "relu"},
        "train": {"learning_rate": 0.001, "epochs": 1000, "batch_size": 128,
                  "eval_period": 10, "shuffle_each_epoch": True},
        "sweep": {"values": list(range(10, 500, 10)) + list(range(500, 3001, 50)),
                  "seeds": [0, 1, 2, 3, 4]},
    },
}

_SCHEMA: dict[str, Any] = {
    "profile": None,
    "output_dir": None,
    "scenario": {
        "sample-noise": {"p": None, "snr_db": None},
        "feature-noise": {"p": None, "snr_db": None},
        "domain-shift": {"s": None, "noise": {"p": None, "snr_db": None}},
        "anomaly": {"p": None, "sar_db": None},
        "real": {k: None for k in (
            "path", "mode", "delimiter", "feature_columns", "batch_column", "label_column",
            "top_features", "p", "snr_db", "source_batch", "n_train", "strict")},
    },
    "data": {k: None for k in ("latent_dim", "ambient_dim", "n_train", "n_test")},
    "model": {k: None for k in ("hidden_dim", "bottleneck_dim", "activation")},
    "train": {k: None for k in ("learning_rate", "epochs", "batch_size", "eval_period",
                                "shuffle_each_epoch")},
    "sweep": {k: None for k in ("axis", "values", "grid_bottleneck", "seeds", "parallelism",
                                "export_embeddings", "save_checkpoints", "knn_k",
                                "knn_max_per_batch")},
}


class ConfigError(ValueError):
    """One or more problems in a configuration; ``errors`` lists them all."""

    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = errors


@dataclass(frozen=True)
class ExperimentConfig:
    profile: str
    output_dir: str
    scenario: str
    sweep: SweepSpec
    parallelism: int
    raw: dict  # fully defaulted tree; emitting it and re-validating is a fixed point

    @property
    def is_real(self) -> bool:
        return self.scenario == "real"


def _unknown_keys(tree: dict, schema: dict, prefix: str, errors: list[str]) -> None:
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if key not in schema:
            close = difflib.get_close_matches(str(key), list(schema), n=1)
            hint = f" (did you mean '{prefix}{close[0]}'?)" if close else ""
            errors.append(f"unknown key '{path}'{hint}")
        elif isinstance(schema[key], dict) and isinstance(value, dict):
            _unknown_keys(value, schema[key], path + ".", errors)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "values":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def expand_values(values) -> list[int]:
    if isinstance(values, dict):
        start, stop, step = values.get("start"), values.get("stop"), values.get("step", 1)
        if start is None or stop is None or not step or step <= 0:
            raise ValueError("range values need start, stop and a positive step")
        return list(range(int(start), int(stop) + 1, int(step)))
    if isinstance(values, (list, tuple)):
        return [int(v) for v in values]
    raise ValueError(f"values must be a list or a {{start, stop, step}} range, got {values!r}")


def load_tree(path: str | Path) -> dict:
    text = Path(path).read_text()
    tree = yaml.safe_load(text)  # JSON is valid YAML
    if not isinstance(tree, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return tree


def default_axis(command: str | None) -> str | None:
    return {"model-wise": "hidden_dim", "epoch-wise": "epochs", "sample-wise": "n_train"}.get(command or "")


def validate_tree(tree: dict, *, profile: str | None = None, command: str | None = None,
                  base_dir: Path | None = None, check_files: bool = True) -> ExperimentConfig:
    """Fill defaults and check every constraint, reporting all problems at once."""
    errors: list[str] = []
    _unknown_keys(tree, _SCHEMA, "", errors)
    if errors:
        raise ConfigError(errors)

    profile = profile or tree.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError([f"profile must be one of {PROFILES}, got {profile!r}"])
    scen_block = tree.get("scenario") or {}
    if not isinstance(scen_block, dict) or len(scen_block) != 1:
        raise ConfigError([f"exactly one scenario block required (one of {', '.join(SCENARIO_KEYS)})"])
    (scenario, sparams), = scen_block.items()
    sparams = dict(sparams or {})

    defaults = copy.deepcopy((_REAL if scenario == "real" else _SYNTHETIC)[profile])
    if scenario == "real":
        defaults.pop("data", None)
    full = _merge(defaults, {k: v for k, v in tree.items() if k in ("data", "model", "train", "sweep")})
    full["profile"] = profile
    full["output_dir"] = str(tree.get("output_dir", "out"))
    sw = full.setdefault("sweep", {})
    sw.setdefault("axis", default_axis(command) or "hidden_dim")
    if sw["axis"] == "epochs" and "values" not in (tree.get("sweep") or {}):
        sw["values"] = {"start": 1, "stop": int(full["train"]["epochs"]), "step": 1}
    if sw["axis"] == "n_train" and "values" not in (tree.get("sweep") or {}):
        top = int(full.get("data", {}).get("n_train", 2000))
        sw["values"] = {"start": max(1, top // 8), "stop": top, "step": max(1, top // 8)}
    sw.setdefault("grid_bottleneck", [])
    sw.setdefault("parallelism", 1)
    sw.setdefault("export_embeddings", False)
    sw.setdefault("save_checkpoints", False)
    sw.setdefault("knn_k", 10)
    sw.setdefault("knn_max_per_batch", 2000)

    def need(block: dict, key: str, where: str):
        if block.get(key) is None:
            errors.append(f"missing required key '{where}.{key}'")
        return block.get(key)

    params = None
    try:
        if scenario in ("sample-noise", "feature-noise"):
            p, snr = need(sparams, "p", f"scenario.{scenario}"), need(sparams, "snr_db", f"scenario.{scenario}")
            if not errors:
                params = NoiseSpec(scenario.split("-")[0], float(p), float(snr), int(full["data"]["latent_dim"]))
        elif scenario == "anomaly":
            p, sar = need(sparams, "p", "scenario.anomaly"), need(sparams, "sar_db", "scenario.anomaly")
            if not errors:
                params = AnomalySpec(float(p), float(sar), int(full["data"]["latent_dim"]))
        elif scenario == "domain-shift":
            s = need(sparams, "s", "scenario.domain-shift")
            noise = sparams.get("noise")
            nspec = None
            if noise:
                nspec = NoiseSpec("sample", float(noise.get("p", 0.0)), float(noise.get("snr_db", 0.0)),
                                  int(full["data"]["latent_dim"]))
            if not errors:
                params = ShiftSpec(float(s), nspec)
        else:
            path = need(sparams, "path", "scenario.real")
            need(sparams, "mode", "scenario.real")
            if path is not None:
                resolved = Path(path)
                if base_dir is not None and not resolved.is_absolute():
                    resolved = base_dir / resolved
                if check_files and not resolved.exists():
                    errors.append(f"scenario.real.path: file not found: {resolved}")
                sparams["path"] = str(resolved)
            if not errors:
                fc = sparams.get("feature_columns")
                sparams.setdefault("top_features", 1000)
                sparams.setdefault("delimiter", ",")
                sparams.setdefault("n_train", 5000)
                sparams.setdefault("strict", False)
                params = RealDataSpec(**{**sparams, "feature_columns": tuple(fc) if fc else None})
    except (TypeError, ValueError) as exc:
        errors.append(f"scenario.{scenario}: {exc}")

    data = None
    if scenario != "real":
        try:
            d = full["data"]
            data = SubspaceSpec(int(d["latent_dim"]), int(d["ambient_dim"]), int(d["n_train"]), int(d["n_test"]))
        except (KeyError, TypeError, ValueError) as exc:
            errors.append(f"data: {exc}")

    m, t = full["model"], full["train"]
    if m.get("activation") not in ACTIVATIONS:
        errors.append(f"model.activation must be one of {ACTIVATIONS}, got {m.get('activation')!r}")
    n_features = data.ambient_dim if data else None
    if scenario == "real" and params is not None and params.top_features:
        n_features = params.top_features
    bottlenecks = [int(m["bottleneck_dim"])]
    if sw["axis"] == "bottleneck_dim":
        bottlenecks = []
    try:
        values = expand_values(sw["values"])
        grid_b = [int(v) for v in sw.get("grid_bottleneck") or []]
        if sw["axis"] == "bottleneck_dim":
            bottlenecks = values
        elif sw["axis"] == "grid":
            bottlenecks = grid_b
    except (TypeError, ValueError) as exc:
        errors.append(f"sweep.values: {exc}")
        values, grid_b = [], []
    if n_features is not None and any(b >= n_features for b in bottlenecks):
        errors.append(
            f"bottleneck size(s) {[b for b in bottlenecks if b >= n_features]} must be smaller than "
            f"the input dimension {n_features} (under-complete autoencoder)"
        )
    if sw["axis"] not in AXES:
        errors.append(f"sweep.axis must be one of {AXES}, got {sw['axis']!r}")
    if command and default_axis(command) and sw["axis"] not in (
        ("hidden_dim", "bottleneck_dim", "grid") if command == "model-wise" else (default_axis(command),)
    ):
        errors.append(f"sweep.axis '{sw['axis']}' does not fit the '{command}' command")
    if sw["axis"] == "n_train" and data is not None and values and max(values) > data.n_train:
        errors.append(f"sweep.values exceed data.n_train ({data.n_train})")
    if int(sw["parallelism"]) < 1:
        errors.append("sweep.parallelism must be at least 1")

    train_cfg = None
    try:
        train_cfg = TrainConfig(
            learning_rate=float(t["learning_rate"]), epochs=int(t["epochs"]), batch_size=int(t["batch_size"]),
            eval_period=int(t["eval_period"]), shuffle_each_epoch=bool(t["shuffle_each_epoch"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        errors.append(f"train: {exc}")

    if errors:
        raise ConfigError(errors)
    try:
        spec = SweepSpec(
            axis=sw["axis"], values=tuple(values), scenario=scenario, params=params,
            data=data or SubspaceSpec(), hidden_dim=int(m["hidden_dim"]),
            bottleneck_dim=int(m["bottleneck_dim"]), grid_bottleneck=tuple(grid_b),
            activation=m["activation"], train=train_cfg, seeds=tuple(int(s) for s in sw["seeds"]),
            export_embeddings=bool(sw["export_embeddings"]), save_checkpoints=bool(sw["save_checkpoints"]),
            knn=KnnDatConfig(int(sw["knn_k"])), knn_max_per_batch=int(sw["knn_max_per_batch"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError([f"sweep: {exc}"]) from None

    full["scenario"] = {scenario: sparams}
    return ExperimentConfig(profile, full["output_dir"], scenario, spec, int(sw["parallelism"]), full)


def validate_config(path: str | Path, **kwargs) -> ExperimentConfig:
    path = Path(path)
    return validate_tree(load_tree(path), base_dir=path.parent, **kwargs)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.raw, sort_keys=True)
