"""Dense under-complete autoencoder ``n -> h -> b -> h -> n`` in NumPy.

All parameters live in one contiguous float64 buffer; the weight and bias
arrays are views into it. Gradients and the Adam moments use the same
layout, so an optimizer step is a handful of whole-vector operations.

Weights are stored ``(out, in)``; a layer computes ``x @ W.T + b``.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import LossNormalizer
from .rng import substream

FORMAT_VERSION = 1
ACTIVATIONS = ("relu", "tanh", "linear")
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4")


class StaleCacheError(RuntimeError):
    """A forward cache was used after the model's parameters changed."""


class NonFiniteError(FloatingPointError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden_dim: int
    bottleneck_dim: int
    activation: str = "relu"

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "bottleneck_dim"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.bottleneck_dim >= self.input_dim:
            raise ValueError(
                f"bottleneck_dim ({self.bottleneck_dim}) must be smaller than "
                f"input_dim ({self.input_dim}) for an under-complete autoencoder"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        n, h, b = self.input_dim, self.hidden_dim, self.bottleneck_dim
        return (n, h, b, h, n)

    @property
    def param_shapes(self) -> list[tuple[int, ...]]:
        dims = self.layer_dims
        shapes: list[tuple[int, ...]] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            shapes += [(fan_out, fan_in), (fan_out,)]
        return shapes

    @property
    def n_params(self) -> int:
        n, h, b = self.input_dim, self.hidden_dim, self.bottleneck_dim
        return 2 * (n * h + h * b) + 2 * h + b + n


def _views(flat: np.ndarray, shapes) -> list[np.ndarray]:
    out, offset = [], 0
    for shape in shapes:
        size = math.prod(shape)
        out.append(flat[offset:offset + size].reshape(shape))
        offset += size
    return out


class ParamVector:
    """A flat buffer plus named views shaped like the model's parameters."""

    def __init__(self, arch: Architecture, flat: np.ndarray | None = None):
        self.arch = arch
        self.flat = np.zeros(arch.n_params) if flat is None else flat
        if self.flat.shape != (arch.n_params,):
            raise ValueError(f"expected {arch.n_params} parameters, got {self.flat.shape}")
        self.arrays = _views(self.flat, arch.param_shapes)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[PARAM_NAMES.index(name)]

    def items(self):
        return zip(PARAM_NAMES, self.arrays)


class AutoencoderModel(ParamVector):
    def __init__(self, arch: Architecture, flat: np.ndarray | None = None):
        super().__init__(arch, flat)
        # bumped on every parameter update; forward caches remember it
        self.version = 0

    def check_finite(self) -> None:
        if not np.isfinite(self.flat).all():
            bad = [name for name, a in self.items() if not np.isfinite(a).all()]
            raise NonFiniteError(f"non-finite parameters in {', '.join(bad)}")

    def reconstruct(self, data: np.ndarray) -> np.ndarray:
        return forward(self, data)[0]

    def copy(self) -> AutoencoderModel:
        return AutoencoderModel(self.arch, self.flat.copy())


@dataclass
class ForwardCache:
    model_id: int
    version: int
    inputs: np.ndarray
    pre: list[np.ndarray]
    post: list[np.ndarray]

    @property
    def bottleneck(self) -> np.ndarray:
        return self.post[1]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 200
    batch_size: int = 10
    seed: int = 0
    shuffle_each_epoch: bool = True
    eval_period: int = 10

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ValueError("epochs must be a nonnegative integer")
        if self.batch_size < 1 or self.eval_period < 1:
            raise ValueError("batch_size and eval_period must be positive")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: AutoencoderModel) -> AdamState:
        return cls(np.zeros_like(model.flat), np.zeros_like(model.flat))


@dataclass
class TrainRecord:
    seed: int
    eval_epochs: list[int]
    train_mse: list[float]
    test_mse: list[float]
    initial_train_mse: float
    initial_test_mse: float
    final_train_loss: float
    final_test_loss: float
    wall_seconds: float
    embeddings: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def final_train_mse(self) -> float:
        return self.train_mse[-1] if self.train_mse else self.initial_train_mse

    @property
    def final_test_mse(self) -> float:
        return self.test_mse[-1] if self.test_mse else self.initial_test_mse


def init_model(arch: Architecture, seed: int) -> AutoencoderModel:
    """Weights uniform in ``+-1/sqrt(fan_in)``, biases zero."""
    model = AutoencoderModel(arch)
    rng = substream(seed, "init")
    for W in model.arrays[0::2]:
        bound = 1.0 / math.sqrt(W.shape[1])
        W[...] = rng.uniform(-bound, bound, size=W.shape)
    return model


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(g: np.ndarray, z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return g * (z > 0)
    if kind == "tanh":
        return g * (1.0 - a * a)
    return g


def forward(model: AutoencoderModel, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.arch.input_dim:
        raise ValueError(
            f"batch must have shape (B, {model.arch.input_dim}), got {batch.shape}"
        )
    kind = model.arch.activation
    pre, post = [], []
    a = batch
    for layer in range(4):
        W, b = model.arrays[2 * layer], model.arrays[2 * layer + 1]
        z = a @ W.T + b
        a = z if layer == 3 else _activate(z, kind)
        pre.append(z)
        post.append(a)
    return a, ForwardCache(id(model), model.version, batch, pre, post)


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff))


def backward(model: AutoencoderModel, cache: ForwardCache, target: np.ndarray,
             out: ParamVector | None = None) -> ParamVector:
    """Exact gradient of the batch-mean MSE with respect to every parameter."""
    if cache.model_id != id(model) or cache.version != model.version:
        raise StaleCacheError("forward cache does not belong to the current model parameters")
    target = np.asarray(target, dtype=np.float64)
    recon = cache.post[3]
    if target.shape != recon.shape:
        raise ValueError(f"target shape {target.shape} does not match output {recon.shape}")
    grads = out if out is not None else ParamVector(model.arch)
    kind = model.arch.activation
    g = (2.0 / recon.size) * (recon - target)
    for layer in (3, 2, 1, 0):
        a_in = cache.post[layer - 1] if layer else cache.inputs
        np.dot(g.T, a_in, out=grads.arrays[2 * layer])
        np.sum(g, axis=0, out=grads.arrays[2 * layer + 1])
        if layer:
            g = g @ model.arrays[2 * layer]
            g = _activation_grad(g, cache.pre[layer - 1], cache.post[layer - 1], kind)
    return grads


def adam_step(model: AutoencoderModel, grads: ParamVector, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place on the model and state."""
    g = grads.flat
    if g.shape != model.flat.shape or state.m.shape != g.shape:
        raise ValueError("gradient / optimizer state shape mismatch")
    if not np.isfinite(g.sum()):
        raise NonFiniteError(f"non-finite gradient at optimizer step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * g
    state.v *= b2
    state.v += (1.0 - b2) * (g * g)
    step = lr / (1.0 - b1 ** state.t)
    denom = np.sqrt(state.v / (1.0 - b2 ** state.t))
    denom += state.eps
    model.flat -= step * state.m / denom
    model.version += 1


def embed(model: AutoencoderModel, data: np.ndarray) -> np.ndarray:
    """Bottleneck activations for each row."""
    return forward(model, data)[1].bottleneck


def full_mse(model: AutoencoderModel, data: np.ndarray, chunk: int = 4096) -> float:
    total = 0.0
    for start in range(0, len(data), chunk):
        part = data[start:start + chunk]
        diff = forward(model, part)[0] - part
        total += float(np.sum(diff * diff))
    return total / data.size


def train(model: AutoencoderModel, train_set, test_set, cfg: TrainConfig,
          embed_sets: dict[str, np.ndarray] | None = None) -> TrainRecord:
    """Mini-batch Adam on reconstruction MSE of the (contaminated) train rows.

    The test set is only ever evaluated. Losses are recorded raw every
    ``eval_period`` epochs and at the final epoch; the variance-normalized
    final losses are computed once training is over.
    """
    x_train = getattr(train_set, "samples", train_set)
    x_test = getattr(test_set, "samples", test_set)
    n = model.arch.input_dim
    for name, x in (("train", x_train), ("test", x_test)):
        if x.ndim != 2 or x.shape[1] != n:
            raise ValueError(f"{name} set width {x.shape[1:]} does not match input_dim {n}")

    started = time.perf_counter()
    rng = substream(cfg.seed, "batch-order")
    state = AdamState.for_model(model)
    grads = ParamVector(model.arch)
    order = np.arange(len(x_train))
    record = TrainRecord(cfg.seed, [], [], [], full_mse(model, x_train), full_mse(model, x_test),
                         math.nan, math.nan, 0.0)

    for epoch in range(1, cfg.epochs + 1):
        if cfg.shuffle_each_epoch:
            order = rng.permutation(len(x_train))
        for start in range(0, len(order), cfg.batch_size):
            batch = x_train[order[start:start + cfg.batch_size]]
            _, cache = forward(model, batch)
            backward(model, cache, batch, out=grads)
            try:
                adam_step(model, grads, state, cfg.learning_rate)
            except NonFiniteError as exc:
                raise NonFiniteError(f"{exc} (epoch {epoch})", epoch) from None
        if epoch % cfg.eval_period == 0 or epoch == cfg.epochs:
            tr, te = full_mse(model, x_train), full_mse(model, x_test)
            if not (math.isfinite(tr) and math.isfinite(te)):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}", epoch)
            record.eval_epochs.append(epoch)
            record.train_mse.append(tr)
            record.test_mse.append(te)

    record.final_train_loss = LossNormalizer.from_data(x_train).normalize(record.final_train_mse)
    record.final_test_loss = LossNormalizer.from_data(x_test).normalize(record.final_test_mse)
    for name, data in (embed_sets or {}).items():
        record.embeddings[name] = embed(model, np.asarray(getattr(data, "samples", data)))
    record.wall_seconds = time.perf_counter() - started
    return record


def save_model(path: str | Path, model: AutoencoderModel, **seeds: int) -> None:
    """Write a self-describing ``.npz`` checkpoint."""
    arch = model.arch
    header = {
        "format_version": FORMAT_VERSION,
        "architecture": {
            "input_dim": arch.input_dim,
            "hidden_dim": arch.hidden_dim,
            "bottleneck_dim": arch.bottleneck_dim,
            "activation": arch.activation,
        },
        "seeds": {k: int(v) for k, v in seeds.items()},
        "param_names": list(PARAM_NAMES),
    }
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), params=model.flat)


def load_model(path: str | Path) -> tuple[AutoencoderModel, dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {header.get('format_version')!r}")
        arch = Architecture(**header["architecture"])
        return AutoencoderModel(arch, data["params"].astype(np.float64).copy()), header
