"""Classifiers: MLP, a small LeNet5-style CNN, and a tiny MLP for toy runs.

Parameters live outside the model as an ordered list of numpy arrays
(:class:`Params`). Forward passes take them as graph Vars so that the same
code serves evaluation, SGD steps and unrolled distillation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import serialization
from .autodiff import ContractError, Graph, ShapeError, Var, conv2d, maxpool2x2, relu, softmax_cross_entropy, tanh

KINDS = ("mlp", "lenet5", "tiny-mlp")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_shape: tuple
    num_classes: int
    hidden: tuple = (500,)
    channels: tuple = (6, 16)
    kernel: int = 5
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind == "lenet5":
            self._lenet_dims()

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def _lenet_dims(self):
        if len(self.input_shape) == 2:
            c, h, w = 1, *self.input_shape
        elif len(self.input_shape) == 3:
            c, h, w = self.input_shape
        else:
            raise ShapeError(f"lenet5 needs a (C,H,W) or (H,W) input shape, got {self.input_shape}")
        k = self.kernel
        for _ in self.channels:
            h, w = h - k + 1, w - k + 1
            if h < 2 or w < 2 or h % 2 or w % 2:
                raise ShapeError(f"lenet5: input {self.input_shape} does not survive conv({k})+pool2x2 stages")
            h, w = h // 2, w // 2
        return c, h, w

    def layout(self) -> list[tuple[str, tuple]]:
        if self.kind in ("mlp", "tiny-mlp"):
            sizes = [self.input_dim, *self.hidden, self.num_classes]
            out = []
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
                out += [(f"fc{i}.weight", (a, b)), (f"fc{i}.bias", (b,))]
            return out
        c, h, w = self._lenet_dims()
        in_c = 1 if len(self.input_shape) == 2 else self.input_shape[0]
        out = []
        for i, k_out in enumerate(self.channels):
            out += [(f"conv{i}.weight", (k_out, in_c, self.kernel, self.kernel)), (f"conv{i}.bias", (k_out,))]
            in_c = k_out
        sizes = [self.channels[-1] * h * w, 120, 84, self.num_classes]
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            out += [(f"fc{i}.weight", (a, b)), (f"fc{i}.bias", (b,))]
        return out

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "hidden": list(self.hidden),
            "channels": list(self.channels),
            "kernel": self.kernel,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        d["hidden"] = tuple(d.get("hidden", (500,)))
        d["channels"] = tuple(d.get("channels", (6, 16)))
        return cls(**d)


def mlp(input_dim: int, num_classes: int = 10, hidden: int = 500) -> ModelSpec:
    return ModelSpec("mlp", (input_dim,), num_classes, hidden=(hidden,))


def tiny_mlp(input_dim: int, num_classes: int, hidden: int = 16) -> ModelSpec:
    return ModelSpec("tiny-mlp", (input_dim,), num_classes, hidden=(hidden,))


def lenet5(input_shape=(1, 28, 28), num_classes: int = 10) -> ModelSpec:
    return ModelSpec("lenet5", tuple(input_shape), num_classes)


@dataclass
class Params:
    tensors: list[np.ndarray]
    names: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.tensors)

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors)

    @property
    def layout(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.names)}

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.reshape(-1) for t in self.tensors])

    @classmethod
    def unflatten(cls, spec: ModelSpec, flat: np.ndarray) -> "Params":
        tensors, offset = [], 0
        layout = spec.layout()
        for _, shape in layout:
            n = int(np.prod(shape))
            tensors.append(np.array(flat[offset : offset + n]).reshape(shape))
            offset += n
        if offset != flat.size:
            raise ShapeError(f"flat parameter vector has {flat.size} entries, spec needs {offset}")
        return cls(tensors, [name for name, _ in layout])

    def copy(self) -> "Params":
        return Params([t.copy() for t in self.tensors], list(self.names))


@dataclass(frozen=True)
class InitDistribution:
    """Per-layer xavier-uniform weights, zero biases."""

    scheme: str = "xavier-uniform"
    dtype: str = "float64"

    def sample(self, spec: ModelSpec, seed: int) -> Params:
        if self.scheme != "xavier-uniform":
            raise ValueError(f"unknown init scheme {self.scheme!r}")
        rng = np.random.default_rng(seed)
        tensors = []
        for name, shape in spec.layout():
            if name.endswith(".bias"):
                tensors.append(np.zeros(shape, dtype=self.dtype))
                continue
            if len(shape) == 4:
                receptive = shape[2] * shape[3]
                fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
            else:
                fan_in, fan_out = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            tensors.append(rng.uniform(-limit, limit, size=shape).astype(self.dtype))
        return Params(tensors, [name for name, _ in spec.layout()])


def init(spec: ModelSpec, seed: int, dist: InitDistribution = InitDistribution()) -> Params:
    return dist.sample(spec, seed)


def _act(spec: ModelSpec, h: Var) -> Var:
    return relu(h) if spec.activation == "relu" else tanh(h)


def forward(spec: ModelSpec, weights: Sequence[Var], x: Var) -> Var:
    """Logits ``[batch, num_classes]`` for a batch ``x`` with leading batch dim."""
    batch = x.shape[0] if x.ndim else 0
    if x.ndim < 2 or int(np.prod(x.shape[1:])) != spec.input_dim:
        raise ShapeError(f"{spec.kind}: expected input [batch, {spec.input_shape}], got {x.shape}")
    if len(weights) != len(spec.layout()):
        raise ContractError(f"{spec.kind}: expected {len(spec.layout())} parameter tensors, got {len(weights)}")
    if spec.kind == "lenet5":
        shape = spec.input_shape if len(spec.input_shape) == 3 else (1, *spec.input_shape)
        h = x.reshape(batch, *shape)
        n_conv = len(spec.channels)
        for i in range(n_conv):
            w, b = weights[2 * i], weights[2 * i + 1]
            h = conv2d(h, w) + b.reshape(-1, 1, 1)
            h = maxpool2x2(_act(spec, h))
        h = h.reshape(batch, -1)
        dense = weights[2 * n_conv :]
    else:
        h = x.reshape(batch, spec.input_dim) if x.ndim != 2 else x
        dense = weights
    n_dense = len(dense) // 2
    for i in range(n_dense):
        h = h @ dense[2 * i] + dense[2 * i + 1]
        if i < n_dense - 1:
            h = _act(spec, h)
    return h


def loss(spec: ModelSpec, weights: Sequence[Var], x: Var, y_onehot: Var) -> Var:
    """Mean softmax cross-entropy over the batch."""
    if y_onehot.shape != (x.shape[0], spec.num_classes):
        raise ShapeError(f"labels {y_onehot.shape} do not match batch {x.shape[0]} x {spec.num_classes} classes")
    return softmax_cross_entropy(forward(spec, weights, x), y_onehot)


def one_hot(labels: np.ndarray, num_classes: int, dtype="float64") -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def predict_logits(spec: ModelSpec, params: Params, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    g = Graph(record=False)
    ws = [g.const(t) for t in params.tensors]
    chunks = []
    for start in range(0, len(x), batch_size):
        xb = g.const(np.asarray(x[start : start + batch_size], dtype=params.tensors[0].dtype))
        chunks.append(forward(spec, ws, xb).value)
    return np.concatenate(chunks)


def accuracy(spec: ModelSpec, params: Params, dataset) -> float:
    """Fraction of examples whose argmax logit (lowest index on ties) equals the label."""
    if len(dataset) == 0:
        raise ContractError("accuracy: empty dataset")
    logits = predict_logits(spec, params, dataset.images)
    return float(np.mean(logits.argmax(axis=1) == dataset.labels))


def save_params(path, spec: ModelSpec, params: Params) -> None:
    dtype = str(params.tensors[0].dtype)
    arrays = {name: t for name, t in zip(params.names, params.tensors)}
    serialization.save(path, arrays, {"model": spec.to_dict(), "layout": [[n, list(s)] for n, s in spec.layout()]}, dtype)


def load_params(path) -> tuple[ModelSpec, Params]:
    arrays, meta = serialization.load(path)
    spec = ModelSpec.from_dict(meta["model"])
    names = [n for n, _ in spec.layout()]
    return spec, Params([arrays[n] for n in names], names)
