"""CNN beam classifier, gate network and local SGD training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import tensor as T


class SkippedClient(Exception):
    """A client had no training data; the caller should leave it out."""


# -- architectures -------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str            # "conv" or "fc"
    shapes: tuple        # (weight shape, bias shape)


@dataclass(frozen=True, kw_only=True)
class _ConvNet:
    """Two optional conv layers, two optional hidden FC layers, one output layer."""

    def _sizes(self) -> tuple[int, int, int, int, int, float, int]:
        raise NotImplementedError

    input_shape: tuple[int, int] = (64, 4)
    in_channels: int = 2

    def layers(self) -> list[LayerSpec]:
        f1, f2, k, h1, h2, _, n_out = self._sizes()
        ls = []
        ch = self.in_channels
        for name, f in (("conv1", f1), ("conv2", f2)):
            if f > 0:
                ls.append(LayerSpec(name, "conv", ((f, ch, k, k), (f,))))
                ch = f
        width = ch * self.input_shape[0] * self.input_shape[1]
        for name, h in (("fc1", h1), ("fc2", h2)):
            if h > 0:
                ls.append(LayerSpec(name, "fc", ((h, width), (h,))))
                width = h
        ls.append(LayerSpec("out", "fc", ((n_out, width), (n_out,))))
        return ls

    @property
    def dropout(self) -> float:
        return self._sizes()[5]

    @property
    def num_outputs(self) -> int:
        return self._sizes()[6]

    def layout(self) -> tuple[tuple[str, tuple[int, ...], int], ...]:
        out, off = [], 0
        for spec in self.layers():
            for suffix, shape in zip(("w", "b"), spec.shapes):
                out.append((f"{spec.name}.{suffix}", shape, off))
                off += math.prod(shape)
        return tuple(out)

    def num_params(self) -> int:
        name, shape, off = self.layout()[-1]
        return off + math.prod(shape)


@dataclass(frozen=True)
class CnnArch(_ConvNet):
    """Beam classifier: conv, conv, FC, dropout, FC, output over ``num_classes`` beams."""

    conv1_filters: int = 8
    conv2_filters: int = 8
    filter_size: int = 3
    fc1_units: int = 32
    fc2_units: int = 32
    dropout_rate: float = 0.0
    num_classes: int = 64

    def __post_init__(self):
        counts = (self.conv1_filters, self.conv2_filters, self.filter_size,
                  self.fc1_units, self.fc2_units, self.num_classes)
        if min(counts) < 1:
            raise ValueError(f"all layer sizes must be >= 1, got {counts}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.filter_size % 2 == 0:
            raise ValueError("filter_size must be odd for same padding")

    def _sizes(self):
        return (self.conv1_filters, self.conv2_filters, self.filter_size,
                self.fc1_units, self.fc2_units, self.dropout_rate, self.num_classes)


@dataclass(frozen=True)
class GateArch(_ConvNet):
    """Small CNN emitting two mixing logits; a zero count disables a layer."""

    filters1: int = 4
    filters2: int = 0
    hidden1: int = 16
    hidden2: int = 8
    filter_size: int = 3
    dropout_rate: float = 0.0

    def __post_init__(self):
        if min(self.filters1, self.filters2, self.hidden1, self.hidden2) < 0:
            raise ValueError("gate layer sizes must be >= 0")
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise ValueError("filter_size must be a positive odd number")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    def _sizes(self):
        return (self.filters1, self.filters2, self.filter_size,
                self.hidden1, self.hidden2, self.dropout_rate, 2)


# -- parameters ----------------------------------------------------------------


@dataclass(eq=False)
class ModelParams:
    """Flat parameter vector plus ``(name, shape, offset)`` layout."""

    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...], int], ...]

    def __post_init__(self):
        total = 0
        for name, shape, off in self.layout:
            if off != total:
                raise ValueError(f"layout not contiguous at {name}")
            total += math.prod(shape)
        if self.values.ndim != 1 or len(self.values) != total:
            raise ValueError(f"parameter vector of length {self.values.shape} does not match layout ({total})")

    def __len__(self) -> int:
        return len(self.values)

    def view(self, name: str) -> np.ndarray:
        for n, shape, off in self.layout:
            if n == name:
                return self.values[off:off + math.prod(shape)].reshape(shape)
        raise KeyError(name)

    def views(self) -> dict[str, np.ndarray]:
        return {n: self.values[off:off + math.prod(s)].reshape(s) for n, s, off in self.layout}

    def copy(self) -> "ModelParams":
        return ModelParams(self.values.copy(), self.layout)

    def with_values(self, values: np.ndarray) -> "ModelParams":
        return ModelParams(np.asarray(values, dtype=self.values.dtype), self.layout)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.values.astype(dtype), self.layout)


def init_params(arch: _ConvNet, rng: np.random.Generator | int, dtype=np.float32) -> ModelParams:
    """Fan-in scaled uniform weights (ReLU gain), zero biases."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    layout = arch.layout()
    values = np.zeros(arch.num_params(), dtype=np.float64)
    for name, shape, off in layout:
        if name.endswith(".w"):
            fan_in = math.prod(shape[1:])
            bound = math.sqrt(6.0 / fan_in)
            values[off:off + math.prod(shape)] = rng.uniform(-bound, bound, size=math.prod(shape))
    return ModelParams(values.astype(dtype), layout)


def zeros_like(params: ModelParams) -> ModelParams:
    return ModelParams(np.zeros_like(params.values), params.layout)


# -- forward / backward ----------------------------------------------------------


def _check(params: ModelParams, arch: _ConvNet, batch: np.ndarray) -> np.ndarray:
    if params.layout != arch.layout():
        raise ValueError("parameter layout does not match the architecture")
    batch = np.asarray(batch)
    expected = (arch.in_channels, *arch.input_shape)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise ValueError(f"batch of shape {batch.shape} does not match input (N, {expected})")
    return batch.astype(params.values.dtype, copy=False)


def build_graph(params: ModelParams, arch: _ConvNet, batch: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None,
                requires_grad: bool = True) -> tuple[T.Tensor, dict[str, T.Tensor]]:
    """Logits tensor and the parameter leaves it was built from."""
    x = T.Tensor(_check(params, arch, batch))
    views = params.views()
    leaves = {n: T.Tensor(v, requires_grad=requires_grad) for n, v in views.items()}
    specs = arch.layers()
    flat = False
    for i, spec in enumerate(specs):
        w, b = leaves[f"{spec.name}.w"], leaves[f"{spec.name}.b"]
        if spec.kind == "conv":
            x = T.relu(T.conv2d(x, w, b))
            continue
        if not flat:
            x, flat = T.flatten(x), True
        x = T.linear(x, w, b)
        if spec.name == "out":
            break
        x = T.relu(x)
        if spec.name == "fc1" or (spec.name == "fc2" and not any(s.name == "fc1" for s in specs)):
            x = T.dropout(x, arch.dropout, rng, training)
    return x, leaves


def forward(params: ModelParams, arch: _ConvNet, batch: np.ndarray, training: bool = False,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Logits of shape (N, num_outputs). Dropout is only active when training."""
    logits, _ = build_graph(params, arch, batch, training, rng, requires_grad=False)
    return logits.data


def predict_proba(params: ModelParams, arch: _ConvNet, batch: np.ndarray,
                  batch_size: int = 1024) -> np.ndarray:
    out = []
    for s in range(0, len(batch), batch_size):
        z = forward(params, arch, batch[s:s + batch_size]).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        out.append(e / e.sum(axis=1, keepdims=True))
    if not out:
        return np.zeros((0, arch.num_outputs))
    return np.concatenate(out)


def nll_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean NLL of softmax(logits) and its gradient ``(softmax - onehot) / N``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    n, b = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= b:
        raise ValueError(f"labels must be {n} indices in [0, {b})")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def per_sample_nll(params: ModelParams, arch: _ConvNet, X: np.ndarray, y: np.ndarray,
                   batch_size: int = 1024) -> np.ndarray:
    out = []
    for s in range(0, len(y), batch_size):
        z = forward(params, arch, X[s:s + batch_size]).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        out.append(-logp[np.arange(len(z)), y[s:s + batch_size]])
    return np.concatenate(out) if out else np.zeros(0)


def mean_loss(params: ModelParams, arch: _ConvNet, X: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return math.nan
    return float(per_sample_nll(params, arch, X, y).mean())


def loss_and_grad(params: ModelParams, arch: _ConvNet, batch: np.ndarray, labels: np.ndarray,
                  training: bool = False,
                  rng: np.random.Generator | None = None) -> tuple[float, np.ndarray]:
    labels = np.asarray(labels)
    logits, leaves = build_graph(params, arch, batch, training, rng)
    if labels.shape != (logits.shape[0],) or labels.min(initial=0) < 0 or \
            labels.max(initial=0) >= logits.shape[1]:
        raise ValueError("labels out of range")
    loss = T.nll(T.log_softmax(logits), labels)
    loss.backward()
    grad = np.empty_like(params.values)
    for name, shape, off in params.layout:
        g = leaves[name].grad
        grad[off:off + math.prod(shape)] = 0.0 if g is None else g.ravel()
    return float(loss.data), grad


def backward(params: ModelParams, arch: _ConvNet, batch: np.ndarray, labels: np.ndarray,
             training: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
    """Gradient of the mean NLL w.r.t. the flat parameter vector."""
    return loss_and_grad(params, arch, batch, labels, training, rng)[1]


# -- training ------------------------------------------------------------------


@dataclass
class SgdResult:
    params: ModelParams
    n_samples: int
    mean_loss: float
    epochs: int
    steps: int = 0
    losses: list[float] = field(default_factory=list)


def _minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def sgd_epoch(params: ModelParams, arch: _ConvNet, X: np.ndarray, y: np.ndarray,
              batch_size: int, lr: float, lr_decay: float, weight_decay: float,
              rng: np.random.Generator, step: int = 0) -> tuple[ModelParams, float, int]:
    """One shuffled pass; returns (params, mean minibatch loss, next step).

    Step size ``lr / (1 + lr_decay * step)``; weight decay is decoupled from the
    loss gradient: ``w -= lr_t * (grad + weight_decay * w)``.
    """
    w = params.values.copy()
    total, count = 0.0, 0
    for idx in _minibatches(len(y), batch_size, rng):
        cur = ModelParams(w, params.layout)
        loss, g = loss_and_grad(cur, arch, X[idx], y[idx], training=True, rng=rng)
        lr_t = lr / (1.0 + lr_decay * step)
        w = w - np.asarray(lr_t, dtype=w.dtype) * (g + np.asarray(weight_decay, dtype=w.dtype) * w)
        total += loss * len(idx)
        count += len(idx)
        step += 1
    return ModelParams(w, params.layout), total / max(count, 1), step


def run_sgd(params: ModelParams, arch: _ConvNet, X: np.ndarray, y: np.ndarray, epochs: int,
            batch_size: int, lr: float, lr_decay: float, weight_decay: float,
            rng: np.random.Generator) -> SgdResult:
    if len(y) == 0:
        raise SkippedClient("no training samples")
    losses = []
    step = 0
    for _ in range(epochs):
        params, loss, step = sgd_epoch(params, arch, X, y, batch_size, lr, lr_decay,
                                       weight_decay, rng, step)
        losses.append(loss)
    mean = float(np.mean(losses)) if losses else math.nan
    return SgdResult(params, len(y), mean, epochs, step, losses)


def local_train(params: ModelParams, arch: _ConvNet, X: np.ndarray, y: np.ndarray, epochs: int,
                batch_size: int, lr: float, lr_decay: float = 0.0, weight_decay: float = 0.0,
                rng: np.random.Generator | int = 0) -> tuple[ModelParams, int]:
    """Plain minibatch SGD on one client's data; returns ``(params, n_k)``.

    Raises :class:`SkippedClient` for an empty dataset.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    res = run_sgd(params, arch, X, y, epochs, batch_size, lr, lr_decay, weight_decay, rng)
    return res.params, res.n_samples


def train_early_stopping(params: ModelParams, arch: _ConvNet, X: np.ndarray, y: np.ndarray,
                         X_val: np.ndarray, y_val: np.ndarray, max_epochs: int, patience: int,
                         batch_size: int, lr: float, lr_decay: float, weight_decay: float,
                         rng: np.random.Generator) -> tuple[ModelParams, int]:
    """SGD keeping the checkpoint with the lowest validation loss.

    The starting point counts as a checkpoint, so the returned model never
    has a higher validation loss than ``params``. Returns (best, epochs run).
    """
    if len(y) == 0:
        raise ValueError("empty training split")
    if len(y_val) == 0:
        X_val, y_val = X, y
    best = params
    best_loss = mean_loss(params, arch, X_val, y_val)
    since, step, epochs = 0, 0, 0
    for _ in range(max_epochs):
        params, _, step = sgd_epoch(params, arch, X, y, batch_size, lr, lr_decay,
                                    weight_decay, rng, step)
        epochs += 1
        loss = mean_loss(params, arch, X_val, y_val)
        if loss < best_loss:
            best, best_loss, since = params, loss, 0
        else:
            since += 1
            if since >= patience:
                break
    return best, epochs
