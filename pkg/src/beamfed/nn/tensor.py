"""A small reverse-mode differentiation engine over numpy arrays.

Only the operations the beam classifiers and the gate need are provided.
Every op records its parents and a closure that accumulates gradients into
them; :meth:`Tensor.backward` walks the graph in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, parents: Sequence["Tensor"] = (),
                 backward: Callable[[np.ndarray], None] | None = None,
                 requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in self._parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


# -- layers ------------------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    # (N, C, H+2p, W+2p) -> (N*H*W, C*k*k)
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))       # N, C, H, W, k, k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 convolution with zero "same" padding; odd square kernels."""
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c or k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = _im2col(xp, k, h, w)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, h, w, o).transpose(0, 3, 1, 2)

    def backward(g: np.ndarray) -> None:
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if weight.requires_grad:
            weight._accumulate((g2.T @ cols).reshape(weight.shape))
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            # full correlation of the output gradient with the flipped kernel
            gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p)))
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            dx = (_im2col(gp, k, h, w) @ wflip.T).reshape(n, h, w, c)
            x._accumulate(dx.transpose(0, 3, 1, 2))

    return Tensor(np.ascontiguousarray(out), (x, weight, bias), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ W.T + b`` with ``W`` of shape (out, in)."""
    out = x.data @ weight.data.T + bias.data

    def backward(g: np.ndarray) -> None:
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ weight.data)

    return Tensor(out, (x, weight, bias), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor(x.data * mask, (x,), lambda g: x._accumulate(g * mask))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity outside training."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng stream")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return Tensor(x.data * keep, (x,), lambda g: x._accumulate(g * keep))


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor(x.data.reshape(shape[0], -1), (x,), lambda g: x._accumulate(g.reshape(shape)))


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    sm = np.exp(out)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g - sm * g.sum(axis=1, keepdims=True))

    return Tensor(out, (x,), backward)


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        x._accumulate(out * (g - (g * out).sum(axis=1, keepdims=True)))

    return Tensor(out, (x,), backward)


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    safe = np.maximum(x.data, floor) if floor > 0 else x.data
    return Tensor(np.log(safe), (x,), lambda g: x._accumulate(g / safe))


def mix(weights: Tensor, experts: np.ndarray) -> Tensor:
    """Convex mixture ``sum_e weights[:, e] * experts[e]``; experts are constants.

    ``weights`` is (N, E), ``experts`` is (E, N, B).
    """
    out = np.einsum("ne,enb->nb", weights.data, experts)
    return Tensor(out, (weights,), lambda g: weights._accumulate(np.einsum("nb,enb->ne", g, experts)))


def nll(logp: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under log-probabilities."""
    n = logp.shape[0]
    rows = np.arange(n)
    val = -logp.data[rows, labels].mean()

    def backward(g: np.ndarray) -> None:
        d = np.zeros_like(logp.data)
        d[rows, labels] = -g / n
        logp._accumulate(d)

    return Tensor(np.asarray(val, dtype=logp.dtype), (logp,), backward)
