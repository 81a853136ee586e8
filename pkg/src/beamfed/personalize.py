"""Per-client personalization: local baseline, fine-tuning and a two-expert MoE.

The mixture blends, per sample, the class probabilities of a purely local
expert and of the best global cluster model; a small gate CNN on the UL
channel produces the two blending weights. Experts stay frozen while the gate
trains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .config import FinetuneConfig, LocalConfig, MoeConfig
from .data import ClientData
from .nn import tensor as T
from .nn.model import (
    CnnArch,
    GateArch,
    ModelParams,
    build_graph,
    init_params,
    predict_proba,
    train_early_stopping,
)


def _record(stats: dict | None, epochs: int) -> None:
    if stats is not None:
        stats["epochs"] = epochs


def train_local_model(client: ClientData, arch: CnnArch, cfg: LocalConfig,
                      rng: np.random.Generator, stats: dict | None = None) -> ModelParams:
    """Model trained from scratch on one client's data, early-stopped on its validation split.

    If ``stats`` is given, ``stats["epochs"]`` receives the number of epochs run.
    """
    if client.n_train == 0:
        raise ValueError(f"client {client.client_id} has an empty training split")
    arch = replace(arch, dropout_rate=cfg.localdropout)
    start = init_params(arch, rng)
    _record(stats, 0)
    if cfg.loc_epochs == 0:
        return start
    best, epochs = train_early_stopping(
        start, arch, client.X_train, client.y_train, client.X_val, client.y_val,
        cfg.loc_epochs, cfg.local_patience, cfg.local_bs, cfg.local_lr,
        cfg.local_lr_decay_rate, cfg.local_weight_decay, rng,
    )
    _record(stats, epochs)
    return best


def finetune(start: ModelParams, client: ClientData, arch: CnnArch, cfg: FinetuneConfig,
             rng: np.random.Generator, stats: dict | None = None) -> ModelParams:
    """Continue SGD from ``start`` on the client's training split.

    The returned checkpoint has the lowest validation loss seen, ``start``
    included.
    """
    if start.layout != arch.layout():
        raise ValueError("start parameters do not match the architecture")
    _record(stats, 0)
    if cfg.ft_lr == 0 or client.n_train == 0:
        return start.copy()
    best, epochs = train_early_stopping(
        start, arch, client.X_train, client.y_train, client.X_val, client.y_val,
        cfg.ft_epochs, cfg.ft_patience, cfg.ft_bs, cfg.ft_lr, cfg.ft_lr_decay_rate,
        cfg.ft_weight_decay, rng,
    )
    _record(stats, epochs)
    return best.copy() if best is start else best


# -- mixture of experts ----------------------------------------------------------


@dataclass
class MoeBundle:
    local_expert: ModelParams
    global_expert: ModelParams
    gate: ModelParams
    arch: CnnArch
    gate_arch: GateArch

    def __post_init__(self):
        if self.gate_arch.num_outputs != 2:
            raise ValueError("the gate must emit exactly two logits")
        if self.gate_arch.input_shape != self.arch.input_shape:
            raise ValueError("gate and experts must share the input shape")
        for p in (self.local_expert, self.global_expert):
            if p.layout != self.arch.layout():
                raise ValueError("expert parameters do not match the expert architecture")
        if self.gate.layout != self.gate_arch.layout():
            raise ValueError("gate parameters do not match the gate architecture")

    def expert_probs(self, X: np.ndarray) -> np.ndarray:
        """Class probabilities of (local, global) experts, shape (2, N, B)."""
        return np.stack([predict_proba(self.local_expert, self.arch, X),
                         predict_proba(self.global_expert, self.arch, X)])


def make_bundle(local: ModelParams, global_: ModelParams, arch: CnnArch, gate_arch: GateArch,
                rng: np.random.Generator) -> MoeBundle:
    return MoeBundle(local.copy(), global_.copy(), init_params(gate_arch, rng), arch, gate_arch)


def gate_weights(gate: ModelParams, gate_arch: GateArch, X: np.ndarray,
                 batch_size: int = 1024) -> np.ndarray:
    out = [predict_proba(gate, gate_arch, X[s:s + batch_size]) for s in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, 2))


def mixed_probs(gates: np.ndarray, expert_probs: np.ndarray) -> np.ndarray:
    """``g0 * p_local + g1 * p_global`` per sample."""
    return np.einsum("ne,enb->nb", gates, expert_probs)


def gate_loss_and_grad(gate: ModelParams, gate_arch: GateArch, X: np.ndarray,
                       expert_probs: np.ndarray, y: np.ndarray, training: bool = False,
                       rng: np.random.Generator | None = None) -> tuple[float, np.ndarray]:
    """NLL of the mixed probability and its gradient w.r.t. the gate parameters only."""
    logits, leaves = build_graph(gate, gate_arch, X, training, rng)
    mixed = T.mix(T.softmax(logits), expert_probs)
    loss = T.nll(T.log(mixed, floor=1e-300), np.asarray(y))
    loss.backward()
    grad = np.empty_like(gate.values)
    for name, shape, off in gate.layout:
        g = leaves[name].grad
        grad[off:off + math.prod(shape)] = 0.0 if g is None else g.ravel()
    return float(loss.data), grad


def moe_loss(bundle: MoeBundle, X: np.ndarray, y: np.ndarray,
             expert_probs: np.ndarray | None = None) -> float:
    if len(y) == 0:
        return math.nan
    ep = bundle.expert_probs(X) if expert_probs is None else expert_probs
    p = mixed_probs(gate_weights(bundle.gate, bundle.gate_arch, X), ep)
    return float(-np.log(np.maximum(p[np.arange(len(y)), y], 1e-300)).mean())


def moe_train(bundle: MoeBundle, client: ClientData, cfg: MoeConfig,
              rng: np.random.Generator, stats: dict | None = None) -> MoeBundle:
    """Train the gate on the client's training split; experts are not touched.

    Early stopping keeps the gate with the lowest validation loss.
    """
    X, y = client.X_train, client.y_train
    Xv, yv = client.X_val, client.y_val
    if len(yv) == 0:
        Xv, yv = X, y
    _record(stats, 0)
    if len(y) == 0 or cfg.moe_epochs == 0:
        return bundle
    gate_arch = replace(bundle.gate_arch, dropout_rate=cfg.gate_dropout)
    ep_train = bundle.expert_probs(X)
    ep_val = bundle.expert_probs(Xv)
    best = bundle
    best_loss = moe_loss(bundle, Xv, yv, ep_val)
    w = bundle.gate.values.copy()
    layout = bundle.gate.layout
    since, step = 0, 0
    for epoch in range(cfg.moe_epochs):
        _record(stats, epoch + 1)
        order = rng.permutation(len(y))
        for s in range(0, len(y), cfg.moe_bs):
            idx = order[s:s + cfg.moe_bs]
            _, g = gate_loss_and_grad(ModelParams(w, layout), gate_arch, X[idx],
                                      ep_train[:, idx], y[idx], training=True, rng=rng)
            lr_t = cfg.moe_lr / (1.0 + cfg.moe_lr_decay_rate * step)
            w = w - np.float32(lr_t) * (g + np.float32(cfg.gate_weight_decay) * w)
            step += 1
        cand = replace(bundle, gate=ModelParams(w.copy(), layout))
        loss = moe_loss(cand, Xv, yv, ep_val)
        if loss < best_loss:
            best, best_loss, since = cand, loss, 0
        else:
            since += 1
            if since >= cfg.moe_patience:
                break
    return best


def moe_predict_proba(bundle: MoeBundle, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    return mixed_probs(gate_weights(bundle.gate, bundle.gate_arch, X), bundle.expert_probs(X))


def moe_predict(bundle: MoeBundle, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predicted beams (ties: lowest index) and mixed class probabilities."""
    p = moe_predict_proba(bundle, X)
    return np.argmax(p, axis=1), p
