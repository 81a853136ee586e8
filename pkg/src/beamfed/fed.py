"""Federated rounds: client selection, local training, aggregation, server step.

Server optimizers are FedAvg (``w += eta_t * U``) and FedLion, a sign-momentum
step on the sample-weighted mean client delta ``U``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .config import ExperimentConfig
from .data import ClientData
from .nn.model import CnnArch, ModelParams, SkippedClient, init_params, per_sample_nll, run_sgd, forward

logger = logging.getLogger(__name__)

FEDAVG = "fedavg"
FEDLION = "fedlion"

# RNG stream tags; every stream is keyed by (seed, tag, ...).
_TAG_INIT = 0x1417
_TAG_SELECT = 0x5E1
_TAG_CLIENT = 0xC11E


@dataclass
class FedConfig:
    """Everything the round loop needs, independent of the config file layout."""

    arch: CnnArch
    optimizer: str = FEDLION
    local_ep: int = 3
    local_bs: int = 256
    lr: float = 0.05
    lr_decay: float = 0.0
    weight_decay: float = 0.0
    server_lr: float = 1.0
    server_lr_decay: float = 0.0
    lmbda: float = 0.0
    beta1: float = 0.95
    beta2: float = 0.98
    fraction: float = 1.0
    max_rounds: int = 60
    patience: int = 5
    eval_interval: int = 1
    num_clusters: int = 1
    epsilon: float = 0.0
    seed: int = 0
    workers: int = 1
    lion_convention: str = "descent"

    @classmethod
    def from_experiment(cls, cfg: ExperimentConfig, arch: CnnArch, seed: int,
                        **overrides) -> "FedConfig":
        f = cfg.federated
        out = cls(
            arch=arch,
            optimizer=f.server_optim.lower(),
            local_ep=f.local_ep,
            local_bs=f.local_bs,
            lr=f.lr,
            lr_decay=f.fl_local_lr_decay_rate,
            weight_decay=f.fl_weight_decay,
            server_lr=f.server_lr,
            server_lr_decay=f.server_lr_decay_rate,
            lmbda=f.lmbda,
            beta1=f.beta1,
            beta2=f.beta2,
            fraction=f.frac,
            max_rounds=f.epochs,
            patience=f.fl_patience,
            eval_interval=f.eval_interval,
            num_clusters=f.clusters,
            epsilon=f.eps,
            seed=seed,
            lion_convention=f.lion_convention,
        )
        return replace(out, **overrides)


@dataclass
class ServerState:
    weights: ModelParams
    momentum: np.ndarray
    round: int = 0
    server_lr: float = 1.0
    server_lr_decay: float = 0.0
    lmbda: float = 0.0
    beta1: float = 0.95
    beta2: float = 0.98
    optimizer_kind: str = FEDLION
    lion_convention: str = "descent"

    def __post_init__(self):
        if self.optimizer_kind not in (FEDAVG, FEDLION):
            raise ValueError(f"unknown server optimizer {self.optimizer_kind!r}")
        if len(self.momentum) != len(self.weights):
            raise ValueError("momentum and weights differ in length")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.lion_convention not in ("descent", "literal"):
            raise ValueError(f"unknown lion_convention {self.lion_convention!r}")

    @property
    def lr_t(self) -> float:
        return self.server_lr / (1.0 + self.server_lr_decay * self.round)

    def copy(self) -> "ServerState":
        return replace(self, weights=self.weights.copy(), momentum=self.momentum.copy())

    @property
    def nbytes(self) -> int:
        return self.weights.values.nbytes + self.momentum.nbytes


def init_server(cfg: FedConfig, cluster: int = 0) -> ServerState:
    """Seeded initial state; cluster ``j`` draws from its own stream."""
    weights = init_params(cfg.arch, np.random.default_rng([cfg.seed, _TAG_INIT, cluster]))
    return ServerState(
        weights=weights,
        momentum=np.zeros_like(weights.values),
        server_lr=cfg.server_lr,
        server_lr_decay=cfg.server_lr_decay,
        lmbda=cfg.lmbda,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        optimizer_kind=cfg.optimizer,
        lion_convention=cfg.lion_convention,
    )


@dataclass(frozen=True)
class RoundPlan:
    participating: tuple[int, ...]
    fraction: float
    total_clients: int


@dataclass
class ClientUpdate:
    client_id: int
    delta: np.ndarray
    sample_count: int
    train_loss: float = math.nan
    epochs: int = 0

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("a client update needs at least one sample")


def num_selected(total: int, fraction: float) -> int:
    # guard against 0.3 * 10 = 3.0000000000000004
    return max(1, math.ceil(round(fraction * total, 9)))


def select_clients(total: int, fraction: float, rng: np.random.Generator | int) -> RoundPlan:
    """Uniform sample of ``ceil(C*K)`` distinct client ids."""
    if total < 1:
        raise ValueError("need at least one client")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    k = num_selected(total, fraction)
    chosen = rng.choice(total, size=k, replace=False) if k < total else np.arange(total)
    return RoundPlan(tuple(int(c) for c in np.sort(chosen)), fraction, total)


def aggregate(updates: Sequence[ClientUpdate]) -> np.ndarray | None:
    """Sample-weighted mean delta, summed in ascending client-id order.

    Returns ``None`` when there is nothing to aggregate.
    """
    if not updates:
        return None
    ordered = sorted(updates, key=lambda u: u.client_id)
    size = len(ordered[0].delta)
    if any(len(u.delta) != size for u in ordered):
        raise ValueError("client deltas differ in length")
    n = sum(u.sample_count for u in ordered)
    acc = np.zeros(size, dtype=np.float64)
    for u in ordered:
        acc += (u.sample_count / n) * u.delta.astype(np.float64)
    return acc.astype(ordered[0].delta.dtype)


def fedavg_step(state: ServerState, aggregated: np.ndarray) -> ServerState:
    w = state.weights.values
    lr_t = np.asarray(state.lr_t, dtype=w.dtype)
    new = w + lr_t * aggregated.astype(w.dtype)
    return replace(state, weights=state.weights.with_values(new), round=state.round + 1)


def fedlion_step(state: ServerState, aggregated: np.ndarray) -> ServerState:
    """One FedLion server update.

    ``c = b1*m + (1-b1)*U``; ``m <- b2*m + (1-b2)*U`` (both from the old
    momentum). With the default "descent" convention the aggregated delta is
    treated as a negative pseudo-gradient, ``w <- w + eta_t*sign(c) - eta_t*lmbda*w``;
    the "literal" convention subtracts ``eta_t*(sign(c) + lmbda*w)``.
    ``sign(0) = 0``.
    """
    w = state.weights.values
    dt = w.dtype
    u = aggregated.astype(dt)
    m = state.momentum
    b1, b2 = dt.type(state.beta1), dt.type(state.beta2)
    lr_t, lam = dt.type(state.lr_t), dt.type(state.lmbda)
    c = b1 * m + (dt.type(1) - b1) * u
    direction = np.sign(c)
    if state.lion_convention == "descent":
        new_w = w - lr_t * (-direction + lam * w)
    else:
        new_w = w - lr_t * (direction + lam * w)
    new_m = b2 * m + (dt.type(1) - b2) * u
    return replace(state, weights=state.weights.with_values(new_w), momentum=new_m,
                   round=state.round + 1)


# Called as ``f(old_state, aggregated, new_state)`` after every server step;
# used for auditing, must not mutate its arguments.
STEP_OBSERVERS: list[Callable[[ServerState, np.ndarray, ServerState], None]] = []


def server_step(state: ServerState, aggregated: np.ndarray) -> ServerState:
    if state.optimizer_kind == FEDAVG:
        new = fedavg_step(state, aggregated)
    else:
        new = fedlion_step(state, aggregated)
    for observe in STEP_OBSERVERS:
        observe(state, aggregated, new)
    return new


def client_stream(seed: int, round_index: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, _TAG_CLIENT, round_index, client_id])


def selection_stream(seed: int, round_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, _TAG_SELECT, round_index])


def train_client(weights: ModelParams, client: ClientData, cfg: FedConfig,
                 rng: np.random.Generator) -> ClientUpdate | None:
    """Local SGD from a snapshot of ``weights``; ``None`` if the client is empty."""
    try:
        res = run_sgd(weights, cfg.arch, client.X_train, client.y_train, cfg.local_ep,
                      cfg.local_bs, cfg.lr, cfg.lr_decay, cfg.weight_decay, rng)
    except SkippedClient:
        return None
    delta = res.params.values - weights.values
    return ClientUpdate(client.client_id, delta, res.n_samples, res.mean_loss, res.epochs)


def train_clients(jobs: Sequence[tuple[ModelParams, ClientData]], cfg: FedConfig,
                  round_index: int) -> list[ClientUpdate]:
    """Run local training jobs, concurrently if ``cfg.workers > 1``.

    Each job has its own rng substream, so the result does not depend on the
    worker count or completion order.
    """
    def run(job):
        weights, client = job
        return train_client(weights, client, cfg, client_stream(cfg.seed, round_index, client.client_id))

    if cfg.workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    return sorted((r for r in results if r is not None), key=lambda u: u.client_id)


def run_round(server: ServerState, clients: Sequence[ClientData], plan: RoundPlan,
              cfg: FedConfig, round_index: int | None = None
              ) -> tuple[ServerState, list[ClientUpdate]]:
    """One communication round; returns the new state and the client updates.

    ``round_index`` keys the client rng streams (default: ``server.round``).
    If every selected client is empty the state is returned unchanged.
    """
    round_index = server.round if round_index is None else round_index
    by_id = {c.client_id: c for c in clients}
    jobs = [(server.weights, by_id[k]) for k in plan.participating]
    updates = train_clients(jobs, cfg, round_index)
    agg = aggregate(updates)
    if agg is None:
        logger.warning("round %d: no client had training data, skipping", server.round)
        return server, []
    return server_step(server, agg), updates


# -- evaluation and convergence ---------------------------------------------------


@dataclass
class ValStats:
    loss: np.ndarray       # per client
    accuracy: np.ndarray   # per client
    count: np.ndarray      # per client

    @property
    def mean_loss(self) -> float:
        ok = self.count > 0
        return float(self.loss[ok].mean()) if ok.any() else math.nan

    @property
    def mean_accuracy(self) -> float:
        ok = self.count > 0
        return float(self.accuracy[ok].mean()) if ok.any() else math.nan


def client_val_stats(weights: ModelParams, arch: CnnArch,
                     clients: Sequence[ClientData]) -> ValStats:
    loss, acc, cnt = [], [], []
    for c in clients:
        if len(c.y_val) == 0:
            loss.append(math.nan), acc.append(math.nan), cnt.append(0)
            continue
        nll = per_sample_nll(weights, arch, c.X_val, c.y_val)
        pred = np.argmax(forward(weights, arch, c.X_val), axis=1)
        loss.append(float(nll.mean()))
        acc.append(float(np.mean(pred == c.y_val)))
        cnt.append(len(c.y_val))
    return ValStats(np.array(loss), np.array(acc), np.array(cnt))


HISTORY_FIELDS = ("round", "cluster_id", "train_loss", "val_loss", "val_accuracy",
                  "cumulative_local_epochs", "server_lr_t")


def _weighted_train_loss(updates: Sequence[ClientUpdate]) -> float:
    n = sum(u.sample_count for u in updates)
    if n == 0:
        return math.nan
    return float(sum(u.train_loss * u.sample_count for u in updates) / n)


@dataclass
class ConvergenceTracker:
    """Early stopping on a scalar validation loss, keeping the best snapshot."""

    patience: int
    best_loss: float = math.inf
    since_best: int = 0
    best: object = None
    evaluations: int = 0

    def update(self, loss: float, snapshot: Callable[[], object]) -> bool:
        """Record one evaluation; returns True when training should stop."""
        self.evaluations += 1
        if loss < self.best_loss or self.best is None:
            self.best_loss = loss
            self.best = snapshot()
            self.since_best = 0
        else:
            self.since_best += 1
        return self.since_best >= self.patience


def train_to_convergence(server: ServerState, clients: Sequence[ClientData], cfg: FedConfig,
                         evaluate: Callable[[ServerState], ValStats] | None = None
                         ) -> tuple[ServerState, list[dict]]:
    """Rounds until the mean client validation loss stops improving.

    Validation runs every ``cfg.eval_interval`` rounds. Training stops after
    ``cfg.patience`` evaluations without improvement or at ``cfg.max_rounds``;
    the best evaluated state is returned along with one history row per round.
    """
    evaluate = evaluate or (lambda s: client_val_stats(s.weights, cfg.arch, clients))
    history: list[dict] = []
    tracker = ConvergenceTracker(cfg.patience)
    epochs_done = 0
    state = server
    start = server.round
    for r in range(cfg.max_rounds):
        plan = select_clients(len(clients), cfg.fraction, selection_stream(cfg.seed, start + r))
        lr_t = state.lr_t
        state, updates = run_round(state, clients, plan, cfg, start + r)
        epochs_done += sum(u.epochs for u in updates)
        row = {
            "round": r + 1, "cluster_id": 0, "train_loss": _weighted_train_loss(updates),
            "val_loss": math.nan, "val_accuracy": math.nan,
            "cumulative_local_epochs": epochs_done, "server_lr_t": lr_t,
        }
        history.append(row)
        if (r + 1) % cfg.eval_interval == 0 or r + 1 == cfg.max_rounds:
            stats = evaluate(state)
            row["val_loss"], row["val_accuracy"] = stats.mean_loss, stats.mean_accuracy
            if tracker.update(stats.mean_loss, state.copy):
                break
    return (tracker.best if tracker.best is not None else server), history
