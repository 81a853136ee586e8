"""IFCA: J cluster models, each client trains the one that fits it best.

Assignment is epsilon-greedy: with probability ``epsilon`` a client joins a
uniformly random cluster instead of the lowest-validation-loss one, which keeps
every cluster model fed with updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import ClientData
from .fed import (
    ConvergenceTracker,
    FedConfig,
    ServerState,
    ValStats,
    _weighted_train_loss,
    aggregate,
    init_server,
    select_clients,
    selection_stream,
    server_step,
    train_clients,
)
from .nn.model import CnnArch, ModelParams, forward, per_sample_nll

_TAG_ASSIGN = 0xA551

TRACE_FIELDS = ("round", "client_id", "chosen_cluster", "was_exploration", "val_losses")


@dataclass
class ClusterEnsemble:
    models: list[ServerState]
    assignments: np.ndarray
    epsilon: float = 0.0

    def __post_init__(self):
        if not self.models:
            raise ValueError("an ensemble needs at least one cluster model")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if np.any(self.assignments >= self.num_clusters) or np.any(self.assignments < 0):
            raise ValueError("assignment outside the cluster range")

    @property
    def num_clusters(self) -> int:
        return len(self.models)

    @property
    def storage_bytes(self) -> int:
        return sum(m.nbytes for m in self.models)

    def copy(self) -> "ClusterEnsemble":
        return replace(self, models=[m.copy() for m in self.models],
                       assignments=self.assignments.copy())


def init_ensemble(cfg: FedConfig, num_clients: int) -> ClusterEnsemble:
    """Distinct seeded initializations; cluster 0 matches :func:`init_server`."""
    models = [init_server(cfg, j) for j in range(cfg.num_clusters)]
    return ClusterEnsemble(models, np.zeros(num_clients, dtype=np.int64), cfg.epsilon)


def cluster_losses(models: Sequence[ServerState], arch: CnnArch, client: ClientData) -> np.ndarray:
    """Mean validation NLL of the client under every cluster model."""
    X, y = client.X_val, client.y_val
    if len(y) == 0:
        X, y = client.X_train, client.y_train
    if len(y) == 0:
        return np.zeros(len(models))
    return np.array([per_sample_nll(m.weights, arch, X, y).mean() for m in models])


def assignment_stream(seed: int, round_index: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, _TAG_ASSIGN, round_index, client_id])


def epsilon_greedy(losses: np.ndarray, epsilon: float, rng: np.random.Generator) -> tuple[int, bool]:
    """``(cluster, explored)``: argmin of ``losses`` or, w.p. epsilon, a random cluster."""
    j = len(losses)
    if j == 1:
        return 0, False
    if rng.random() < epsilon:
        return int(rng.integers(j)), True
    return int(np.argmin(losses)), False


def assign_cluster(client: ClientData, ensemble: ClusterEnsemble, rng: np.random.Generator,
                   arch: CnnArch) -> int:
    losses = cluster_losses(ensemble.models, arch, client) if ensemble.num_clusters > 1 else np.zeros(1)
    return epsilon_greedy(losses, ensemble.epsilon, rng)[0]


def ifca_round(ensemble: ClusterEnsemble, clients: Sequence[ClientData], cfg: FedConfig,
               round_index: int) -> tuple[ClusterEnsemble, list[dict], dict[int, list]]:
    """Assign, train and aggregate per cluster.

    Returns the new ensemble, assignment trace rows, and the client updates
    grouped by cluster. Clusters nobody joined keep their state untouched.
    """
    plan = select_clients(len(clients), cfg.fraction, selection_stream(cfg.seed, round_index))
    by_id = {c.client_id: c for c in clients}
    assignments = ensemble.assignments.copy()
    trace = []
    for k in plan.participating:
        client = by_id[k]
        if ensemble.num_clusters > 1:
            losses = cluster_losses(ensemble.models, cfg.arch, client)
        else:
            losses = np.full(1, math.nan)
        j, explored = epsilon_greedy(losses, ensemble.epsilon,
                                     assignment_stream(cfg.seed, round_index, k))
        assignments[k] = j
        trace.append({"round": round_index + 1, "client_id": k, "chosen_cluster": j,
                      "was_exploration": explored, "val_losses": losses.tolist()})

    models = list(ensemble.models)
    grouped: dict[int, list] = {}
    for j in range(ensemble.num_clusters):
        members = [k for k in plan.participating if assignments[k] == j]
        if not members:
            grouped[j] = []
            continue
        jobs = [(models[j].weights, by_id[k]) for k in members]
        updates = train_clients(jobs, cfg, round_index)
        grouped[j] = updates
        agg = aggregate(updates)
        if agg is not None:
            models[j] = server_step(models[j], agg)
    return replace(ensemble, models=models, assignments=assignments), trace, grouped


def ensemble_val_stats(ensemble: ClusterEnsemble, arch: CnnArch,
                       clients: Sequence[ClientData]) -> tuple[ValStats, np.ndarray, np.ndarray]:
    """Per client: stats under its best cluster, that cluster, and all losses."""
    J = ensemble.num_clusters
    loss = np.full((len(clients), J), math.nan)
    acc = np.full((len(clients), J), math.nan)
    cnt = np.zeros(len(clients), dtype=np.int64)
    for i, c in enumerate(clients):
        if len(c.y_val) == 0:
            continue
        cnt[i] = len(c.y_val)
        for j, m in enumerate(ensemble.models):
            loss[i, j] = per_sample_nll(m.weights, arch, c.X_val, c.y_val).mean()
            acc[i, j] = np.mean(np.argmax(forward(m.weights, arch, c.X_val), axis=1) == c.y_val)
    best = np.zeros(len(clients), dtype=np.int64)
    ok = cnt > 0
    best[ok] = np.argmin(loss[ok], axis=1)
    rows = np.arange(len(clients))
    stats = ValStats(loss[rows, best], acc[rows, best], cnt)
    return stats, best, loss


def train_ifca(ensemble: ClusterEnsemble, clients: Sequence[ClientData], cfg: FedConfig
               ) -> tuple[ClusterEnsemble, list[dict], list[dict]]:
    """IFCA rounds with early stopping on the mean best-cluster validation loss.

    Returns the best ensemble, history rows (one per cluster per round) and
    the assignment trace.
    """
    history, trace = [], []
    tracker = ConvergenceTracker(cfg.patience)
    epochs_done = 0
    ens = ensemble
    for r in range(cfg.max_rounds):
        lr_ts = [m.lr_t for m in ens.models]
        ens, tr, grouped = ifca_round(ens, clients, cfg, r)
        trace.extend(tr)
        epochs_done += sum(u.epochs for ups in grouped.values() for u in ups)
        rows = [{
            "round": r + 1, "cluster_id": j, "train_loss": _weighted_train_loss(grouped[j]),
            "val_loss": math.nan, "val_accuracy": math.nan,
            "cumulative_local_epochs": epochs_done, "server_lr_t": lr_ts[j],
        } for j in range(ens.num_clusters)]
        history.extend(rows)
        if (r + 1) % cfg.eval_interval == 0 or r + 1 == cfg.max_rounds:
            stats, best, _ = ensemble_val_stats(ens, cfg.arch, clients)
            for j, row in enumerate(rows):
                mine = (best == j) & (stats.count > 0)
                if mine.any():
                    row["val_loss"] = float(stats.loss[mine].mean())
                    row["val_accuracy"] = float(stats.accuracy[mine].mean())
            if tracker.update(stats.mean_loss, ens.copy):
                break
    return (tracker.best if tracker.best is not None else ensemble), history, trace


def best_cluster_model(ensemble: ClusterEnsemble, client: ClientData,
                       arch: CnnArch) -> tuple[int, ModelParams]:
    """Cluster with the lowest validation loss (ties: lowest id) and a copy of its weights."""
    losses = cluster_losses(ensemble.models, arch, client)
    j = int(np.argmin(losses))
    return j, ensemble.models[j].weights.copy()
