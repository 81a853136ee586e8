"""Federated partitioning, splits, sub-sampling and test bootstrapping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import ChannelSet, NoiseModel, Scene, generate_scene, synthesize_channels
from .config import ExperimentConfig


def ul_features(h_ul: np.ndarray, phase_reference: bool = True,
                normalize: bool = True) -> np.ndarray:
    """Complex ``(N, L, M)`` UL grids to float32 ``(N, 2, L, M)`` real/imag maps.

    ``phase_reference`` removes the common phase (first subcarrier, first
    antenna); ``normalize`` scales every sample to unit RMS.
    """
    h = np.asarray(h_ul, dtype=np.complex128)
    if h.ndim == 2:
        h = h[None]
    if phase_reference:
        ref = h[:, :1, :1]
        mag = np.abs(ref)
        rot = np.where(mag > 0, ref.conj() / np.where(mag > 0, mag, 1.0), 1.0)
        h = h * rot
    if normalize:
        rms = np.sqrt(np.mean(np.abs(h) ** 2, axis=(1, 2), keepdims=True))
        h = h / np.where(rms > 0, rms, 1.0)
    return np.stack([h.real, h.imag], axis=1).astype(np.float32)


@dataclass
class ClientPartition:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    @property
    def size(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)


@dataclass(eq=False)
class FederatedDataset:
    """Index-based client partitions over one shared sample store."""

    samples: ChannelSet
    clients: list[ClientPartition]
    seed: int
    num_beams: int
    features: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.features is None:
            self.features = ul_features(self.samples.h_ul)

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def client_sizes(self) -> np.ndarray:
        return np.array([c.size for c in self.clients])

    def indices(self, client: int, split: str) -> np.ndarray:
        return getattr(self.clients[client], split)

    def arrays(self, client: int, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(client, split)
        return self.features[idx], self.samples.label[idx]

    def client_data(self, client: int) -> "ClientData":
        c = self.clients[client]
        return ClientData(
            client_id=client,
            X_train=self.features[c.train], y_train=self.samples.label[c.train],
            X_val=self.features[c.val], y_val=self.samples.label[c.val],
        )

    def federated_clients(self) -> list["ClientData"]:
        return [self.client_data(k) for k in range(self.num_clients)]

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "clients": [
                {"train": c.train.tolist(), "val": c.val.tolist(), "test": c.test.tolist()}
                for c in self.clients
            ],
        }

    def with_manifest(self, manifest: dict) -> "FederatedDataset":
        clients = [
            ClientPartition(*(np.asarray(c[s], dtype=np.int64) for s in ("train", "val", "test")))
            for c in manifest["clients"]
        ]
        return replace(self, clients=clients, seed=manifest.get("seed", self.seed))


@dataclass
class ClientData:
    """Training view of one client; raw data never leaves this object."""

    client_id: int
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray

    @property
    def n_train(self) -> int:
        return len(self.y_train)


def strongest_bs_rows(candidates: ChannelSet) -> np.ndarray:
    """Row index of the winning BS for every UE position, sorted by UE index.

    Strength is the best-beam DL capacity; ties go to the lowest BS id.
    """
    strength = candidates.dl_capacity.max(axis=1)
    # primary key ue, then strength descending, then bs ascending
    order = np.lexsort((candidates.client_id, -strength, candidates.ue_index))
    ue_sorted = candidates.ue_index[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = ue_sorted[1:] != ue_sorted[:-1]
    return order[first]


def split_clients(client_id: np.ndarray, num_clients: int, seed: int,
                  test_frac: float = 0.2, val_frac: float = 0.1) -> list[ClientPartition]:
    """Per client: ``test_frac`` test, then ``val_frac`` of the rest validation."""
    parts = []
    for k in range(num_clients):
        idx = np.flatnonzero(client_id == k)
        rng = np.random.default_rng([seed, 0x5B117, k])
        idx = rng.permutation(idx)
        n_test = int(round(test_frac * len(idx)))
        rest = idx[n_test:]
        n_val = int(round(val_frac * len(rest)))
        if n_val == 0 and len(rest) >= 2 and val_frac > 0:
            n_val = 1
        parts.append(ClientPartition(
            train=np.sort(rest[n_val:]), val=np.sort(rest[:n_val]), test=np.sort(idx[:n_test]),
        ))
    return parts


def partition_by_strongest_bs(candidates: ChannelSet, seed: int = 0,
                              num_clients: int | None = None,
                              test_frac: float = 0.2, val_frac: float = 0.1) -> FederatedDataset:
    """Keep one sample per UE position, from its strongest base station."""
    rows = strongest_bs_rows(candidates)
    samples = candidates.subset(rows)
    if num_clients is None:
        num_clients = int(candidates.client_id.max()) + 1
    return FederatedDataset(
        samples=samples,
        clients=split_clients(samples.client_id, num_clients, seed, test_frac, val_frac),
        seed=seed,
        num_beams=candidates.dl_capacity.shape[1],
    )


def generate_dataset(config: ExperimentConfig, seed: int, chunk: int = 128,
                     scene: Scene | None = None) -> tuple[FederatedDataset, Scene]:
    """Scene, channels and strongest-BS partition, streamed in UE chunks."""
    scene = scene or generate_scene(config, seed)
    noise = NoiseModel.from_config(config.data)
    parts = []
    for start in range(0, scene.num_ue, chunk):
        cand = synthesize_channels(scene, noise, seed, ue_indices=range(start, min(start + chunk, scene.num_ue)))
        parts.append(cand.subset(strongest_bs_rows(cand)))
    samples = ChannelSet.concatenate(parts)
    d = config.data
    ds = FederatedDataset(
        samples=samples,
        clients=split_clients(samples.client_id, scene.num_bs, seed, d.test_frac, d.val_frac),
        seed=seed,
        num_beams=scene.num_beams,
        features=ul_features(samples.h_ul, phase_reference=d.phase_reference),
    )
    return ds, scene


def subsample_train(dataset: FederatedDataset, fraction: float,
                    seed: int | None = None) -> FederatedDataset:
    """Keep a seeded ``ceil(fraction * n)`` subset of each client's train split."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    seed = dataset.seed if seed is None else seed
    clients = []
    for k, c in enumerate(dataset.clients):
        n = math.ceil(fraction * len(c.train))
        if n >= len(c.train):
            keep = c.train
        else:
            rng = np.random.default_rng([seed, 0x5AB5, k])
            keep = np.sort(rng.choice(c.train, size=n, replace=False))
        clients.append(ClientPartition(keep, c.val, c.test))
    return replace(dataset, clients=clients)


def bootstrap_test(dataset: FederatedDataset, n_draws: int = 5000,
                   rng: np.random.Generator | int = 0) -> list[np.ndarray]:
    """Per client, ``n_draws`` sample indices drawn with replacement from test."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    out = []
    for c in dataset.clients:
        if len(c.test) == 0:
            raise ValueError("bootstrap needs non-empty test sets")
        out.append(c.test[rng.integers(0, len(c.test), size=n_draws)] if n_draws else
                   np.empty(0, dtype=np.int64))
    return out
