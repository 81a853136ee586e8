"""scikit-learn style wrappers around the featurizer and the federated pipeline.

``FederatedBeamClassifier.fit(X, y, client_ids)`` treats every distinct
client id as one federated participant; ``predict`` needs the client ids
again, because each client is served by its own (cluster, fine-tuned or
mixture) model.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .cluster import best_cluster_model, init_ensemble, train_ifca
from .config import FinetuneConfig, LocalConfig, MoeConfig
from .data import ClientData, ul_features
from .fed import FedConfig
from .nn.model import CnnArch, GateArch, predict_proba
from .personalize import finetune, make_bundle, moe_predict_proba, moe_train, train_local_model


class ChannelFeaturizer(TransformerMixin, BaseEstimator):
    """Complex UL channels (N, L, M) -> real/imag maps (N, 2, L, M)."""

    def __init__(self, phase_reference: bool = True, normalize: bool = True):
        self.phase_reference = phase_reference
        self.normalize = normalize

    def fit(self, X, y=None):
        X = self._check(X)
        self.n_subcarriers_, self.n_antennas_ = X.shape[1:]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_antennas_")
        X = self._check(X)
        if X.shape[1:] != (self.n_subcarriers_, self.n_antennas_):
            raise ValueError(f"expected channels of shape (*, {self.n_subcarriers_}, {self.n_antennas_}), "
                             f"got {X.shape}")
        return ul_features(X, self.phase_reference, self.normalize)

    @staticmethod
    def _check(X):
        X = np.asarray(X)
        if X.ndim != 3 or not np.iscomplexobj(X):
            raise ValueError("expected a complex array of shape (n_samples, subcarriers, antennas)")
        if not np.all(np.isfinite(X)):
            raise ValueError("channels contain NaN or infinity")
        return X


class FederatedBeamClassifier(ClassifierMixin, BaseEstimator):
    """Clustered federated beam classifier with optional per-client personalization.

    ``personalization`` is one of ``"none"`` (best cluster model),
    ``"finetune"`` or ``"moe"``.
    """

    def __init__(self, optimizer: str = "fedlion", num_clusters: int = 2, epsilon: float = 0.2,
                 lr: float = 0.05, server_lr: float = 0.002, lmbda: float = 0.0,
                 local_ep: int = 3, local_bs: int = 256, max_rounds: int = 60, patience: int = 10,
                 conv_filters: tuple[int, int] = (8, 8), hidden_units: tuple[int, int] = (32, 32),
                 filter_size: int = 3, personalization: str = "none", finetune_lr: float = 0.03,
                 moe_lr: float = 0.05, val_fraction: float = 0.1, n_classes: int | None = None,
                 random_state: int = 0):
        self.optimizer = optimizer
        self.num_clusters = num_clusters
        self.epsilon = epsilon
        self.lr = lr
        self.server_lr = server_lr
        self.lmbda = lmbda
        self.local_ep = local_ep
        self.local_bs = local_bs
        self.max_rounds = max_rounds
        self.patience = patience
        self.conv_filters = conv_filters
        self.hidden_units = hidden_units
        self.filter_size = filter_size
        self.personalization = personalization
        self.finetune_lr = finetune_lr
        self.moe_lr = moe_lr
        self.val_fraction = val_fraction
        self.n_classes = n_classes
        self.random_state = random_state

    def _features(self, X):
        X = np.asarray(X)
        if np.iscomplexobj(X):
            X = ul_features(ChannelFeaturizer._check(X))
        X = check_array(X, allow_nd=True, dtype=np.float32)
        if X.ndim != 4 or X.shape[1] != 2:
            raise ValueError("expected features of shape (n_samples, 2, subcarriers, antennas)")
        return X

    def _split(self, X, y, ids):
        rng = np.random.default_rng([self.random_state, 0x5B117])
        clients = []
        for k in self.clients_:
            idx = rng.permutation(np.flatnonzero(ids == k))
            n_val = int(round(self.val_fraction * len(idx))) if len(idx) > 1 else 0
            val, train = idx[:n_val], idx[n_val:]
            clients.append(ClientData(len(clients), X[train], y[train], X[val], y[val]))
        return clients

    def fit(self, X, y, client_ids=None):
        if self.personalization not in ("none", "finetune", "moe"):
            raise ValueError(f"unknown personalization {self.personalization!r}")
        X = self._features(X)
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32)
        y = y.astype(np.int64)
        if np.any(y < 0):
            raise ValueError("beam labels must be non-negative integers")
        ids = np.zeros(len(y), dtype=np.int64) if client_ids is None else np.asarray(client_ids)
        if len(ids) != len(y):
            raise ValueError("client_ids and y differ in length")
        self.classes_ = np.arange(self.n_classes if self.n_classes is not None else int(y.max()) + 1)
        if y.max() >= len(self.classes_):
            raise ValueError("a label exceeds n_classes")
        self.clients_ = np.unique(ids)
        self.arch_ = CnnArch(
            conv1_filters=self.conv_filters[0], conv2_filters=self.conv_filters[1],
            filter_size=self.filter_size, fc1_units=self.hidden_units[0],
            fc2_units=self.hidden_units[1], num_classes=len(self.classes_), input_shape=X.shape[2:],
        )
        clients = self._split(X, y, ids)
        cfg = FedConfig(
            arch=self.arch_, optimizer=self.optimizer.lower(), local_ep=self.local_ep,
            local_bs=self.local_bs, lr=self.lr, server_lr=self.server_lr, lmbda=self.lmbda,
            max_rounds=self.max_rounds, patience=self.patience, num_clusters=self.num_clusters,
            epsilon=self.epsilon if self.num_clusters > 1 else 0.0, seed=self.random_state,
        )
        ens, self.history_, self.trace_ = train_ifca(init_ensemble(cfg, len(clients)), clients, cfg)
        self.ensemble_ = ens
        self.models_ = []
        for c in clients:
            j, params = best_cluster_model(ens, c, self.arch_)
            rng = np.random.default_rng([self.random_state, 0xF17E, c.client_id])
            if self.personalization == "finetune":
                params = finetune(params, c, self.arch_, FinetuneConfig(ft_lr=self.finetune_lr), rng)
            elif self.personalization == "moe":
                local = train_local_model(c, self.arch_, LocalConfig(), rng)
                gate = GateArch(input_shape=X.shape[2:])
                params = moe_train(make_bundle(local, params, self.arch_, gate, rng), c,
                                   MoeConfig(moe_lr=self.moe_lr), rng)
            self.models_.append(params)
        return self

    def predict_proba(self, X, client_ids=None):
        check_is_fitted(self, "models_")
        X = self._features(X)
        if client_ids is None:
            if len(self.clients_) != 1:
                raise ValueError("client_ids are required when several clients were fitted")
            client_ids = np.full(len(X), self.clients_[0])
        client_ids = np.asarray(client_ids)
        pos = np.searchsorted(self.clients_, client_ids)
        if np.any(pos >= len(self.clients_)) or np.any(self.clients_[np.minimum(pos, len(self.clients_) - 1)] != client_ids):
            raise ValueError("predict got a client id that was not seen in fit")
        out = np.zeros((len(X), len(self.classes_)))
        for k in np.unique(pos):
            rows = pos == k
            m = self.models_[k]
            out[rows] = (moe_predict_proba(m, X[rows]) if self.personalization == "moe"
                         else predict_proba(m, self.arch_, X[rows]))
        return out

    def predict(self, X, client_ids=None):
        return self.classes_[np.argmax(self.predict_proba(X, client_ids), axis=1)]

    def score(self, X, y, client_ids=None, sample_weight=None):
        from sklearn.metrics import accuracy_score

        return accuracy_score(y, self.predict(X, client_ids), sample_weight=sample_weight)
