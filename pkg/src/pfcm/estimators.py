"""scikit-learn style wrappers around the federated pipeline.

Rows of ``X`` are samples; ``groups`` gives the client (subject) id of each
row, which is how the federated estimators know who owns what.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import nn_core
from .cluster_fl import agglomerate, cut, pairwise_distance, parse_cut
from .config import ExperimentConfig
from .dataset import NUM_FEATURES, ClientDataset, NormStats, scale_features, to_matrix
from .experiment import train_pfcm
from .federation import run_fedavg
from .personalization import find_nearest_cluster, register_client


class MatrixPreprocessor(TransformerMixin, BaseEstimator):
    """Min-max scale 80 raw features and lay them out as 1x9x9 images."""

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != NUM_FEATURES:
            raise ValueError(f"expected {NUM_FEATURES} features, got {X.shape[1]}")
        self.stats_ = NormStats(X.min(axis=0), X.max(axis=0))
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        out = np.empty((len(X), 1, 9, 9))
        for i, row in enumerate(X):
            out[i, 0] = to_matrix(scale_features(row, self.stats_)[0])
        return out


def _as_images(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2 and X.shape[1] == 81:
        X = X.reshape(-1, 9, 9)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1:] != (1, 9, 9):
        raise ValueError(f"expected (n, 1, 9, 9) images, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or infinity")
    return X


def _clients(X, y, groups):
    X = _as_images(X)
    y = np.asarray(y, dtype=int)
    groups = np.asarray(groups).astype(str)
    if not len(X) == len(y) == len(groups):
        raise ValueError("X, y and groups must have the same length")
    return [ClientDataset(g, X[groups == g], y[groups == g]) for g in np.unique(groups)]


class _FederatedBase(ClassifierMixin, BaseEstimator):
    def _config(self, **extra) -> ExperimentConfig:
        params = dict(classes=self.n_classes, rounds=self.rounds, local_epochs=self.local_epochs,
                      lr=self.learning_rate, momentum=self.momentum, server_lr=self.server_lr,
                      conv1_channels=self.conv1_channels, conv2_channels=self.conv2_channels,
                      fc_hidden=self.fc_hidden, seed=self.random_state)
        params.update(extra)
        return ExperimentConfig(**params)

    def _check_labels(self, y):
        y = np.asarray(y)
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def _predict_with(self, weights, X):
        return nn_core.predict(weights, self.spec_, _as_images(X))


class FedAvgClassifier(_FederatedBase):
    """One global model trained by federated averaging across clients."""

    def __init__(self, n_classes=3, rounds=50, local_epochs=1, learning_rate=0.1, momentum=0.5,
                 server_lr=1.0, conv1_channels=10, conv2_channels=20, fc_hidden=50,
                 random_state=0):
        self.n_classes = n_classes
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.server_lr = server_lr
        self.conv1_channels = conv1_channels
        self.conv2_channels = conv2_channels
        self.fc_hidden = fc_hidden
        self.random_state = random_state

    def fit(self, X, y, groups):
        self._check_labels(y)
        cfg = self._config()
        self.spec_ = cfg.cnn_spec()
        self.classes_ = np.arange(self.n_classes)
        init = nn_core.init_weights(self.spec_, cfg.sub_seed("init"))
        state, self.history_ = run_fedavg(_clients(X, y, groups), self.spec_,
                                          cfg.train_config(self.rounds), initial=init)
        self.weights_ = state.weights
        return self

    def predict(self, X):
        check_is_fitted(self, "weights_")
        return self._predict_with(self.weights_, X)


class PFCMClassifier(_FederatedBase):
    """Personalized federated cluster models.

    ``fit`` pre-trains a global model, clusters the clients by the direction
    of their weight deltas and trains one model per cluster.  New clients are
    routed to a cluster with :meth:`register`, which needs their labels;
    ``predict`` then uses the routed model for each row's client and falls back
    to the pre-trained global model for clients it has never seen.
    """

    def __init__(self, n_classes=3, rounds=50, cluster_rounds=20, local_epochs=1,
                 learning_rate=0.1, momentum=0.5, server_lr=1.0, metric="cosine",
                 linkage="average", cut="gap", registration_rounds=None,
                 conv1_channels=10, conv2_channels=20, fc_hidden=50, random_state=0):
        self.n_classes = n_classes
        self.rounds = rounds
        self.cluster_rounds = cluster_rounds
        self.local_epochs = local_epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.server_lr = server_lr
        self.metric = metric
        self.linkage = linkage
        self.cut = cut
        self.registration_rounds = registration_rounds
        self.conv1_channels = conv1_channels
        self.conv2_channels = conv2_channels
        self.fc_hidden = fc_hidden
        self.random_state = random_state

    def fit(self, X, y, groups):
        self._check_labels(y)
        self.config_ = self._config(cluster_rounds=self.cluster_rounds, metric=self.metric,
                                    linkage=self.linkage, cut=self.cut,
                                    registration_rounds=self.registration_rounds or 0)
        self.spec_ = self.config_.cnn_spec()
        self.classes_ = np.arange(self.n_classes)
        result = train_pfcm(self.config_, _clients(X, y, groups))
        self.global_weights_ = result.global_weights
        self.clusters_ = result.clusters
        self.dendrogram_ = result.dendrogram
        self.history_ = result.reports
        self.assignment_ = dict(result.assignment)
        return self

    def register(self, X, y, groups):
        """Route each client in ``groups`` to its nearest cluster; returns the mapping."""
        check_is_fitted(self, "clusters_")
        self._check_labels(y)
        rounds = self.registration_rounds or self.local_epochs * 5
        routed = {}
        for client in _clients(X, y, groups):
            reg = register_client(client, self.global_weights_, self.spec_,
                                  self.config_.train_config(1), rounds)
            routed[client.client_id] = find_nearest_cluster(reg.delta, self.clusters_,
                                                            self.global_weights_)
        self.assignment_.update(routed)
        return routed

    def predict(self, X, groups):
        check_is_fitted(self, "clusters_")
        X = _as_images(X)
        groups = np.asarray(groups).astype(str)
        by_id = {cm.cluster_id: cm.weights for cm in self.clusters_}
        out = np.empty(len(X), dtype=int)
        for g in np.unique(groups):
            rows = groups == g
            k = self.assignment_.get(g)
            weights = self.global_weights_ if k is None else by_id[k]
            out[rows] = self._predict_with(weights, X[rows])
        return out

    def score(self, X, y, groups):
        """Register the clients, then average their per-client accuracies."""
        self.register(X, y, groups)
        y = np.asarray(y, dtype=int)
        groups = np.asarray(groups).astype(str)
        pred = self.predict(X, groups)
        return float(np.mean([np.mean(pred[groups == g] == y[groups == g])
                              for g in np.unique(groups)]))


class DeltaAgglomerativeClustering(ClusterMixin, BaseEstimator):
    """Bottom-up clustering of row vectors (typically flattened weight deltas)."""

    def __init__(self, metric="cosine", linkage="average", cut="gap"):
        self.metric = metric
        self.linkage = linkage
        self.cut = cut

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        D = pairwise_distance(X, self.metric)
        self.dendrogram_ = agglomerate(D, self.linkage)
        self.labels_ = cut(self.dendrogram_, *parse_cut(self.cut))
        self.n_clusters_ = int(self.labels_.max()) + 1
        return self
