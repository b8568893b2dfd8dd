"""Clustering clients by weight deltas and training one FedAvg model per cluster."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .federation import TrainConfig, local_train, run_fedavg
from .nn_core import CnnSpec, FlatWeights

logger = logging.getLogger(__name__)

LINKAGES = ("average", "single", "complete")
METRICS = ("cosine", "euclidean")


@dataclass
class DeltaMatrix:
    client_ids: list[str]
    deltas: list[FlatWeights]

    def matrix(self, layer: str | None = None) -> np.ndarray:
        """Stack deltas row-wise; ``layer`` keeps only slots whose name starts with it."""
        if layer is None:
            return np.stack([d.values for d in self.deltas])
        slots = [s for s in self.deltas[0].layout.slots if s.name.startswith(layer)]
        if not slots:
            raise ValueError(f"no parameters match layer prefix {layer!r}")
        return np.stack([np.concatenate([d.values[s.offset:s.offset + s.size] for s in slots])
                         for d in self.deltas])


@dataclass(frozen=True)
class Merge:
    node_a: int
    node_b: int
    distance: float
    new_node: int
    size: int


@dataclass
class Dendrogram:
    """Merge list over leaves ``0..n-1``; merge ``i`` creates node ``n + i``."""

    leaves: list[str]
    merges: list[Merge]

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    def as_tuples(self):
        return [(m.node_a, m.node_b, m.distance, m.new_node) for m in self.merges]


@dataclass
class ClusterModel:
    cluster_id: int
    member_client_ids: list[str]
    weights: FlatWeights


def compute_deltas(global_weights: FlatWeights, clients, spec: CnnSpec,
                   cfg: TrainConfig = TrainConfig()) -> DeltaMatrix:
    """One local training pass per client from the same ``global_weights``."""
    clients = sorted(clients, key=lambda c: c.client_id)
    updates = [local_train(global_weights, c, spec, cfg) for c in clients]
    return DeltaMatrix([u.client_id for u in updates], [u.delta for u in updates])


def pairwise_distance(vectors, metric: str = "cosine") -> np.ndarray:
    """Symmetric distance matrix between the rows of ``vectors``.

    Cosine distance is ``1 - a.b / (|a||b|)``; a zero-norm row sits at distance
    1 from every other row.
    """
    X = np.asarray(vectors, dtype=np.float64)
    n = X.shape[0]
    if metric == "euclidean":
        sq = np.einsum("ij,ij->i", X, X)
        D = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * X @ X.T, 0.0))
    elif metric == "cosine":
        norms = np.linalg.norm(X, axis=1)
        zero = norms == 0
        if zero.any():
            logger.warning("%d zero-norm delta(s); treated as distance 1 to all others",
                           int(zero.sum()))
        safe = np.where(zero, 1.0, norms)
        sim = (X @ X.T) / safe[:, None] / safe[None, :]
        D = 1.0 - np.clip(sim, -1.0, 1.0)
        D[zero, :] = 1.0
        D[:, zero] = 1.0
    else:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")
    D = (D + D.T) / 2
    np.fill_diagonal(D, 0.0)
    return D


def _linkage_value(D: np.ndarray, a: list[int], b: list[int], linkage: str) -> float:
    block = D[np.ix_(a, b)]
    if linkage == "single":
        return float(block.min())
    if linkage == "complete":
        return float(block.max())
    # correctly rounded sum keeps the value independent of merge history
    return math.fsum(block.ravel().tolist()) / (len(a) * len(b))


def agglomerate(distances, linkage: str = "average", leaves=None) -> Dendrogram:
    """Bottom-up agglomerative clustering on a precomputed distance matrix.

    The closest pair of active clusters merges first; ties go to the
    lexicographically smallest ``(node_a, node_b)`` with ``node_a < node_b``.
    """
    if linkage not in LINKAGES:
        raise ValueError(f"unknown linkage {linkage!r}; choose from {LINKAGES}")
    D = np.asarray(distances, dtype=np.float64)
    n = D.shape[0]
    if D.shape != (n, n):
        raise ValueError("distance matrix must be square")
    leaves = list(leaves) if leaves is not None else [str(i) for i in range(n)]

    members = {i: [i] for i in range(n)}
    # cluster-level distances among active nodes, updated on each merge
    link = {(i, j): float(D[i, j]) for i in range(n) for j in range(i + 1, n)}
    merges = []
    for step in range(n - 1):
        a, b = min(link, key=lambda k: (link[k], k))
        dist = link[(a, b)]
        new = n + step
        members[new] = members.pop(a) + members.pop(b)
        link = {k: v for k, v in link.items() if a not in k and b not in k}
        for other in members:
            if other != new:
                link[(other, new)] = _linkage_value(D, members[other], members[new], linkage)
        merges.append(Merge(a, b, dist, new, len(members[new])))
    return Dendrogram(leaves, merges)


def _labels_after(dendro: Dendrogram, n_merges: int) -> np.ndarray:
    n = dendro.n_leaves
    parent = list(range(n + len(dendro.merges)))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for m in dendro.merges[:n_merges]:
        parent[find(m.node_a)] = m.new_node
        parent[find(m.node_b)] = m.new_node
    roots = [find(i) for i in range(n)]
    # relabel clusters 0..k-1 by first appearance in leaf order
    relabel: dict[int, int] = {}
    return np.array([relabel.setdefault(r, len(relabel)) for r in roots])


def parse_cut(text: str):
    """``'gap'``, ``'k=<n>'`` or ``'tau=<x>'`` -> (criterion, value)."""
    text = text.strip()
    if text in ("gap", "largest_gap"):
        return ("largest_gap", None)
    if text.startswith("k="):
        return ("k_clusters", int(text[2:]))
    if text.startswith("tau="):
        return ("distance_threshold", float(text[4:]))
    raise ValueError(f"unknown cut criterion {text!r}")


def cut(dendro: Dendrogram, criterion: str = "largest_gap", value=None) -> np.ndarray:
    """Flat cluster labels (one per leaf) from a dendrogram.

    ``largest_gap`` keeps the merges below the largest jump between
    consecutive merge distances; with fewer than two merges everything is one
    cluster.
    """
    n = dendro.n_leaves
    dists = [m.distance for m in dendro.merges]
    if criterion == "k_clusters":
        k = int(value)
        if not 1 <= k <= max(n, 1):
            raise ValueError(f"k must lie in [1, {n}], got {k}")
        return _labels_after(dendro, n - k)
    if criterion == "distance_threshold":
        return _labels_after(dendro, sum(1 for d in dists if d <= float(value)))
    if criterion == "largest_gap":
        if len(dists) < 2:
            return _labels_after(dendro, len(dists))
        gaps = np.diff(dists)
        # np.argmax takes the first maximal gap
        return _labels_after(dendro, int(np.argmax(gaps)) + 1)
    raise ValueError(f"unknown cut criterion {criterion!r}")


def labels_to_partition(client_ids, labels) -> list[list[str]]:
    parts: dict[int, list[str]] = {}
    for cid, lab in zip(client_ids, labels):
        parts.setdefault(int(lab), []).append(cid)
    return [sorted(parts[k]) for k in sorted(parts)]


def train_clusters(partition, global_weights: FlatWeights, clients, spec: CnnSpec,
                   cfg: TrainConfig = TrainConfig(rounds=20), start_round: int = 0):
    """FedAvg within each cluster, starting from ``global_weights``.

    Returns ``(cluster_models, reports)``; each cluster's trajectory only ever
    reads its own members' data.
    """
    by_id = {c.client_id: c for c in clients}
    seen = [cid for part in partition for cid in part]
    if len(seen) != len(set(seen)) or set(seen) != set(by_id):
        raise ValueError("partition must cover every training client exactly once")
    models, reports = [], []
    for k, members in enumerate(partition):
        state, rep = run_fedavg([by_id[m] for m in members], spec, cfg,
                                initial=global_weights, start_round=start_round,
                                model_name=f"cluster{k}")
        models.append(ClusterModel(k, sorted(members), state.weights))
        reports.extend(rep)
    return models, reports
