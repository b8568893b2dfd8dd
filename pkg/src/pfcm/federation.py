"""FedAvg simulation: local training, delta aggregation, global update."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn_core
from .dataset import ClientDataset
from .exceptions import DataError
from .nn_core import CnnSpec, FlatWeights


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters shared by every training phase."""

    rounds: int = 50
    local_epochs: int = 1
    lr: float = 0.1
    momentum: float = 0.5
    server_lr: float = 1.0
    batch_size: int | None = None
    weighted: bool = False  # sample-count weighting instead of plain 1/m
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.server_lr < 0:
            raise ValueError("server_lr must be >= 0")


@dataclass
class GlobalModelState:
    weights: FlatWeights
    round: int = 0
    server_lr: float = 1.0


@dataclass
class ClientUpdate:
    client_id: str
    delta: FlatWeights
    num_samples: int
    loss: float = float("nan")


@dataclass
class RoundReport:
    round: int
    loss: float
    accuracy: float
    client_losses: dict[str, float] = field(default_factory=dict)
    model: str = "global"


def local_train(global_weights: FlatWeights, client: ClientDataset, spec: CnnSpec,
                cfg: TrainConfig = TrainConfig(), epochs: int | None = None) -> ClientUpdate:
    """Train a copy of ``global_weights`` on one client; the optimizer starts fresh."""
    epochs = cfg.local_epochs if epochs is None else epochs
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    X, y = client.arrays()
    if len(y) == 0:
        raise DataError(f"client {client.client_id} has no samples")
    trained, losses = nn_core.train_epochs(global_weights, spec, X, y, epochs,
                                           lr=cfg.lr, momentum=cfg.momentum,
                                           batch_size=cfg.batch_size, seed=cfg.seed)
    delta = global_weights.replace(trained.values - global_weights.values)
    return ClientUpdate(client.client_id, delta, len(y), losses[0])


def aggregate(updates: list[ClientUpdate], weighted: bool = False) -> FlatWeights:
    """Mean of client deltas, summed in ascending client_id order."""
    if not updates:
        raise ValueError("cannot aggregate an empty update list")
    ordered = sorted(updates, key=lambda u: u.client_id)
    first = ordered[0].delta
    total = np.zeros_like(first.values)
    if weighted:
        n = sum(u.num_samples for u in ordered)
        for u in ordered:
            first.check_compatible(u.delta)
            total += (u.num_samples / n) * u.delta.values
        return first.replace(total)
    for u in ordered:
        first.check_compatible(u.delta)
        total += u.delta.values
    return first.replace(total / len(ordered))


def apply_update(state: GlobalModelState, mean_delta: FlatWeights) -> GlobalModelState:
    state.weights.check_compatible(mean_delta)
    weights = state.weights.replace(state.weights.values + state.server_lr * mean_delta.values)
    return GlobalModelState(weights, state.round + 1, state.server_lr)


def probe(weights: FlatWeights, clients, spec: CnnSpec) -> tuple[float, float, dict[str, float]]:
    """Mean per-client loss and pooled accuracy of ``weights`` on ``clients``."""
    losses, correct, total = {}, 0, 0
    for c in clients:
        X, y = c.arrays()
        logits = nn_core.forward(weights, spec, X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        losses[c.client_id] = float(-logp[np.arange(len(y)), y].mean())
        correct += int(np.count_nonzero(np.argmax(logits, axis=1) == y))
        total += len(y)
    return float(np.mean(list(losses.values()))), correct / total, losses


def run_fedavg(clients, spec: CnnSpec, cfg: TrainConfig = TrainConfig(),
               initial: FlatWeights | None = None, start_round: int = 0,
               model_name: str = "global", report: bool = True):
    """Run ``cfg.rounds`` FedAvg rounds with every client participating.

    Starts from ``initial`` (or a fresh model seeded by ``cfg.seed``).
    Returns ``(GlobalModelState, [RoundReport, ...])``.
    """
    clients = sorted(clients, key=lambda c: c.client_id)
    if not clients:
        raise DataError("run_fedavg needs at least one client")
    if initial is None:
        initial = nn_core.init_weights(spec, cfg.seed)
    state = GlobalModelState(initial, start_round, cfg.server_lr)
    reports = []
    for _ in range(cfg.rounds):
        updates = [local_train(state.weights, c, spec, cfg) for c in clients]
        state = apply_update(state, aggregate(updates, cfg.weighted))
        if report:
            loss, acc, per_client = probe(state.weights, clients, spec)
            reports.append(RoundReport(state.round, loss, acc, per_client, model_name))
    return state, reports
