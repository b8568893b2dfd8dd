"""End-to-end runs: data preparation, two-step training, testing, baseline."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.metrics import adjusted_rand_score

from . import nn_core
from .cluster_fl import (ClusterModel, Dendrogram, agglomerate, compute_deltas, cut,
                         labels_to_partition, pairwise_distance, parse_cut, train_clusters)
from .config import ExperimentConfig
from .dataset import (ClientDataset, NormStats, build_clients, generate_synthetic, ledger,
                      load_csv, partition_by_subject, split_train_test)
from .exceptions import DataError
from .federation import RoundReport, run_fedavg
from .nn_core import FlatWeights
from .personalization import EvalReport, evaluate, test_all

logger = logging.getLogger(__name__)

TRAIN_PHASES = ("run_fedavg", "compute_deltas", "train_clusters")


@dataclass
class PreparedData:
    train: list[ClientDataset]
    test: list[ClientDataset]
    stats: NormStats
    groups: dict[str, int] | None = None


@dataclass
class TrainResult:
    global_weights: FlatWeights
    reports: list[RoundReport]
    dendrogram: Dendrogram
    assignment: dict[str, int]
    clusters: list[ClusterModel]


def load_records(cfg: ExperimentConfig):
    if cfg.data:
        return load_csv(cfg.data), None
    synth = generate_synthetic(cfg.synthetic_spec())
    return synth.records, synth.groups


def prepare_data(cfg: ExperimentConfig, records=None, groups=None) -> PreparedData:
    """Split subjects, fit normalization on the training split only, build clients."""
    if records is None:
        records, groups = load_records(cfg)
    partition = partition_by_subject(records)
    train_ids, test_ids = split_train_test(list(partition), cfg.split_fraction,
                                           cfg.sub_seed("split"))
    if not train_ids:
        raise DataError("training split is empty")
    stats = NormStats.fit([r for sid in train_ids for r in partition[sid]])
    scheme = cfg.label_scheme()
    train = build_clients({sid: partition[sid] for sid in train_ids}, stats, scheme)
    test = build_clients({sid: partition[sid] for sid in test_ids}, stats, scheme)
    return PreparedData(train, test, stats, groups)


def cluster_clients(cfg: ExperimentConfig, train_clients):
    """Global pre-training, delta computation and the dendrogram cut.

    Returns ``(pretrained state, reports, dendrogram, partition)``.
    """
    spec = cfg.cnn_spec()
    init = nn_core.init_weights(spec, cfg.sub_seed("init"))
    with ledger.phase_scope("run_fedavg"):
        state, reports = run_fedavg(train_clients, spec, cfg.train_config(cfg.rounds),
                                    initial=init)
    with ledger.phase_scope("compute_deltas"):
        deltas = compute_deltas(state.weights, train_clients, spec, cfg.train_config(1))
    layer = None if cfg.delta_layer == "all" else cfg.delta_layer
    D = pairwise_distance(deltas.matrix(layer), cfg.metric)
    dendro = agglomerate(D, cfg.linkage, leaves=deltas.client_ids)
    labels = cut(dendro, *parse_cut(cfg.cut))
    return state, reports, dendro, labels_to_partition(deltas.client_ids, labels)


def train_pfcm(cfg: ExperimentConfig, train_clients) -> TrainResult:
    """Pretrain globally, cluster the clients by delta, then train one model per cluster."""
    state, reports, dendro, partition = cluster_clients(cfg, train_clients)
    with ledger.phase_scope("train_clusters"):
        clusters, cluster_reports = train_clusters(
            partition, state.weights, train_clients, cfg.cnn_spec(),
            cfg.train_config(cfg.cluster_rounds), start_round=state.round)
    assignment = {cid: cm.cluster_id for cm in clusters for cid in cm.member_client_ids}
    return TrainResult(state.weights, reports + cluster_reports, dendro, assignment, clusters)


def test_pfcm(cfg: ExperimentConfig, test_clients, clusters, pretrained: FlatWeights) -> EvalReport:
    spec = cfg.cnn_spec()
    start = None
    if cfg.registration_start == "random":
        start = nn_core.init_weights(spec, cfg.sub_seed("registration"))
    rounds = cfg.registration_rounds or cfg.local_epochs * 5
    with ledger.phase_scope("test"):
        return test_all(test_clients, clusters, pretrained, spec, cfg.train_config(1), rounds,
                        literal=cfg.literal_assignment,
                        class_names=cfg.label_scheme().class_names, start=start)


def fedavg_baseline(cfg: ExperimentConfig, train_clients, test_clients,
                    pretrained: FlatWeights) -> tuple[EvalReport, FlatWeights]:
    """Continue plain FedAvg from ``pretrained`` for ``cluster_rounds`` more rounds and
    evaluate that single global model on every test client."""
    spec = cfg.cnn_spec()
    with ledger.phase_scope("run_fedavg"):
        state, _ = run_fedavg(train_clients, spec, cfg.train_config(cfg.cluster_rounds),
                              initial=pretrained, start_round=cfg.rounds, report=False)
    report = EvalReport(spec.num_classes, class_names=cfg.label_scheme().class_names)
    with ledger.phase_scope("test"):
        for client in sorted(test_clients, key=lambda c: c.client_id):
            report.merge(evaluate(state.weights, spec, client))
    return report, state.weights


# ---------------------------------------------------------------------------
# writers

def write_rounds(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "loss", "accuracy", "model"])
        for r in reports:
            w.writerow([r.round, repr(r.loss), repr(r.accuracy), r.model])


def write_assignments(path, assignment: dict[str, int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "cluster_id"])
        for cid in sorted(assignment):
            w.writerow([cid, assignment[cid]])


def read_assignments(path) -> dict[str, int]:
    with open(path, newline="") as fh:
        return {r["client_id"]: int(r["cluster_id"]) for r in csv.DictReader(fh)}


def write_dendrogram(path, dendro: Dendrogram) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "node_a", "node_b", "distance", "new_node", "size"])
        for i, m in enumerate(dendro.merges):
            w.writerow([i, m.node_a, m.node_b, repr(m.distance), m.new_node, m.size])
    with open(Path(path).with_name("dendrogram_leaves.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "client_id"])
        for i, cid in enumerate(dendro.leaves):
            w.writerow([i, cid])


def save_training(out: Path, cfg: ExperimentConfig, data: PreparedData, result: TrainResult):
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.txt")
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    nn_core.save_checkpoint(ckpt / "global.ckpt", result.global_weights,
                            {"model": "global", "round": cfg.rounds})
    for cm in result.clusters:
        nn_core.save_checkpoint(ckpt / f"cluster_{cm.cluster_id}.ckpt", cm.weights,
                                {"model": f"cluster{cm.cluster_id}",
                                 "members": cm.member_client_ids})
    write_rounds(out / "rounds.csv", result.reports)
    write_assignments(out / "assignments.csv", result.assignment)
    write_dendrogram(out / "dendrogram.csv", result.dendrogram)
    with open(out / "split.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "split"])
        rows = [(c.client_id, "train") for c in data.train] + \
               [(c.client_id, "test") for c in data.test]
        for sid, part in sorted(rows):
            w.writerow([sid, part])
    (out / "norm_stats.json").write_text(json.dumps(data.stats.to_json()) + "\n")


def load_clusters(out: Path) -> tuple[FlatWeights, list[ClusterModel]]:
    ckpt = out / "checkpoints"
    pretrained, _ = nn_core.load_checkpoint(ckpt / "global.ckpt")
    clusters = []
    paths = sorted(ckpt.glob("cluster_*.ckpt"), key=lambda p: int(p.stem.split("_")[1]))
    for p in paths:
        weights, meta = nn_core.load_checkpoint(p)
        clusters.append(ClusterModel(int(p.stem.split("_")[1]), list(meta.get("members", [])),
                                     weights))
    if not clusters:
        raise FileNotFoundError(f"no cluster checkpoints in {ckpt}")
    return pretrained, clusters


def save_report(out: Path, report: EvalReport, stem: str = "eval_report") -> None:
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / f"{stem}.json")
    report.write_csv(out / f"{stem}.csv")
    (out / f"{stem}.txt").write_text(report.to_text())


def adjusted_rand(labels_true, labels_pred) -> float:
    return float(adjusted_rand_score(np.asarray(labels_true), np.asarray(labels_pred)))
