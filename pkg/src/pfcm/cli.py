"""Command line entry point: ``pfcm {synth,train,test,compare}``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .config import ExperimentConfig
from .dataset import generate_synthetic, write_csv, write_groups
from .exceptions import ConfigError, DataError

logger = logging.getLogger("pfcm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

# flag name -> config key
FLAG_KEYS = {"data": "data", "out": "out", "seed": "seed", "classes": "classes",
             "rounds": "rounds", "cluster_rounds": "cluster_rounds", "cut": "cut",
             "metric": "metric"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--data", help="CSV dataset; omit to use the synthetic generator")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--classes", type=int, choices=(2, 3))
    common.add_argument("--rounds", type=int, help="global FedAvg rounds")
    common.add_argument("--cluster-rounds", type=int, help="per-cluster FedAvg rounds")
    common.add_argument("--cut", help="gap, k=<n> or tau=<x>")
    common.add_argument("--metric", choices=("cosine", "euclidean"))
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pfcm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    sub.add_parser("train", parents=[common], help="pre-train, cluster and train cluster models")
    sub.add_parser("test", parents=[common], help="route test clients and evaluate")
    sub.add_parser("compare", parents=[common], help="PFCM against plain FedAvg on one split")
    return parser


def resolve_config(args, base_file=None) -> ExperimentConfig:
    """Defaults < config file < --set < explicit flags."""
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    path = args.config or base_file
    if path:
        return ExperimentConfig.from_file(path, overrides)
    return ExperimentConfig.from_mapping(overrides)


def cmd_synth(cfg: ExperimentConfig) -> None:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    synth = generate_synthetic(cfg.synthetic_spec())
    write_csv(out / "data.csv", synth.records)
    write_groups(out / "groups.csv", synth.groups)
    cfg.write(out / "config.txt")
    print(f"wrote {len(synth.records)} records for {len(synth.groups)} subjects to {out}")


def cmd_train(cfg: ExperimentConfig):
    out = Path(cfg.out)
    data = ex.prepare_data(cfg)
    result = ex.train_pfcm(cfg, data.train)
    ex.save_training(out, cfg, data, result)
    sizes = [len(c.member_client_ids) for c in result.clusters]
    print(f"trained {len(data.train)} clients into {len(sizes)} cluster(s) {sizes}; "
          f"outputs in {out}")
    return data, result


def cmd_test(cfg: ExperimentConfig):
    out = Path(cfg.out)
    data = ex.prepare_data(cfg)
    if not data.test:
        raise DataError("test split is empty")
    pretrained, clusters = ex.load_clusters(out)
    report = ex.test_pfcm(cfg, data.test, clusters, pretrained)
    ex.save_report(out, report)
    ex.write_assignments(out / "test_assignments.csv", report.assignments)
    print(f"PFCM accuracy {report.accuracy:.4f} over {len(data.test)} test clients")
    return report


def cmd_compare(cfg: ExperimentConfig) -> None:
    out = Path(cfg.out)
    data, result = cmd_train(cfg)
    if not data.test:
        raise DataError("test split is empty")
    pfcm = ex.test_pfcm(cfg, data.test, result.clusters, result.global_weights)
    fedavg, _ = ex.fedavg_baseline(cfg, data.train, data.test, result.global_weights)
    ex.save_report(out, pfcm)
    ex.save_report(out, fedavg, "fedavg_report")
    ex.write_assignments(out / "test_assignments.csv", pfcm.assignments)
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "accuracy", "pooled_accuracy", "n_test_clients"])
        for name, rep in (("PFCM", pfcm), ("FedAvg", fedavg)):
            w.writerow([name, repr(rep.accuracy), repr(rep.pooled_accuracy),
                        len(rep.client_accuracy)])
    print(f"PFCM {pfcm.accuracy:.4f}  FedAvg {fedavg.accuracy:.4f}  "
          f"({len(data.test)} test clients)")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "test": cmd_test, "compare": cmd_compare}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        base = None
        if args.command == "test" and not args.config and args.out:
            # evaluate with the configuration the model was trained with
            saved = Path(args.out) / "config.txt"
            base = saved if saved.exists() else None
        cfg = resolve_config(args, base)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        logger.debug("run failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
