import csv
import json

import numpy as np
import pytest

from pfcm import nn_core
from pfcm.cli import EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME, main
from pfcm.config import ExperimentConfig

# small network and data so CLI runs take a fraction of a second
FAST = ["--set", "conv1_channels=2", "--set", "conv2_channels=3", "--set", "fc_hidden=5",
        "--set", "synth_clients=15"]


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_synth_reruns_are_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--seed", "4"]) == 0
    for f in ("data.csv", "groups.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    rows = _read_csv(tmp_path / "a" / "data.csv")
    counts = {}
    for r in rows:
        counts[r["subject_id"]] = counts.get(r["subject_id"], 0) + 1
    assert len(counts) == 100
    assert all(3 <= n <= 6 for n in counts.values())


def test_synth_then_train_from_csv(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d"), *FAST]) == 0
    out = tmp_path / "run"
    rc = main(["train", "--data", str(tmp_path / "d" / "data.csv"), "--out", str(out),
               "--rounds", "2", "--cluster-rounds", "1", *FAST])
    assert rc == 0
    split = _read_csv(out / "split.csv")
    assert sum(r["split"] == "train" for r in split) == 12


def test_zero_rounds_single_cluster_is_initial_model(tmp_path):
    out = tmp_path / "run"
    rc = main(["train", "--out", str(out), "--rounds", "0", "--cluster-rounds", "0",
               "--cut", "k=1", *FAST])
    assert rc == 0
    cfg = ExperimentConfig.from_file(out / "config.txt")
    init = nn_core.init_weights(cfg.cnn_spec(), cfg.sub_seed("init"))
    glob, _ = nn_core.load_checkpoint(out / "checkpoints" / "global.ckpt")
    only, meta = nn_core.load_checkpoint(out / "checkpoints" / "cluster_0.ckpt")
    assert glob.values.tobytes() == init.values.tobytes()
    assert only.values.tobytes() == init.values.tobytes()
    assert len(meta["members"]) == 12
    assert _read_csv(out / "rounds.csv") == []


def test_round_csv_global_rows_then_cluster_rows(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), "--cluster-rounds", "2", "--cut", "k=2", *FAST]) == 0
    rows = _read_csv(out / "rounds.csv")
    models = [r["model"] for r in rows]
    assert models[:50] == ["global"] * 50
    assert [int(r["round"]) for r in rows[:50]] == list(range(1, 51))
    assert len(rows) == 50 + 2 * 2
    assert all(m.startswith("cluster") for m in models[50:])


def test_train_then_test_writes_reports(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), "--rounds", "3", "--cluster-rounds", "1", *FAST]) == 0
    assert main(["test", "--out", str(out)]) == 0
    report = json.loads((out / "eval_report.json").read_text())
    assert 0 <= report["accuracy"] <= 1
    assert len(report["confusion_matrix"]) == 3
    assigned = _read_csv(out / "test_assignments.csv")
    assert len(assigned) == 3
    assert (out / "eval_report.csv").exists() and (out / "eval_report.txt").exists()


def test_compare_rows_share_test_clients(tmp_path):
    out = tmp_path / "run"
    assert main(["compare", "--out", str(out), "--rounds", "3", "--cluster-rounds", "1",
                 *FAST]) == 0
    rows = _read_csv(out / "compare.csv")
    assert [r["method"] for r in rows] == ["PFCM", "FedAvg"]
    assert rows[0]["n_test_clients"] == rows[1]["n_test_clients"] == "3"
    a = json.loads((out / "eval_report.json").read_text())
    b = json.loads((out / "fedavg_report.json").read_text())
    assert sorted(a["client_accuracy"]) == sorted(b["client_accuracy"])


def test_two_classes_flag(tmp_path):
    out = tmp_path / "run"
    assert main(["compare", "--out", str(out), "--classes", "2", "--rounds", "2",
                 "--cluster-rounds", "1", *FAST]) == 0
    report = json.loads((out / "eval_report.json").read_text())
    assert report["class_names"] == ["Normal+Mild", "Moderate-Severe"]


def test_missing_dataset_is_data_error(tmp_path, capsys):
    rc = main(["train", "--data", str(tmp_path / "absent.csv"), "--out", str(tmp_path / "o")])
    assert rc == EXIT_DATA
    assert "absent.csv" in capsys.readouterr().err


def test_malformed_csv_is_data_error(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("subject_id,visit\nA,0\n")
    assert main(["train", "--data", str(bad), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_config_errors(tmp_path):
    assert main(["train", "--cut", "median", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["train", "--set", "no_such_key=1", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["train", "--config", str(tmp_path / "none.txt")]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as err:
        main(["train", "--classes", "4"])
    assert err.value.code == 2


def test_test_without_checkpoints_is_runtime_error(tmp_path):
    assert main(["test", "--out", str(tmp_path / "empty"), *FAST]) == EXIT_RUNTIME


def test_flags_override_config_file(tmp_path):
    cfg_file = tmp_path / "c.txt"
    cfg_file.write_text("rounds = 3\ncluster_rounds = 1\nseed = 9\n"
                        "conv1_channels = 2\nconv2_channels = 3\nfc_hidden = 5\n"
                        "synth_clients = 15\n")
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_file), "--rounds", "2", "--out", str(out)]) == 0
    resolved = ExperimentConfig.from_file(out / "config.txt")
    assert resolved.rounds == 2
    assert resolved.seed == 9 and resolved.cluster_rounds == 1


def test_rerun_from_resolved_config_reproduces_outputs(tmp_path):
    first = tmp_path / "first"
    assert main(["compare", "--out", str(first), "--rounds", "3", "--cluster-rounds", "2",
                 *FAST]) == 0
    second = tmp_path / "second"
    assert main(["compare", "--config", str(first / "config.txt"), "--out", str(second)]) == 0
    for rel in ("checkpoints/global.ckpt", "checkpoints/cluster_0.ckpt", "assignments.csv",
                "rounds.csv", "eval_report.json", "compare.csv", "test_assignments.csv"):
        assert (first / rel).read_bytes() == (second / rel).read_bytes(), rel


def test_label_values_in_synth_csv(tmp_path):
    assert main(["synth", "--out", str(tmp_path), *FAST]) == 0
    scores = np.array([int(r["hamd"]) for r in _read_csv(tmp_path / "data.csv")])
    assert scores.min() >= 0 and scores.max() <= 50
