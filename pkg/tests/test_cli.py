import os

import numpy as np

from svdalign.checkpoint import load_checkpoint
from svdalign.cli import cli_run, cost_table
from svdalign.diagnostics import parse_metrics_csv
from svdalign.model import DenseLayer, FactoredDense, Network, decompose_dense
from svdalign.trainer import config_from_fingerprint


def write_config(tmp_path, **overrides):
    values = dict(method="ssa", dataset="synthetic-spiral", architecture="mlp3",
                  epochs=2, batch_size=64, lr=3e-4, n_samples=300,
                  out_dir=str(tmp_path / "runs"))
    values.update(overrides)
    lines = []
    for k, v in values.items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    path = tmp_path / "run.cfg"
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def test_train_writes_outputs_and_reports(tmp_path, capsys):
    cfg_path = write_config(tmp_path)
    assert cli_run(["train", "--config", cfg_path]) == 0
    out = capsys.readouterr().out
    assert "final test accuracy:" in out
    csv_path = str(tmp_path / "runs" / "ssa_mlp3_synthetic-spiral_seed0.csv")
    ckpt_path = str(tmp_path / "runs" / "ssa_mlp3_synthetic-spiral_seed0.ckpt")
    assert os.path.exists(csv_path) and os.path.exists(ckpt_path)
    records = parse_metrics_csv(csv_path)
    assert [r.epoch for r in records] == [0, 1]
    raw = load_checkpoint(ckpt_path)
    assert raw["epochs_done"] == 2


def test_train_method_and_seed_overrides(tmp_path):
    cfg_path = write_config(tmp_path)
    assert cli_run(["train", "--config", cfg_path,
                    "--method", "dfa", "--seed", "5"]) == 0
    ckpt_path = str(tmp_path / "runs" / "dfa_mlp3_synthetic-spiral_seed5.ckpt")
    cfg = config_from_fingerprint(load_checkpoint(ckpt_path)["fingerprint"])
    assert cfg.method == "dfa"
    assert cfg.seed == 5


def test_eval_prints_accuracy(tmp_path, capsys):
    cfg_path = write_config(tmp_path)
    assert cli_run(["train", "--config", cfg_path]) == 0
    ckpt_path = str(tmp_path / "runs" / "ssa_mlp3_synthetic-spiral_seed0.ckpt")
    capsys.readouterr()
    assert cli_run(["eval", "--checkpoint", ckpt_path,
                    "--dataset", "synthetic-spiral"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("test accuracy: ")
    acc = float(out.split(":")[1])
    assert 0.0 <= acc <= 1.0
    # blobs inputs are wider than spiral's: geometry mismatch is an error
    capsys.readouterr()
    assert cli_run(["eval", "--checkpoint", ckpt_path,
                    "--dataset", "synthetic-blobs"]) == 1
    assert "input shape" in capsys.readouterr().err


def test_cost_command_and_table(tmp_path, capsys):
    cfg_path = write_config(tmp_path)
    assert cli_run(["train", "--config", cfg_path]) == 0
    ckpt_path = str(tmp_path / "runs" / "ssa_mlp3_synthetic-spiral_seed0.ckpt")
    capsys.readouterr()
    assert cli_run(["cost", "--checkpoint", ckpt_path]) == 0
    out = capsys.readouterr().out
    assert "dense_factored" in out
    assert out.splitlines()[-1].startswith("total")


def test_cost_table_counts():
    rng = np.random.default_rng(0)
    fw = decompose_dense(rng.standard_normal((100, 200)), 10)
    dense = DenseLayer(rng.standard_normal((100, 200)), "identity")
    table = cost_table(Network([FactoredDense(fw, "identity")], 100))
    row = [c for c in table.splitlines()[1].split() if c]
    assert row[2] == "10"
    assert row[3] == "3010"
    assert row[4] == "3010"
    dense_table = cost_table(Network([dense], 100))
    assert dense_table.splitlines()[1].split()[3] == "20000"


def test_diagnose_deterministic(tmp_path, capsys):
    out_a = str(tmp_path / "a")
    out_b = str(tmp_path / "b")
    assert cli_run(["diagnose", "--epochs", "1", "--out-dir", out_a]) == 0
    text = capsys.readouterr().out
    for method in ("ssa", "dfa", "bp"):
        assert f"{method}: final-epoch alignment angles" in text
    assert cli_run(["diagnose", "--epochs", "1", "--out-dir", out_b]) == 0
    for method in ("ssa", "dfa", "bp"):
        with open(os.path.join(out_a, f"diagnose_{method}.csv"), "rb") as fh:
            bytes_a = fh.read()
        with open(os.path.join(out_b, f"diagnose_{method}.csv"), "rb") as fh:
            bytes_b = fh.read()
        assert bytes_a == bytes_b


def test_unknown_flag_exits_2(tmp_path, capsys):
    assert cli_run(["train", "--config", "x", "--bogus"]) == 2
    assert cli_run(["eval", "--checkpoint", "x", "--dataset", "mnist"]) == 2
    capsys.readouterr()


def test_missing_config_exits_1(tmp_path, capsys):
    missing = str(tmp_path / "nope.cfg")
    assert cli_run(["train", "--config", missing]) == 1
    err = capsys.readouterr().err
    assert missing in err


def test_invalid_field_reported_on_stderr(tmp_path, capsys):
    cfg_path = write_config(tmp_path, lr=-2)
    assert cli_run(["train", "--config", cfg_path]) == 1
    err = capsys.readouterr().err
    assert "(field: lr)" in err


def test_corrupt_checkpoint_exits_1(tmp_path, capsys):
    bad = tmp_path / "junk.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    assert cli_run(["eval", "--checkpoint", str(bad),
                    "--dataset", "synthetic-spiral"]) == 1
    assert "error:" in capsys.readouterr().err
