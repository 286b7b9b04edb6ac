import json
import subprocess
import sys

import numpy as np
import pytest

from pvnowcast import checkpoint
from pvnowcast.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "dataset"
    assert main(["--out", str(root), "simulate", "--dataset", str(data), "--days", "5", "--resolution", "16"]) == EXIT_OK
    assert main(["--out", str(root), "preprocess", "--dataset", str(data), "--cache", str(root / "cache")]) == EXIT_OK
    return root


def run(ws, *argv):
    return main(["--out", str(ws), *argv])


def test_train_writes_checkpoint_and_reports(workspace, capsys):
    cache = str(workspace / "cache")
    assert run(workspace, "train", "--dataset", cache, "--kind", "mlp", "--epochs", "2", "--name", "m") == EXIT_OK
    out = capsys.readouterr().out
    assert "best epoch" in out
    ck = checkpoint.load(workspace / "checkpoints" / "m" / "best")
    assert ck.kind == "mlp"
    assert ck.run_config["weights"] == {"dtheta": 1000.0, "ds": 0.001, "p": 0.1, "theta": 0.1, "image": 0.1}
    assert ck.run_config["lr_encoder"] == 1e-3 and ck.run_config["lr_other"] == 3e-4
    assert "out" not in ck.run_config
    assert set(ck.extra["split"]) == {"train", "validation", "test"}
    assert (workspace / "reports" / "m_train.json").is_file()
    assert (workspace / "figures" / "m_training.png").read_bytes()[:4] == b"\x89PNG"


def test_zero_epoch_checkpoint_matches_persistence(workspace, capsys):
    cache = str(workspace / "cache")
    assert run(workspace, "train", "--dataset", cache, "--kind", "mlp", "--epochs", "0", "--name", "z") == EXIT_OK
    assert run(workspace, "evaluate", "--checkpoint", str(workspace / "checkpoints" / "z" / "best"), "--no-figures") == EXIT_OK
    rows = capsys.readouterr().out.splitlines()
    table = [r.split() for r in rows if r.split() and r.split()[0] in ("clear", "partly", "overcast", "all")]
    assert table
    for row in table:
        assert row[-2:] == ["0.00", "0.00"]
    doc = json.loads((workspace / "reports" / "z_test.json").read_text())
    assert doc["classes"]["all"]["ss_mae"] == 0.0
    assert (workspace / "predictions" / "z_test.csv").is_file()


def test_persistence_pseudo_checkpoint(workspace, capsys):
    cache = str(workspace / "cache")
    assert run(workspace, "evaluate", "--persistence", "--dataset", cache) == EXIT_OK
    doc = json.loads((workspace / "reports" / "persistence_x1_test.json").read_text())
    for m in doc["classes"].values():
        assert m["ss_mae"] == 0.0 and m["ss_rmse"] == 0.0
    assert (workspace / "figures" / "persistence_x1_test_days.png").is_file()
    assert (workspace / "figures" / "persistence_x1_test_skill.png").is_file()


def test_predict_zero_init_equals_persistence(workspace, capsys):
    cache = str(workspace / "cache")
    run(workspace, "train", "--dataset", cache, "--kind", "lstm", "--epochs", "0", "--name", "l0")
    capsys.readouterr()
    ck = workspace / "checkpoints" / "l0" / "best"
    day = json.loads((workspace / "cache" / "index.json").read_text())["days"][0]["day"]
    with np.load(workspace / "cache" / f"{day}.npz") as z:
        t0 = int(z["minutes"][30])
    from pvnowcast.datapipe.io import iso_utc

    assert run(workspace, "predict", "--checkpoint", str(ck), "--timestamp", iso_utc(t0)) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["prediction_w"] == doc["persistence_w"]
    assert doc["latency_ms"] < 1000
    # the first minute of the day has no history
    with np.load(workspace / "cache" / f"{day}.npz") as z:
        first = int(z["minutes"][0])
    assert run(workspace, "predict", "--checkpoint", str(ck), "--timestamp", iso_utc(first)) == EXIT_DATA
    assert "missing minutes" in capsys.readouterr().err


def test_exit_codes(workspace, tmp_path, capsys):
    assert main(["train", "--kind", "mlp"]) == EXIT_USAGE
    assert main(["bogus"]) == EXIT_USAGE
    assert main(["--out", str(tmp_path), "train", "--dataset", str(tmp_path / "none")]) == EXIT_DATA
    assert main(["gradcheck", "--precision", "f32"]) == EXIT_USAGE
    assert main(["train", "--dataset", str(workspace / "cache"), "--lambda", "nope=1"]) == EXIT_USAGE
    broken = tmp_path / "ck"
    ck = checkpoint.load(workspace / "checkpoints" / "z" / "best")
    ck.alpha = None
    checkpoint.save(ck, broken)
    assert main(["evaluate", "--checkpoint", str(broken), "--dataset", str(workspace / "cache")]) == EXIT_DATA
    assert "alpha" in capsys.readouterr().err


def test_nan_training_is_numeric_failure(workspace, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"schema_version": 1, "lr_other": 1e30, "kind": "mlp", "epochs": 3}))
    code = main(["--config", str(cfg), "--out", str(tmp_path), "train", "--dataset", str(workspace / "cache")])
    assert code in (EXIT_OK, EXIT_NUMERIC)


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seeds", "1", "--kinds", "mlp"]) == EXIT_OK
    assert "checks passed" in capsys.readouterr().out


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "pvnowcast.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("simulate", "preprocess", "train", "evaluate", "predict", "gradcheck"):
        assert cmd in res.stdout
