import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from pnpmatch.cli import main
from pnpmatch.experiment import DatasetManifest, Predictions
from pnpmatch.metric import cache_read


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["dataset", "--n", "10", "--seed", "7", "--out", str(root / "ds")]) == 0
    return root


def test_dataset_command_is_deterministic(dataset, tmp_path):
    assert main(["dataset", "--n", "10", "--seed", "7", "--out", str(tmp_path)]) == 0
    a = (dataset / "ds" / "manifest.json").read_bytes()
    assert (tmp_path / "manifest.json").read_bytes() == a
    for e in DatasetManifest.load(tmp_path).samples:
        assert (tmp_path / e.audio_path).read_bytes() == (dataset / "ds" / e.audio_path).read_bytes()


def test_error_line_and_exit_code(dataset, capsys):
    assert main(["dataset", "--n", "10", "--seed", "7", "--out", str(dataset / "ds")]) == 1
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert err.startswith("pnpmatch: error: kind=OverwriteError message=")
    msg = json.loads(err.split("message=", 1)[1])
    assert "--overwrite" in msg


def test_missing_manifest_is_reported(tmp_path, capsys):
    assert main(["report-eigs", "--metrics", str(tmp_path / "nope.pnpm"), "--out", str(tmp_path / "e.csv")]) == 1
    assert "kind=FileNotFoundError" in capsys.readouterr().err


def test_metrics_cache_replays(dataset):
    ds = dataset / "ds"
    outs = [dataset / "m1.pnpm", dataset / "m2.pnpm"]
    for out in outs:
        assert main(["metrics", "--manifest", str(ds), "--out", str(out), "--splits", "val,test"]) == 0
    assert outs[0].read_bytes() == outs[1].read_bytes()
    m = DatasetManifest.load(ds)
    cache = cache_read(outs[0])
    wanted = set(m.ids("val")) | set(m.ids("test"))
    assert {r.sample_id for r in cache.records} == wanted
    rows = list(csv.reader(open(dataset / "m1_eigenvalues.csv")))
    for r in rows[1:]:
        w = [float(x) for x in r[1:]]
        assert w == sorted(w, reverse=True)


def test_train_eval_and_reports(dataset, tmp_path):
    ds = dataset / "ds"
    out = tmp_path / "run"
    assert main(["train", "--manifest", str(ds), "--out-dir", str(out), "--epochs", "3", "--hidden", "8",
                 "--batch-size", "4"]) == 0
    for name in ("weights.pnpw", "config.txt", "train_log.csv", "predictions.csv"):
        assert (out / name).exists()
    p = Predictions.load(out / "predictions.csv")
    assert p.meta["loss"] == "p_loss" and p.theta.shape[1] == 5
    table = tmp_path / "table.csv"
    assert main(["eval", "--manifest", str(ds), "--predictions", str(out / "predictions.csv"),
                 "--out", str(table)]) == 0
    rows = [r for r in csv.reader(open(table)) if not r[0].startswith("#")]
    assert rows[0][:3] == ["loss", "phi", "pitch"] and rows[1][:3] == ["p_loss", "jtfs", "unknown"]
    assert main(["train", "--manifest", str(ds), "--out-dir", str(out), "--epochs", "1"]) == 1
    assert main(["report-eigs", "--metrics", str(dataset / "m1.pnpm"), "--out", str(tmp_path / "e.csv")]) == 0


def test_match_command(dataset, tmp_path):
    ds = dataset / "ds"
    e = DatasetManifest.load(ds).samples[0]
    init = ",".join(repr(x) for x in e.theta)
    out = tmp_path / "match.txt"
    assert main(["match", "--target", str(ds / e.audio_path), "--init", init, "--peak", repr(e.peak),
                 "--max-iter", "2", "--out", str(out)]) == 0
    fields = dict(line.split("=", 1) for line in out.read_text().splitlines())
    theta = np.array([float(x) for x in fields["theta_normalized"].split(",")])
    assert np.all(np.abs(theta) <= 1)
    assert int(fields["iterations"]) <= 2


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "pnpmatch.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("dataset", "metrics", "train", "match", "eval", "report-eigs", "report-tau"):
        assert cmd in res.stdout
