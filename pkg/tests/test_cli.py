import csv
import subprocess
import sys

import numpy as np
import pytest

from timeflow.cli import main
from timeflow.data import load_csv
from timeflow.evaluation import RESULT_COLUMNS, read_results

SMALL_MODEL = """
[model]
num_frequencies = 3
depth = 2
hidden_dim = 16
latent_dim = 4

[outer]
lr = 0.003
epochs = 15
batch_size = 4

[synth]
periods = 12, 30
noise_std = 0.01

[data]
synth = true
n_samples = 8
length = 96
seed = 3
"""

IMPUTE_CFG = SMALL_MODEL + """
[task]
mode = impute
tau = 0.5
"""

FORECAST_CFG = SMALL_MODEL + """
[task]
mode = forecast
lookback = 24
horizon = 8
train_end = 64
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "impute.ini").write_text(IMPUTE_CFG)
    (d / "forecast.ini").write_text(FORECAST_CFG)
    assert main(["synth", "--config", str(d / "impute.ini"), "--out", str(d / "data.csv")]) == 0
    assert main(["train", "--config", str(d / "impute.ini"), "--out", str(d / "imp")]) == 0
    assert main(["train", "--config", str(d / "forecast.ini"), "--out", str(d / "fc")]) == 0
    return d


def test_train_writes_three_artifacts(workdir):
    for sub in ("imp", "fc"):
        for name in ("checkpoint.tfc", "loss_history.csv", "config.ini"):
            assert (workdir / sub / name).stat().st_size > 0


def test_train_is_deterministic(workdir, tmp_path):
    assert main(["train", "--config", str(workdir / "impute.ini"), "--out", str(tmp_path / "again")]) == 0
    for name in ("loss_history.csv", "checkpoint.tfc", "config.ini"):
        assert (tmp_path / "again" / name).read_bytes() == (workdir / "imp" / name).read_bytes()


def test_missing_required_field_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text(SMALL_MODEL)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "task.mode" in capsys.readouterr().err


def test_missing_file_is_io_error(tmp_path):
    assert main(["train", "--config", str(tmp_path / "none.ini")]) == 4
    assert main(["impute", "--checkpoint", str(tmp_path / "none.tfc"), "--data", str(tmp_path / "x.csv"),
                 "--out", str(tmp_path / "o")]) == 4


def test_divergence_exit_code(tmp_path):
    cfg = tmp_path / "div.ini"
    cfg.write_text(IMPUTE_CFG.replace("lr = 0.003", "lr = 1e300").replace("[synth]", "[inner]\nalpha = 1e300\n\n[synth]"))
    with np.errstate(all="ignore"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_impute_with_truth_emits_per_window_rows(workdir, tmp_path, capsys):
    out = tmp_path / "imp"
    assert main(["impute", "--checkpoint", str(workdir / "imp" / "checkpoint.tfc"), "--data",
                 str(workdir / "data.csv"), "--tau", "0.5", "--out", str(out)]) == 0
    rows = read_results(out / "results.csv")
    assert tuple(rows[0]) == RESULT_COLUMNS and rows[0]["method"] == "timeflow"
    preds = load_csv(out / "predictions.csv")
    assert len(preds) == 8 and all(p.mask.all() for p in preds)
    assert "±" in capsys.readouterr().out


def test_impute_without_truth_writes_predictions_only(workdir, tmp_path):
    out = tmp_path / "imp"
    assert main(["impute", "--checkpoint", str(workdir / "imp" / "checkpoint.tfc"), "--data",
                 str(workdir / "data.csv"), "--out", str(out)]) == 0
    assert (out / "predictions.csv").exists()
    assert not (out / "results.csv").exists()


def test_mask_file_defines_observations(workdir, tmp_path):
    data = load_csv(workdir / "data.csv")
    mask_path = tmp_path / "mask.csv"
    with mask_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [s.sample_id for s in data])
        for i in range(len(data[0])):
            w.writerow([i] + [int(i % 4 == 0)] * len(data))
    out = tmp_path / "imp"
    assert main(["impute", "--checkpoint", str(workdir / "imp" / "checkpoint.tfc"), "--data",
                 str(workdir / "data.csv"), "--mask", str(mask_path), "--out", str(out)]) == 0
    assert read_results(out / "results.csv")[0]["tau"] == "mask"
    # --tau and --mask are mutually exclusive
    with pytest.raises(SystemExit) as info:
        main(["impute", "--checkpoint", "c", "--data", "d", "--mask", "m", "--tau", "0.5", "--out", "o"])
    assert info.value.code == 2


def test_forecast_dense_and_sparse(workdir, tmp_path, capsys):
    ckpt = str(workdir / "fc" / "checkpoint.tfc")
    dense = tmp_path / "dense"
    assert main(["forecast", "--checkpoint", ckpt, "--data", str(workdir / "data.csv"), "--out", str(dense)]) == 0
    assert (dense / "results.csv").exists() and not (dense / "results_imputation.csv").exists()
    sparse = tmp_path / "sparse"
    assert main(["forecast", "--checkpoint", ckpt, "--data", str(workdir / "data.csv"), "--tau", "0.2",
                 "--out", str(sparse)]) == 0
    assert (sparse / "results_imputation.csv").exists()
    assert "imputation_error  forecast_error" in capsys.readouterr().out


def test_forecast_accepts_unseen_samples(workdir, tmp_path):
    other = tmp_path / "other.csv"
    assert main(["synth", "--config", str(workdir / "impute.ini"), "--seed", "99", "--n-samples", "2",
                 "--out", str(other)]) == 0
    rows = load_csv(other)
    with other.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "new_a", "new_b"])
        for i in range(len(rows[0])):
            w.writerow([i, rows[0].values[i], rows[1].values[i]])
    assert main(["forecast", "--checkpoint", str(workdir / "fc" / "checkpoint.tfc"), "--data", str(other),
                 "--out", str(tmp_path / "o")]) == 0


def test_evaluate_baselines(workdir, tmp_path, capsys):
    data = str(workdir / "data.csv")
    assert main(["evaluate", "--method", "linear", "--mode", "impute", "--tau", "0.5", "--data", data,
                 "--out", str(tmp_path / "lin")]) == 0
    assert read_results(tmp_path / "lin" / "results.csv")[0]["method"] == "linear"
    assert main(["evaluate", "--method", "repeat", "--mode", "forecast", "--lookback", "24", "--horizon", "8",
                 "--data", data, "--out", str(tmp_path / "rep")]) == 0
    assert main(["evaluate", "--method", "repeat", "--mode", "impute", "--data", data,
                 "--out", str(tmp_path / "x")]) == 2
    assert main(["evaluate", "--method", "knn", "--mode", "impute", "--k", "8", "--data", data,
                 "--out", str(tmp_path / "x")]) == 2
    assert main(["evaluate", "--method", "timeflow", "--mode", "impute", "--data", data,
                 "--out", str(tmp_path / "x")]) == 2
    assert "knn.k" in capsys.readouterr().err


def test_synth_round_trip_and_seed(tmp_path):
    a, b, c = tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "c.csv"
    assert main(["synth", "--out", str(a), "--n-samples", "137", "--length", "10"]) == 0
    assert main(["synth", "--out", str(b), "--n-samples", "137", "--length", "10"]) == 0
    assert main(["synth", "--out", str(c), "--n-samples", "137", "--length", "10", "--seed", "1"]) == 0
    assert a.read_bytes() == b.read_bytes() != c.read_bytes()
    assert len(load_csv(a)) == 137


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "timeflow.cli", "synth", "--out", str(tmp_path / "s.csv"),
                          "--n-samples", "2", "--length", "5"], capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
