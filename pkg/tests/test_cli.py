import csv
import json
import re
import subprocess
import sys

import numpy as np
import pytest
import yaml

from tvinr import cli
from tvinr.config import dump_config, load_config, preset
from tvinr.dataset import load_csv
from tvinr.tasks import EvalReport, WindowRecord

EPOCH_LINE = re.compile(r"^epoch=(\d+) train=(\S+) val=(\S+) kl=(\S+)$")


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.yaml"
    dump_config(preset("gradcheck", n_channels=1, epochs=2, batch_size=8, lr=1e-3, stride=16, window=32), path)
    return path


@pytest.fixture
def imputation_run(tmp_path, small_cfg):
    data = tmp_path / "d.csv"
    assert run("synth", "--series", 2, "--len", 128, "--seed", 3, "--out", data) == 0
    ck = tmp_path / "m.tvinr"
    assert run("train", "--config", small_cfg, "--data", data, "--out", ck) == 0
    return data, ck


@pytest.fixture
def forecast_run(tmp_path, small_cfg):
    data = tmp_path / "f.csv"
    assert run("synth", "--kind", "trend-seasonal", "--series", 2, "--len", 200, "--seed", 1, "--out", data) == 0
    ck = tmp_path / "f.tvinr"
    argv = ["train", "--config", small_cfg, "--data", data, "--out", ck]
    assert run(*argv, "--task", "forecasting", "--history", 24, "--horizons", "8,16", "--epochs", 1) == 0
    return data, ck


def test_synth_is_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert run("synth", "--kind", "sine-mix", "--series", 8, "--len", 200, "--dims", 1, "--seed", 7, "--out", p) == 0
    assert a.read_bytes() == b.read_bytes()
    samples = load_csv(a)
    assert len(samples) == 8 and all(s.length == 200 and s.n_channels == 1 for s in samples)


def test_synth_multichannel_header(tmp_path):
    p = tmp_path / "m.csv"
    assert run("synth", "--dims", 3, "--series", 1, "--len", 10, "--out", p) == 0
    assert p.read_text().splitlines()[0] == "series_id,t,y0,y1,y2"


def test_seed_falls_back_to_environment(tmp_path, monkeypatch):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run("synth", "--seed", 7, "--out", a) == 0
    monkeypatch.setenv("TVINR_SEED", "7")
    assert run("synth", "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()


def test_usage_errors_exit_one(tmp_path, capsys):
    assert run("synth", "--series", 0, "--out", tmp_path / "x.csv") == 1
    with pytest.raises(SystemExit) as exc:
        run("synth", "--kind", "nope")
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        run("impute", "--checkpoint", "x")
    assert exc.value.code == 1


def test_config_dump_roundtrip(tmp_path):
    p = tmp_path / "c.yaml"
    assert run("config", "--preset", "electricity-200", "--out", p) == 0
    assert load_config(p) == preset("electricity-200")


def test_missing_config_key_is_named(tmp_path, capsys):
    data = tmp_path / "d.csv"
    run("synth", "--out", data)
    cfg = yaml.safe_load(dump_config(preset("gradcheck")))
    del cfg["fourier_m"]
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert run("train", "--config", path, "--data", data) == 1
    assert "fourier_m" in capsys.readouterr().err


def test_train_prints_epoch_lines_and_manifest(tmp_path, small_cfg, capsys):
    data = tmp_path / "d.csv"
    run("synth", "--series", 2, "--len", 128, "--out", data)
    ck = tmp_path / "m.tvinr"
    assert run("train", "--config", small_cfg, "--data", data, "--out", ck, "--tau-set", "0.05,0.30,0.50,0.75,0.90,1.0") == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("epoch=")]
    assert [int(EPOCH_LINE.match(l).group(1)) for l in lines] == [1, 2]
    assert all(np.isfinite(float(x)) for l in lines for x in EPOCH_LINE.match(l).groups()[1:])
    manifest = json.loads((tmp_path / "m.tvinr.manifest.json").read_text())
    assert manifest["checkpoint"] == str(ck)
    assert manifest["config"]["tau_set"] == [0.05, 0.3, 0.5, 0.75, 0.9, 1.0]
    assert len(manifest["dataset"]["sha256"]) == 64
    assert set(manifest) >= {"config", "dataset", "checkpoint", "metrics", "timings", "seed"}


def test_train_divergence_exits_two(tmp_path, small_cfg, capsys):
    data = tmp_path / "d.csv"
    run("synth", "--series", 2, "--len", 128, "--out", data)
    code = run("train", "--config", small_cfg, "--data", data, "--out", tmp_path / "m", "--lr", 1e30, "--epochs", 5)
    assert code == 2
    assert "diverged" in capsys.readouterr().err


def test_impute_report_and_predictions(tmp_path, imputation_run):
    data, ck = imputation_run
    pred, rep = tmp_path / "p.csv", tmp_path / "r.txt"
    assert run("impute", "--checkpoint", ck, "--data", data, "--tau", 0.3, "--out", pred, "--report", rep) == 0
    report = EvalReport.load(rep)
    assert report.n == 2 and {r.setting for r in report.records} == {"tau=0.3"}
    rows = read_rows(pred)
    assert list(rows[0]) == ["series_id", "t", "channel", "prediction", "truth", "observed", "window"]
    assert len(rows) == 2 * 32
    assert sum(r["observed"] == "1" for r in rows) == 2 * round(0.3 * 32)


def test_commands_leave_inputs_untouched(tmp_path, imputation_run):
    data, ck = imputation_run
    before = data.read_bytes(), ck.read_bytes()
    pred = tmp_path / "p.csv"
    assert run("impute", "--checkpoint", ck, "--data", data, "--tau", 0.5, "--split", "whole", "--out", pred,
               "--report", tmp_path / "r.txt") == 0
    assert run("plotdata", pred, "--out-dir", tmp_path / "plots") == 0
    assert (data.read_bytes(), ck.read_bytes()) == before
    assert len(read_rows(pred)) == 2 * 128


def test_mode_mismatch_exits_three(tmp_path, imputation_run, capsys):
    data, ck = imputation_run
    assert run("forecast", "--checkpoint", ck, "--data", data, "--horizon", 8, "--out", tmp_path / "p.csv") == 3
    assert "mode mismatch" in capsys.readouterr().err


def test_forecast_rows_per_horizon(tmp_path, forecast_run):
    data, ck = forecast_run
    pred = tmp_path / "p.csv"
    assert run("forecast", "--checkpoint", ck, "--data", data, "--horizon", 720, "--split", "whole", "--out", pred) == 0
    rows = read_rows(pred)
    assert "truth" not in rows[0]
    for sid in ("trend-seasonal-0", "trend-seasonal-1"):
        mine = [r for r in rows if r["series_id"] == sid]
        assert sum(r["observed"] == "0" for r in mine) == 720
        assert sum(r["observed"] == "1" for r in mine) == 24
    assert run("forecast", "--checkpoint", ck, "--data", data, "--horizon", 8, "--out", pred, "--report", tmp_path / "r.txt") == 0
    report = EvalReport.load(tmp_path / "r.txt")
    assert {r.setting for r in report.records} == {"F=8"}
    assert "truth" in read_rows(pred)[0]


def test_plotdata_imputation(tmp_path, imputation_run):
    data, ck = imputation_run
    pred = tmp_path / "p.csv"
    run("impute", "--checkpoint", ck, "--data", data, "--tau", 0.5, "--out", pred, "--report", tmp_path / "r.txt")
    out = tmp_path / "plots"
    assert run("plotdata", pred, "--out-dir", out) == 0
    files = sorted(out.iterdir())
    assert len(files) == 2
    src = [r for r in read_rows(pred) if r["series_id"] == "sine-mix-0"]
    rows = read_rows(files[0])
    assert list(rows[0]) == ["t", "channel", "truth", "prediction", "observed"]
    assert len(rows) == 32
    assert [r["observed"] for r in rows] == [r["observed"] for r in src]


def test_plotdata_forecast_flags(tmp_path, forecast_run):
    data, ck = forecast_run
    pred = tmp_path / "p.csv"
    run("forecast", "--checkpoint", ck, "--data", data, "--horizon", 16, "--out", pred, "--report", tmp_path / "r.txt")
    out = tmp_path / "plots"
    assert run("plotdata", pred, "--out-dir", out) == 0
    rows = read_rows(sorted(out.iterdir())[0])
    assert len(rows) == 24 + 16
    assert [r["observed"] for r in rows] == ["1"] * 24 + ["0"] * 16


def write_report(path, ids, mses):
    EvalReport("imputation", [WindowRecord(i, "tau=0.3", m, m) for i, m in zip(ids, mses)]).save(path)


def test_eval_self_comparison(tmp_path, capsys):
    a = tmp_path / "a.txt"
    write_report(a, ["w1", "w2", "w3"], [0.1, 0.3, 0.2])
    assert run("eval", a, a) == 0
    out = capsys.readouterr().out
    assert "p=1.0" in out and "no significant difference" in out


def test_eval_detects_constant_shift(tmp_path, capsys):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    ids = [f"w{i}" for i in range(5)]
    errs = [0.11, 0.32, 0.25, 0.18, 0.4]
    write_report(a, ids, errs)
    write_report(b, ids, [e + 1 for e in errs])
    assert run("eval", a, b) == 0
    mse_line = [l for l in capsys.readouterr().out.splitlines() if l.startswith("mse:")][0]
    assert mse_line.endswith("-> significant difference")


def test_eval_window_mismatch(tmp_path, capsys):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    write_report(a, ["w1", "w2", "w3"], [0.1, 0.2, 0.3])
    write_report(b, ["w1", "w2", "w3", "extra9"], [0.1, 0.2, 0.3, 0.4])
    assert run("eval", a, b) == 1
    assert "extra9" in capsys.readouterr().err


def test_gradcheck_passes(capsys):
    assert run("gradcheck") == 0
    assert "gradcheck passed" in capsys.readouterr().out


def test_gradcheck_32_bit_warns(capsys, caplog):
    assert run("gradcheck", "--precision", 32) == 0
    assert "relaxed to 0.01" in caplog.text
    assert "threshold=0.01" in capsys.readouterr().out


def test_gradcheck_corrupted_gradient_exits_four(monkeypatch, capsys):
    class Corrupted(cli.TVINR):
        def __init__(self, config):
            super().__init__(config)
            for p in self.prior.parameters():
                p.register_hook(lambda g: g * 2.0)

    monkeypatch.setattr(cli, "TVINR", Corrupted)
    assert run("gradcheck") == 4
    assert "worst parameter prior." in capsys.readouterr().err


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "tvinr.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("tvinr ")
