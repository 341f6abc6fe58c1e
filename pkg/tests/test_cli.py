import json
import subprocess
import sys
from pathlib import Path

import pytest

from stackforecast import cli
from stackforecast.market_data import write_ohlcv

from conftest import synthetic_series, tiny_config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    data_dir.mkdir()
    # spans the three 2023-2024 regime windows
    write_ohlcv(synthetic_series(620, seed=11, start="2023-03-01", price=30000.0), data_dir / "btc.csv")
    cfg = tiny_config(data_path=str(data_dir / "btc.csv"), out_dir=str(root / "run"), gbt_verbosity=0)
    (root / "run.cfg").write_text(cfg.to_text())
    return root


def invoke(ws, command, *extra):
    return cli.main(["-q", command, "--config", str(ws / "run.cfg"), *extra])


def listing(d: Path) -> dict:
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(workspace):
    for cmd in ("preprocess", "train", "evaluate", "regime", "report"):
        assert invoke(workspace, cmd) == 0, cmd
    return workspace / "run"


def test_outputs_written(pipeline):
    for rel in ("preprocess/normalized.csv", "preprocess/outliers.csv", "preprocess/splits.json",
                "preprocess/regimes.csv", "artifacts/manifest.json", "artifacts/weights.json",
                "artifacts/meta_gbt.txt", "artifacts/ledger.json", "evaluation/predictions.csv",
                "evaluation/metrics.json", "evaluation/ledger.json", "regime/regimes.csv",
                "regime/rolling_volatility.csv", "figures/training_curves.png", "figures/test_predictions.png",
                "figures/test_mape.png", "figures/validation_predictions.png",
                "figures/tft_interpretability.png", "figures/regimes.png"):
        assert (pipeline / rel).is_file(), rel


def test_every_output_is_stamped(pipeline, workspace):
    from stackforecast.config import RunConfig
    h = RunConfig.load(workspace / "run.cfg").config_hash()
    for p in pipeline.rglob("*"):
        if p.is_file() and p.suffix in (".csv", ".json", ".txt", ".png"):
            assert h.encode() in p.read_bytes(), p


def test_training_ledger_has_no_test_reads(pipeline):
    led = json.loads((pipeline / "evaluation" / "ledger.json").read_text())
    assert not [e for e in led["training"] if e["split"] == "test"]
    assert {e["stage"] for e in led["evaluation"] if e["split"] == "test"} == {"evaluate"}


def test_reruns_are_byte_identical(pipeline, workspace):
    before = listing(pipeline)
    for cmd in ("preprocess", "evaluate", "regime", "report"):
        assert invoke(workspace, cmd) == 0
    after = listing(pipeline)
    assert before == after


def test_same_seed_training_identical(pipeline, workspace, tmp_path):
    assert invoke(workspace, "train", "--artifacts", str(tmp_path / "again")) == 0
    for name in ("weights.json", "meta_gbt.txt", "acb.npz", "tft.npz", "manifest.json"):
        assert (tmp_path / "again" / name).read_bytes() == (pipeline / "artifacts" / name).read_bytes(), name


def test_missing_data_exit_code(workspace, tmp_path):
    assert invoke(workspace, "preprocess", "--data", str(tmp_path / "nope.csv")) == cli.EXIT_IO


def test_bad_config_exit_code(tmp_path):
    (tmp_path / "bad.cfg").write_text("lookback = banana\n")
    assert cli.main(["-q", "preprocess", "--config", str(tmp_path / "bad.cfg")]) == cli.EXIT_VALIDATION
    (tmp_path / "bad.cfg").write_text("no_such_key = 1\n")
    assert cli.main(["-q", "preprocess", "--config", str(tmp_path / "bad.cfg")]) == cli.EXIT_VALIDATION


def test_malformed_data_exit_code(workspace, tmp_path):
    (tmp_path / "d.csv").write_text("Date,Open,High,Low,Close,Volume\n2020-01-01,1,2,0.5,,1\n")
    assert invoke(workspace, "preprocess", "--data", str(tmp_path / "d.csv"),
                  "--out", str(tmp_path / "o")) == cli.EXIT_VALIDATION


def test_tampered_artifacts_exit_code(pipeline, workspace, tmp_path):
    import shutil
    d = tmp_path / "art"
    shutil.copytree(pipeline / "artifacts", d)
    w = json.loads((d / "weights.json").read_text())
    w["W_tft"] = 0.9
    (d / "weights.json").write_text(json.dumps(w))
    assert invoke(workspace, "evaluate", "--artifacts", str(d), "--out", str(tmp_path / "o")) == cli.EXIT_LEDGER


def test_config_mismatch_rejected(pipeline, workspace, tmp_path):
    assert invoke(workspace, "evaluate", "--seed", "9", "--out", str(tmp_path / "o"),
                  "--artifacts", str(pipeline / "artifacts")) == cli.EXIT_VALIDATION


def test_refuses_to_write_into_data_dir(workspace):
    data_dir = workspace / "data"
    before = sorted(p.name for p in data_dir.iterdir())
    assert invoke(workspace, "preprocess", "--out", str(data_dir)) == cli.EXIT_IO
    assert sorted(p.name for p in data_dir.iterdir()) == before


def test_report_needs_evaluation(workspace, pipeline, tmp_path):
    assert invoke(workspace, "report", "--out", str(tmp_path / "o"),
                  "--artifacts", str(pipeline / "artifacts")) == cli.EXIT_IO


def test_stability_command(workspace, tmp_path):
    out = tmp_path / "s"
    assert invoke(workspace, "stability", "--seeds", "0", "1", "--out", str(out)) == 0
    summary = json.loads((out / "stability" / "summary.json").read_text())
    assert summary["seeds"] == [0, 1] and not summary["failures"]
    assert len(list((out / "stability").glob("seed_*.json"))) == 2


def test_preprocess_stdout(workspace, capsys):
    assert invoke(workspace, "preprocess") == 0
    out = capsys.readouterr().out
    assert "rows 620" in out and "train" in out and "config_hash=" in out


def test_console_entry_point(workspace):
    proc = subprocess.run([sys.executable, "-m", "stackforecast.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "preprocess" in proc.stdout
