"""Batch command line: preprocess, train, evaluate, stability, regime, report.

Every file written carries the config hash and seed. Outputs go under the
run directory (``--out`` or ``out_dir`` in the config):

    preprocess/  normalized.csv outliers.csv regimes.csv splits.json
    artifacts/   frozen models, weights, meta-learner, ledger, histories
    evaluation/  predictions.csv metrics.json ledger.json
    stability/   seed_<i>_<seed>.json summary.json
    regime/      regimes.csv rolling_volatility.csv
    figures/     *.png
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import market_data as md
from . import plotting
from .config import ConfigError, RunConfig
from .kernel import NonFiniteError
from .stacking import PipelineArtifacts, new_dataset, run_protocol, tft_window
from .tft import variable_names
from .trainer import TrainingError

log = logging.getLogger("stackforecast")

EXIT_OK = 0
EXIT_IO = 3
EXIT_VALIDATION = 4
EXIT_TRAINING = 5
EXIT_LEDGER = 6


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    if getattr(args, "data", None):
        changes["data_path"] = args.data
    if getattr(args, "workers", None):
        changes["workers"] = args.workers
    return cfg.replace(**changes) if changes else cfg


def _stamp(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed}


def _guard(d: Path, cfg: RunConfig) -> Path:
    """Outputs never land in the dataset's own directory."""
    data_dir = Path(cfg.data_path).resolve().parent
    if d.resolve() == data_dir or Path(cfg.out_dir).resolve() == data_dir:
        raise CliError(f"refusing to write into the dataset directory {data_dir}", EXIT_IO)
    return d


def _outdir(cfg: RunConfig, sub: str) -> Path:
    d = _guard(Path(cfg.out_dir).resolve() / sub, cfg)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_series(cfg: RunConfig) -> md.OhlcvSeries:
    path = Path(cfg.data_path)
    if not path.is_file():
        raise CliError(f"dataset not found: {path}", EXIT_IO)
    return md.load_ohlcv(path)


def _artifacts_dir(cfg: RunConfig, args) -> Path:
    return Path(args.artifacts) if getattr(args, "artifacts", None) else Path(cfg.out_dir) / "artifacts"


def _write_json(obj, path) -> None:
    ev.dump_json(obj, path)


def _dmy(d) -> str:
    return np.datetime64(d, "D").astype(object).strftime("%d/%m/%Y")


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(cfg: RunConfig, args) -> int:
    series = _load_series(cfg)
    dataset = new_dataset(series, cfg)
    b = dataset.boundaries
    out = _outdir(cfg, "preprocess")
    stamp = _stamp(cfg)
    md.write_normalized_csv(series, b, dataset.scaler, out / "normalized.csv", stamp)
    report = md.zscore_outliers(series, b.n_train, cfg.outlier_threshold, cfg.outlier_feature, cfg.outlier_ddof)
    report.write_csv(out / "outliers.csv", header_extra=stamp)
    _write_json({**stamp, "rows": b.n, "splits": b.as_dict(), "scaler": dataset.scaler.to_dict(),
                 "outliers": {"feature": report.feature, "count": report.count, "fraction": report.fraction}},
                out / "splits.json")
    try:
        stats = ev.regime_analysis(series, vol_window=cfg.volatility_window)
        ev.write_regime_csv(stats, out / "regimes.csv", stamp)
    except ValueError as exc:
        log.warning("regime table skipped: %s", exc)

    print(f"rows {b.n}  {_dmy(series.dates[0])} .. {_dmy(series.dates[-1])}")
    for name, info in zip(("train", "validation", "test"), (b.train_dates, b.val_dates, b.test_dates)):
        a, z = b.ranges()[name]
        print(f"{name:<11} {z - a:>5} rows  {_dmy(info[0])} .. {_dmy(info[1])}")
    print(f"outliers ({report.feature}, |z|>{report.threshold:g}): {report.count} "
          f"({100 * report.fraction:.2f}%)")
    print(f"config_hash={stamp['config_hash']} seed={cfg.seed}  -> {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    _guard(_artifacts_dir(cfg, args), cfg)
    series = _load_series(cfg)
    dataset = new_dataset(series, cfg)
    art = run_protocol(dataset, cfg)
    d = _guard(_artifacts_dir(cfg, args), cfg)
    d.mkdir(parents=True, exist_ok=True)
    art.save(d)
    w = art.weights
    print(f"validation MAPE  ACB {w.error_bl:.4f}%  TFT {w.error_tft:.4f}%  "
          f"stacked {art.validation['mape_meta']:.4f}%")
    print(f"weights W_bl={w.w_bl:.4f} W_tft={w.w_tft:.4f}  meta trees {len(art.meta.trees)}")
    print(f"config_hash={art.config_hash} seed={art.seed} artifact_hash={art.artifact_hash()[:16]}  -> {d}")
    return EXIT_OK


def _frozen(cfg: RunConfig, args) -> PipelineArtifacts:
    d = _artifacts_dir(cfg, args)
    if not (d / "manifest.json").is_file():
        raise CliError(f"no frozen artifacts in {d}", EXIT_IO)
    art = PipelineArtifacts.load(d)
    if art.config_hash != cfg.config_hash():
        raise CliError(f"artifacts were trained under config {art.config_hash}, "
                       f"current config is {cfg.config_hash()}", EXIT_VALIDATION)
    return art


def cmd_evaluate(cfg: RunConfig, args) -> int:
    art = _frozen(cfg, args)
    dataset = new_dataset(_load_series(cfg), cfg)
    if not (np.array_equal(dataset.scaler.minimum, art.scaler.minimum)
            and np.array_equal(dataset.scaler.maximum, art.scaler.maximum)):
        raise md.LeakageError("scaler in artifacts differs from a train-only refit on this dataset")
    run = ev.walk_forward(art, dataset)
    report = ev.evaluation_report(run, cfg.ci_z, cfg.ci_ddof)
    out = _outdir(cfg, "evaluation")
    run.write_csv(out / "predictions.csv")
    _write_json(report, out / "metrics.json")
    _write_json({**_stamp(cfg), "training": art.ledger, "evaluation": dataset.ledger.to_list()},
                out / "ledger.json")

    print(f"test block {report['test_first']} .. {report['test_last']}  n={report['n']}")
    print(f"{'model':<8} {'MAPE%':>8} {'MAE':>10} {'RMSE':>10} {'CI95 +/-':>9} {'PG':>7}")
    for name in ("naive", "acb", "tft", "stacked"):
        r = report[name]
        print(f"{name:<8} {r['mape']:>8.4f} {r['mae']:>10.2f} {r['rmse']:>10.2f} "
              f"{r['ci']['half_width']:>9.4f} {r['performance_gain']:>7.3f}")
    print(f"config_hash={run.config_hash} seed={run.seed}  -> {out}")
    return EXIT_OK


def cmd_stability(cfg: RunConfig, args) -> int:
    series = _load_series(cfg)
    seeds = args.seeds if args.seeds else list(cfg.stability_seeds)
    result = ev.stability_study(series, cfg, seeds, cfg.workers)
    out = _outdir(cfg, "stability")
    for i, r in enumerate(result["runs"]):
        _write_json({"config_hash": cfg.replace(seed=r["seed"]).config_hash(), **r},
                    out / f"seed_{i:02d}_{r['seed']}.json")
    _write_json({**_stamp(cfg), "seeds": result["seeds"], "summary": result["summary"],
                 "failures": result["failures"]}, out / "summary.json")
    for r in result["runs"]:
        if r["ok"]:
            rep = r["report"]
            print(f"seed {r['seed']:>6}  stacked {rep['stacked']['mape']:.4f}%  "
                  f"acb {rep['acb']['mape']:.4f}%  tft {rep['tft']['mape']:.4f}%")
        else:
            print(f"seed {r['seed']:>6}  FAILED {r['error']}")
    if result["summary"]:
        s = result["summary"]
        for m in ("stacked", "acb", "tft", "naive"):
            print(f"{m:<8} MAPE mean {s[m]['mape']['mean']:.4f}  std {s[m]['mape']['std']:.4f}")
    print(f"config_hash={cfg.config_hash()} seed={cfg.seed}  -> {out}")
    return EXIT_TRAINING if result["failures"] else EXIT_OK


def cmd_regime(cfg: RunConfig, args) -> int:
    series = _load_series(cfg)
    stats = ev.regime_analysis(series, vol_window=cfg.volatility_window)
    out = _outdir(cfg, "regime")
    stamp = _stamp(cfg)
    ev.write_regime_csv(stats, out / "regimes.csv", stamp)
    roll = ev.rolling_volatility(series.close, cfg.volatility_window)
    with (out / "rolling_volatility.csv").open("w", newline="") as fh:
        for k, v in stamp.items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh)
        w.writerow(["date", "close", "volume", "rolling_volatility"])
        for d, c, v, r in zip(series.dates, series.close, series.volume, roll):
            w.writerow([str(d), repr(float(c)), repr(float(v)), "" if np.isnan(r) else repr(float(r))])
    print(f"{'regime':<22} {'N':>4} {'mean r%':>8} {'std r%':>7} {'ann.vol':>7} {'median close':>13}")
    for s in stats:
        print(f"{s.label:<22} {s.n:>4} {s.mean_log_return_pct:>8.3f} {s.std_log_return_pct:>7.3f} "
              f"{s.annualized_volatility:>7.3f} {s.median_close:>13.2f}")
    print(f"config_hash={stamp['config_hash']} seed={cfg.seed}  -> {out}")
    return EXIT_OK


def _read_predictions(path: Path) -> dict[str, np.ndarray]:
    with path.open() as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    if not rows:
        raise CliError(f"{path}: no predictions", EXIT_VALIDATION)
    out = {"date": np.array([r["date"] for r in rows], dtype="datetime64[D]")}
    for k in ("true", "P_bl", "P_tft", "P_meta", "naive"):
        out[k] = np.array([float(r[k]) for r in rows])
    return out


def cmd_report(cfg: RunConfig, args) -> int:
    """Render figures from files the other commands wrote; reruns nothing."""
    art = _frozen(cfg, args)
    eval_dir = Path(cfg.out_dir) / "evaluation"
    if not (eval_dir / "metrics.json").is_file():
        raise CliError(f"run 'evaluate' first: {eval_dir / 'metrics.json'} missing", EXIT_IO)
    metrics = json.loads((eval_dir / "metrics.json").read_text())
    pred = _read_predictions(eval_dir / "predictions.csv")
    out = _outdir(cfg, "figures")
    stamp = _stamp(cfg)
    written = [
        plotting.training_curves(art.histories, out / "training_curves.png", stamp),
        plotting.prediction_series(pred["date"], pred["true"],
                                   {"acb": pred["P_bl"], "tft": pred["P_tft"], "stacked": pred["P_meta"]},
                                   out / "test_predictions.png", stamp),
        plotting.metric_bars(metrics, out / "test_mape.png", stamp),
    ]
    if art.validation:
        v = art.validation
        written.append(plotting.prediction_series(
            v["dates"], v["true"], {"acb": np.array(v["p_bl"]), "tft": np.array(v["p_tft"]),
                                    "stacked": np.array(v["p_meta"])},
            out / "validation_predictions.png", stamp, title="Validation forecasts (meta-learner fit block)"))

    series = _load_series(cfg)
    dataset = new_dataset(series, cfg)
    rows, dates, _ = dataset.history_through("validation", stage="report")
    window = tft_window(rows, dates, dates[-1] + np.timedelta64(1, "D"), art.lookback)[0]
    sel, att = art.tft.interpretability(window)
    written.append(plotting.selection_heatmap(sel, variable_names(), out / "tft_interpretability.png",
                                              stamp, attention=att))
    try:
        ev.regime_analysis(series, vol_window=cfg.volatility_window)
        plotting.regime_panel(series.dates, series.close, series.volume,
                              ev.rolling_volatility(series.close, cfg.volatility_window), ev.REGIMES,
                              out / "regimes.png", stamp)
        written.append(out / "regimes.png")
    except ValueError as exc:
        log.warning("regime figure skipped: %s", exc)

    s = metrics["stacked"]
    print(f"stacked test MAPE {s['mape']:.4f}% (+/- {s['ci']['half_width']:.4f}, approximate)  "
          f"MAE {s['mae']:.2f}  RMSE {s['rmse']:.2f}  PG {s['performance_gain']:.3f}")
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "stability": cmd_stability,
    "regime": cmd_regime,
    "report": cmd_report,
}


HELP = {
    "preprocess": "load, split and normalise the CSV; outlier and regime tables",
    "train": "fit base learners, weights and meta-learner; freeze artifacts",
    "evaluate": "walk-forward test with frozen artifacts against naive persistence",
    "stability": "repeat train + evaluate over several seeds",
    "regime": "return, volatility and volume statistics around the 2024 events",
    "report": "render figures from files the other commands wrote",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stackforecast", description="Stacked BTC-USD next-day forecasting pipeline.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=HELP[name], description=HELP[name])
        sp.add_argument("--config", help="key = value config file (defaults otherwise)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="run directory (overrides out_dir)")
        sp.add_argument("--data", help="OHLCV CSV (overrides data_path)")
        if name in ("train", "evaluate", "report"):
            sp.add_argument("--artifacts", help="artifacts directory (default <out>/artifacts)")
        if name == "stability":
            sp.add_argument("--seeds", type=int, nargs="+", help="seed list (default stability_seeds)")
            sp.add_argument("--workers", type=int, help="parallel seed runs")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](cfg, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except md.LeakageError as exc:
        print(f"ledger violation: {exc}", file=sys.stderr)
        return EXIT_LEDGER
    except (TrainingError, NonFiniteError, FloatingPointError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (ConfigError, md.DataError, ValueError, KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
