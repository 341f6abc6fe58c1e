"""Walk-forward testing with frozen artifacts, the naive baseline, regime statistics and seed sweeps."""
from __future__ import annotations

import csv
import datetime as dt
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .market_data import CLOSE, LeakageError, OhlcvSeries, SplitDataset
from .metrics import ape, confidence_interval, metrics_report, performance_gain
from .stacking import PipelineArtifacts, new_dataset, run_protocol

log = logging.getLogger(__name__)


def naive_persistence(test_closes, previous_close: float) -> np.ndarray:
    """Tomorrow's close predicted as today's close."""
    c = np.asarray(test_closes, dtype=np.float64)
    if c.size == 0:
        raise ValueError("empty test block")
    return np.concatenate([[float(previous_close)], c[:-1]])


@dataclass
class WalkForwardRun:
    dates: np.ndarray
    true: np.ndarray
    p_bl: np.ndarray
    p_tft: np.ndarray
    p_meta: np.ndarray
    naive: np.ndarray
    artifact_hash: str
    config_hash: str
    seed: int

    def __len__(self) -> int:
        return len(self.dates)

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            fh.write(f"# config_hash={self.config_hash}\n# seed={self.seed}\n# artifact_hash={self.artifact_hash}\n")
            w = csv.writer(fh)
            w.writerow(["date", "true", "P_bl", "P_tft", "P_meta", "naive"])
            for row in zip(self.dates, self.true, self.p_bl, self.p_tft, self.p_meta, self.naive):
                w.writerow([str(row[0]), *[repr(float(v)) for v in row[1:]]])


def walk_forward(artifacts: PipelineArtifacts, dataset: SplitDataset) -> WalkForwardRun:
    """One-step-ahead forecasts over the test block with frozen parameters.

    Each day is forecast from history ending the previous day; the observed
    row is appended only afterwards.
    """
    start_hash = artifacts.artifact_hash()
    rows, dates, offset = dataset.history_through("test", stage="evaluate")
    raw_close = dataset.scaler.inverse_feature(rows[:, CLOSE], CLOSE)
    history_rows = list(rows[:offset])
    history_dates = list(dates[:offset])
    out = {k: [] for k in ("p_bl", "p_tft", "p_meta")}
    for t in range(offset, len(rows)):
        p_bl, p_tft, p_meta = artifacts.forecast_next(np.asarray(history_rows), np.asarray(history_dates), dates[t])
        out["p_bl"].append(p_bl)
        out["p_tft"].append(p_tft)
        out["p_meta"].append(p_meta)
        history_rows.append(rows[t])
        history_dates.append(dates[t])
    if artifacts.artifact_hash() != start_hash:
        raise LeakageError("artifacts changed during walk-forward evaluation")
    true = dataset.raw_rows("test", "evaluate")[:, CLOSE]
    return WalkForwardRun(
        dates=dates[offset:], true=true,
        p_bl=np.array(out["p_bl"]), p_tft=np.array(out["p_tft"]), p_meta=np.array(out["p_meta"]),
        naive=naive_persistence(true, raw_close[offset - 1]),
        artifact_hash=start_hash, config_hash=artifacts.config_hash, seed=artifacts.seed)


def evaluation_report(run: WalkForwardRun, z: float = 1.96, ddof: int = 1) -> dict:
    naive = metrics_report(run.true, run.naive)
    report = {"config_hash": run.config_hash, "seed": run.seed, "artifact_hash": run.artifact_hash,
              "n": len(run), "test_first": str(run.dates[0]), "test_last": str(run.dates[-1])}
    for name, pred in (("stacked", run.p_meta), ("acb", run.p_bl), ("tft", run.p_tft), ("naive", run.naive)):
        m = metrics_report(run.true, pred)
        report[name] = {**m.to_dict(),
                        "ci": confidence_interval(ape(run.true, pred), z, ddof).to_dict(),
                        "performance_gain": performance_gain(m.mape, naive.mape)}
    return report


# ---------------------------------------------------------------------------
# regimes

REGIMES = (
    ("Pre-ETF (-180d)", "2023-07-14", "2024-01-09"),
    ("ETF->Halving", "2024-01-10", "2024-04-19"),
    ("Post-halving (+180d)", "2024-04-20", "2024-10-17"),
)


@dataclass
class RegimeStats:
    label: str
    start: dt.date
    end: dt.date
    n: int
    mean_log_return_pct: float
    std_log_return_pct: float
    annualized_volatility: float
    median_volume: float
    mean_volume: float
    median_close: float
    rolling_volatility: np.ndarray = field(repr=False)

    def row(self) -> list:
        return [self.label, str(self.start), str(self.end), self.n, self.mean_log_return_pct,
                self.std_log_return_pct, self.annualized_volatility, self.median_volume,
                self.mean_volume, self.median_close]


REGIME_COLUMNS = ["regime", "start", "end", "n_days", "mean_log_return_pct", "std_log_return_pct",
                  "annualized_volatility", "median_volume", "mean_volume", "median_close"]


def log_returns(close: np.ndarray) -> np.ndarray:
    """r_t = ln(close_t / close_{t-1}); first element NaN."""
    c = np.asarray(close, dtype=np.float64)
    return np.concatenate([[np.nan], np.diff(np.log(c))])


def rolling_volatility(close: np.ndarray, window: int = 30) -> np.ndarray:
    """Annualised (sqrt 365) rolling std of log returns; NaN until a full window exists."""
    r = log_returns(close)
    out = np.full(len(r), np.nan)
    if len(r) > window:
        views = np.lib.stride_tricks.sliding_window_view(r[1:], window)
        out[window:] = views.std(axis=1, ddof=1) * np.sqrt(365)
    return out


def regime_analysis(series: OhlcvSeries, windows: Sequence[tuple[str, str, str]] = REGIMES,
                    vol_window: int = 30, ddof: int = 1) -> list[RegimeStats]:
    """Per-window return, volatility, volume and price statistics.

    Each day's return uses the previous day's close, so the first day of a
    window borrows the close just before it.
    """
    r = log_returns(series.close)
    roll = rolling_volatility(series.close, vol_window)
    out = []
    for label, start, end in windows:
        try:
            a, b = series.index_of(start), series.index_of(end) + 1
        except KeyError as exc:
            raise ValueError(f"regime '{label}' outside data range: {exc}") from None
        if a == 0:
            raise ValueError(f"regime '{label}' needs a close before {start}")
        rr = r[a:b]
        std = float(np.std(rr, ddof=ddof))
        vol = series.volume[a:b]
        out.append(RegimeStats(label, dt.date.fromisoformat(start), dt.date.fromisoformat(end), b - a,
                               float(rr.mean() * 100), std * 100, std * np.sqrt(365),
                               float(np.median(vol)), float(vol.mean()),
                               float(np.median(series.close[a:b])), roll[a:b]))
    return out


def write_regime_csv(stats: Sequence[RegimeStats], path, header_extra: dict | None = None) -> None:
    with Path(path).open("w", newline="") as fh:
        for k, v in (header_extra or {}).items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh)
        w.writerow(REGIME_COLUMNS)
        for s in stats:
            w.writerow(s.row())


# ---------------------------------------------------------------------------
# seed sweeps


def run_seed(series: OhlcvSeries, config: RunConfig) -> dict:
    """Fit, freeze and walk forward once; returns the evaluation report."""
    dataset = new_dataset(series, config)
    art = run_protocol(dataset, config)
    run = walk_forward(art, dataset)
    return evaluation_report(run, config.ci_z, config.ci_ddof)


def _safe_run(args) -> dict:
    series, config = args
    try:
        return {"ok": True, "report": run_seed(series, config)}
    except Exception as exc:  # recorded, never dropped
        log.exception("seed %d failed", config.seed)
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}


def summarize(reports: Sequence[dict]) -> dict:
    summary: dict = {}
    for model in ("stacked", "acb", "tft", "naive"):
        summary[model] = {}
        for metric in ("mape", "mae", "rmse"):
            v = np.array([r[model][metric] for r in reports])
            summary[model][metric] = {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
                                      "min": float(v.min()), "max": float(v.max())}
    return summary


def stability_study(series: OhlcvSeries, config: RunConfig, seeds: Sequence[int] | None = None,
                    workers: int | None = None) -> dict:
    seeds = list(config.stability_seeds if seeds is None else seeds)
    jobs = [(series, config.replace(seed=s)) for s in seeds]
    workers = workers or config.workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_safe_run, jobs))
    else:
        results = [_safe_run(j) for j in jobs]
    runs = [{"seed": s, **r} for s, r in zip(seeds, results)]
    ok = [r["report"] for r in runs if r["ok"]]
    return {"seeds": seeds, "runs": runs, "failures": [r for r in runs if not r["ok"]],
            "summary": summarize(ok) if ok else None}


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")
