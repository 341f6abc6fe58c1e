import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stackforecast import evaluation as ev
from stackforecast.market_data import CLOSE, LeakageError, OhlcvSeries
from stackforecast.metrics import ape, confidence_interval, mae, mape, metrics_report, performance_gain, rmse
from stackforecast.stacking import new_dataset, run_protocol

from conftest import synthetic_series, tiny_config


# ---------------------------------------------------------------------------
# metrics


def test_metrics_small_example():
    t, p = [100.0, 200.0], [110.0, 190.0]
    assert mape(t, p) == pytest.approx(7.5)
    assert mae(t, p) == 10.0
    assert rmse(t, p) == 10.0


def test_perfect_forecast_is_zero():
    t = [1.0, 5.0, 9.0]
    assert (mape(t, t), mae(t, t), rmse(t, t)) == (0.0, 0.0, 0.0)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40), st.floats(1e-3, 1e3))
def test_metric_properties(seed, n, k):
    rng = np.random.default_rng(seed)
    t = rng.uniform(1, 100, n)
    p = t + rng.normal(0, 5, n)
    assert rmse(t, p) >= mae(t, p) - 1e-12
    assert mape(t * k, p * k) == pytest.approx(mape(t, p), rel=1e-9)
    assert mae(t * k, p * k) == pytest.approx(k * mae(t, p), rel=1e-9)


def test_metrics_reject_bad_input():
    with pytest.raises(ValueError):
        mape([0.0, 1.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        mae([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        rmse([], [])


def test_confidence_interval_two_points():
    ci = confidence_interval([1.0, 3.0], ddof=0)
    assert ci.center == 2.0
    assert ci.half_width == pytest.approx(1.96 / math.sqrt(2))
    assert ci.half_width == pytest.approx(1.386, abs=1e-3)
    # sample standard deviation by default
    assert confidence_interval([1.0, 3.0]).half_width == pytest.approx(1.96 * math.sqrt(2) / math.sqrt(2))
    assert confidence_interval([2.0, 2.0, 2.0]).half_width == 0.0
    with pytest.raises(ValueError):
        confidence_interval([1.0])


def test_performance_gain_values():
    assert performance_gain(0.65, 2.00) == 0.675
    assert performance_gain(2.0, 2.0) == 0.0
    assert performance_gain(3.0, 2.0) == -0.5
    with pytest.raises(ValueError):
        performance_gain(1.0, 0.0)


def test_naive_persistence_shift():
    np.testing.assert_array_equal(ev.naive_persistence([10.0, 11.0, 12.0], 9.0), [9.0, 10.0, 11.0])
    with pytest.raises(ValueError):
        ev.naive_persistence([], 1.0)


# ---------------------------------------------------------------------------
# walk-forward


@pytest.fixture(scope="module")
def frozen():
    series = synthetic_series(500, seed=5)
    cfg = tiny_config()
    ds = new_dataset(series, cfg)
    art = run_protocol(ds, cfg)
    return series, cfg, art, ev.walk_forward(art, ds), ds


def test_walk_forward_covers_test_block(frozen):
    series, cfg, art, run, ds = frozen
    b = ds.boundaries
    assert len(run) == b.n_test
    np.testing.assert_array_equal(run.true, series.close[b.n_train + b.n_val:])
    assert run.naive[0] == series.close[b.n_train + b.n_val - 1]
    assert run.artifact_hash == art.artifact_hash()


def test_walk_forward_matches_single_forecasts(frozen):
    series, cfg, art, run, ds = frozen
    rows, dates, offset = ds.history_through("test", "check")
    for k in (0, 7, len(run) - 1):
        t = offset + k
        assert art.forecast_next(rows[:t], dates[:t], dates[t]) == (run.p_bl[k], run.p_tft[k], run.p_meta[k])


def test_truncation_probe(frozen):
    """Rewriting every day after t leaves forecasts up to day t unchanged."""
    series, cfg, art, run, ds = frozen
    start = ds.boundaries.n_train + ds.boundaries.n_val
    cut = start + 20
    vals = series.values.copy()
    vals[cut + 1:] *= 1.7
    probe_ds = new_dataset(OhlcvSeries(series.dates, vals), cfg)
    probe = ev.walk_forward(art, probe_ds)
    k = cut - start
    for name in ("p_bl", "p_tft", "p_meta"):
        a, b = getattr(run, name), getattr(probe, name)
        np.testing.assert_array_equal(a[:k + 1], b[:k + 1])
        assert not np.array_equal(a[k + 2:], b[k + 2:])


def test_evaluation_ledger_only_reads_test_at_evaluate(frozen):
    series, cfg, art, _, _ = frozen
    ds = new_dataset(series, cfg)
    ev.walk_forward(art, ds)
    test_reads = [e for e in ds.ledger.to_list() if e["split"] == "test"]
    assert test_reads and all(e["stage"] == "evaluate" for e in test_reads)


def test_walk_forward_detects_mutation(frozen, monkeypatch):
    series, cfg, art, run, _ = frozen
    original = art.forecast_next
    calls = []

    def mutating(*a):
        calls.append(1)
        if len(calls) == 3:
            art.meta.trees[0].nodes[0].value += 1.0
        return original(*a)

    monkeypatch.setattr(art, "forecast_next", mutating)
    try:
        with pytest.raises(LeakageError):
            ev.walk_forward(art, new_dataset(series, cfg))
    finally:
        art.meta.trees[0].nodes[0].value -= 1.0


def test_report_fields(frozen, tmp_path):
    series, cfg, art, run, ds = frozen
    rep = ev.evaluation_report(run)
    assert rep["stacked"]["mape"] == pytest.approx(mape(run.true, run.p_meta))
    assert rep["naive"]["performance_gain"] == 0.0
    assert rep["stacked"]["ci"]["half_width"] == pytest.approx(
        1.96 * np.std(ape(run.true, run.p_meta), ddof=1) / math.sqrt(len(run)))
    assert rep["stacked"]["ci"]["approximate"] is True
    run.write_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == f"# config_hash={cfg.config_hash()}"
    assert lines[3] == "date,true,P_bl,P_tft,P_meta,naive"
    assert len(lines) == 4 + len(run)


# ---------------------------------------------------------------------------
# regimes


def constant_series(start="2023-01-01", end="2024-12-31", price=50.0):
    dates = np.arange(np.datetime64(start), np.datetime64(end) + 1)
    return OhlcvSeries(dates, np.tile([price, price, price, price, 1e9], (len(dates), 1)))


def test_regime_counts_and_zero_volatility():
    stats = ev.regime_analysis(constant_series())
    assert [s.n for s in stats] == [180, 101, 181]
    assert [s.start for s in stats] == [dt.date(2023, 7, 14), dt.date(2024, 1, 10), dt.date(2024, 4, 20)]
    for s in stats:
        assert s.std_log_return_pct == 0.0 and s.annualized_volatility == 0.0 and s.mean_log_return_pct == 0.0
        assert s.median_close == 50.0 and s.median_volume == 1e9


def test_regime_statistics_against_loop():
    s = synthetic_series(731, seed=9, start="2023-01-01")
    stats = ev.regime_analysis(s)
    label, start, end = ev.REGIMES[1]
    a, b = s.index_of(start), s.index_of(end)
    r = [math.log(s.close[i] / s.close[i - 1]) for i in range(a, b + 1)]
    m = sum(r) / len(r)
    sd = math.sqrt(sum((x - m) ** 2 for x in r) / (len(r) - 1))
    got = stats[1]
    assert got.mean_log_return_pct == pytest.approx(100 * m, rel=1e-10)
    assert got.std_log_return_pct == pytest.approx(100 * sd, rel=1e-10)
    assert got.annualized_volatility == pytest.approx(sd * math.sqrt(365), rel=1e-10)
    assert got.median_close == pytest.approx(float(np.median(s.close[a:b + 1])))


def test_rolling_volatility_window():
    c = synthetic_series(100).close
    roll = ev.rolling_volatility(c, 30)
    assert np.isnan(roll[:30]).all() and np.isfinite(roll[30:]).all()
    r = np.diff(np.log(c))
    assert roll[45] == pytest.approx(np.std(r[15:45], ddof=1) * math.sqrt(365), rel=1e-12)


def test_regime_outside_range():
    with pytest.raises(ValueError, match="outside data range"):
        ev.regime_analysis(synthetic_series(100))
    with pytest.raises(ValueError, match="needs a close before"):
        ev.regime_analysis(constant_series(start="2023-07-14"))


# ---------------------------------------------------------------------------
# stability


def test_stability_duplicate_seeds_agree():
    series = synthetic_series(300, seed=2)
    res = ev.stability_study(series, tiny_config(max_epochs=2, gbt_n_estimators=10), seeds=[4, 4, 5])
    assert not res["failures"]
    r = [x["report"] for x in res["runs"]]
    assert r[0] == r[1]
    assert r[0]["stacked"]["mape"] != r[2]["stacked"]["mape"]
    vals = [x["stacked"]["mape"] for x in r]
    assert res["summary"]["stacked"]["mape"]["mean"] == pytest.approx(np.mean(vals))
    assert res["summary"]["stacked"]["mape"]["std"] == pytest.approx(np.std(vals, ddof=1))


def test_stability_records_failures():
    series = synthetic_series(300, seed=2)
    res = ev.stability_study(series, tiny_config(lookback=250, max_epochs=1), seeds=[0])
    assert len(res["failures"]) == 1 and res["summary"] is None
    assert "Error" in res["failures"][0]["error"]


def test_stability_parallel_matches_serial():
    series = synthetic_series(300, seed=2)
    cfg = tiny_config(max_epochs=1, gbt_n_estimators=5)
    a = ev.stability_study(series, cfg, seeds=[0, 1], workers=1)
    b = ev.stability_study(series, cfg, seeds=[0, 1], workers=2)
    assert a["runs"] == b["runs"]
