import numpy as np
import pytest

from stackforecast.config import RunConfig
from stackforecast.market_data import OhlcvSeries

ACCEPTANCE_LINES: list[str] = []


def synthetic_series(n: int = 500, seed: int = 0, start: str = "2020-01-01", drift: float = 0.0,
                     vol: float = 0.02, price: float = 100.0) -> OhlcvSeries:
    """Geometric random walk with consistent OHLC bounds."""
    rng = np.random.default_rng(seed)
    close = price * np.exp(np.cumsum(rng.normal(drift, vol, n)))
    open_ = close * np.exp(rng.normal(0, vol / 4, n))
    high = np.maximum(open_, close) * (1 + rng.uniform(0.001, 0.02, n))
    low = np.minimum(open_, close) * (1 - rng.uniform(0.001, 0.02, n))
    volume = rng.uniform(1e6, 2e6, n)
    dates = np.datetime64(start) + np.arange(n)
    return OhlcvSeries(dates, np.column_stack([open_, high, low, close, volume]))


def tiny_config(**overrides) -> RunConfig:
    base = dict(lookback=8, max_epochs=3, patience=2, acb_hidden1=6, acb_hidden2=4, acb_dense_units=6,
                tft_d_model=6, gbt_n_estimators=25, gbt_min_child_weight=2.0, stability_seeds=(0, 1))
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture
def series():
    return synthetic_series()


@pytest.fixture
def tiny():
    return tiny_config()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
