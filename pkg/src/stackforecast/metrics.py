"""Point-forecast error metrics, MAPE confidence interval and performance gain."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


def _pair(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(y_true, dtype=np.float64)
    p = np.asarray(y_pred, dtype=np.float64)
    if t.shape != p.shape or t.ndim != 1:
        raise ValueError(f"need equal-length 1-d series, got {t.shape} and {p.shape}")
    if t.size == 0:
        raise ValueError("empty series")
    return t, p


def ape(y_true, y_pred) -> np.ndarray:
    """Per-point absolute percentage errors, in percent."""
    t, p = _pair(y_true, y_pred)
    if (t == 0).any():
        raise ValueError("MAPE undefined: a true value is zero")
    return np.abs(t - p) / np.abs(t) * 100.0


def mape(y_true, y_pred) -> float:
    return float(np.mean(ape(y_true, y_pred)))


def mae(y_true, y_pred) -> float:
    t, p = _pair(y_true, y_pred)
    return float(np.mean(np.abs(t - p)))


def rmse(y_true, y_pred) -> float:
    t, p = _pair(y_true, y_pred)
    return float(np.sqrt(np.mean((t - p) ** 2)))


@dataclass(frozen=True)
class MetricsReport:
    mape: float
    mae: float
    rmse: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def metrics_report(y_true, y_pred) -> MetricsReport:
    return MetricsReport(mape(y_true, y_pred), mae(y_true, y_pred), rmse(y_true, y_pred), len(y_true))


@dataclass(frozen=True)
class ConfidenceInterval:
    center: float
    half_width: float
    z: float
    sigma: float
    n: int
    ddof: int

    @property
    def lower(self) -> float:
        return self.center - self.half_width

    @property
    def upper(self) -> float:
        return self.center + self.half_width

    def to_dict(self) -> dict:
        return {**asdict(self), "lower": self.lower, "upper": self.upper, "approximate": True}


def confidence_interval(apes, z: float = 1.96, ddof: int = 1) -> ConfidenceInterval:
    """MAPE +/- z * sigma / sqrt(n) over per-point absolute percentage errors."""
    e = np.asarray(apes, dtype=np.float64)
    if e.size < 2:
        raise ValueError("confidence interval needs at least 2 errors")
    sigma = float(np.std(e, ddof=ddof))
    return ConfidenceInterval(float(e.mean()), z * sigma / np.sqrt(e.size), z, sigma, int(e.size), ddof)


def performance_gain(mape_model: float, mape_naive: float) -> float:
    """Relative MAPE improvement over the naive baseline; negative when worse."""
    if not mape_naive > 0:
        raise ValueError("naive MAPE must be positive")
    return (mape_naive - mape_model) / mape_naive
