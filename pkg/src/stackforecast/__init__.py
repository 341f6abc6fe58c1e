"""Stacked next-day BTC-USD forecasting: two neural base learners, inverse-error weighting and a boosted-tree meta-learner."""
from .config import RunConfig
from .evaluation import naive_persistence, regime_analysis, stability_study, walk_forward
from .market_data import OhlcvSeries, SplitDataset, load_ohlcv
from .metrics import confidence_interval, mae, mape, performance_gain, rmse
from .stacking import PipelineArtifacts, compute_weights, run_protocol

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "OhlcvSeries", "SplitDataset", "load_ohlcv", "PipelineArtifacts", "compute_weights",
    "run_protocol", "walk_forward", "naive_persistence", "regime_analysis", "stability_study",
    "mape", "mae", "rmse", "confidence_interval", "performance_gain",
]
