"""Time-series stacking protocol.

Both base learners are fitted on the training split, their one-step-ahead
validation forecasts set inverse-MAPE weights, and the boosted meta-learner is
fitted on the weighted validation forecasts. Everything is then frozen; the
test split is never read here.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gbt
from .acb import AcbModel
from .config import RunConfig
from .market_data import (CLOSE, AccessLedger, LeakageError, MinMaxScaler, SplitDataset, calendar_covariates,
                          make_windows, tft_inputs, windows_ending_before)
from .metrics import mape
from .tft import TftModel
from .trainer import TrainHistory, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StackingWeights:
    w_bl: float
    w_tft: float
    error_bl: float
    error_tft: float

    def to_dict(self) -> dict:
        return {"W_bl": self.w_bl, "W_tft": self.w_tft, "Error_bl": self.error_bl, "Error_tft": self.error_tft}

    @classmethod
    def from_dict(cls, d: dict) -> "StackingWeights":
        return cls(d["W_bl"], d["W_tft"], d["Error_bl"], d["Error_tft"])


def compute_weights(error_bl: float, error_tft: float) -> StackingWeights:
    """Inverse-error weights: each learner gets (1/e) / (1/e_bl + 1/e_tft)."""
    if not (error_bl > 0 and error_tft > 0):
        raise ValueError(f"errors must be positive, got {error_bl}, {error_tft}")
    inv_bl, inv_tft = 1.0 / error_bl, 1.0 / error_tft
    total = inv_bl + inv_tft
    return StackingWeights(inv_bl / total, inv_tft / total, float(error_bl), float(error_tft))


def build_meta_features(preds_bl, preds_tft, weights: StackingWeights) -> np.ndarray:
    """(n, 2) matrix [W_bl * P_bl(t), W_tft * P_tft(t)]; components are kept separate."""
    a = np.asarray(preds_bl, dtype=np.float64)
    b = np.asarray(preds_tft, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"prediction sequences differ in length: {a.shape} vs {b.shape}")
    return np.column_stack([weights.w_bl * a, weights.w_tft * b])


# ---------------------------------------------------------------------------
# inputs


def acb_window(rows_norm: np.ndarray, lookback: int) -> np.ndarray:
    return rows_norm[-lookback:][None]


def tft_window(rows_norm: np.ndarray, dates: np.ndarray, next_date, lookback: int) -> np.ndarray:
    """Last ``lookback`` rows, each paired with the following day's calendar."""
    rows = rows_norm[-lookback:]
    cal_dates = np.append(np.asarray(dates[-lookback:], dtype="datetime64[D]"),
                          np.datetime64(next_date, "D"))
    return tft_inputs(rows, calendar_covariates(cal_dates))[None]


def training_samples(dataset: SplitDataset, lookback: int, stage: str = "train_base"):
    rows = dataset.rows("train", stage)
    dates = dataset.dates("train")
    # calendar for one day past the split is a date fact, not market data
    cal = calendar_covariates(np.append(dates, dates[-1] + np.timedelta64(1, "D")))
    Xa, y = make_windows(rows, lookback)
    Xt, yt = make_windows(tft_inputs(rows, cal), lookback, target_col=CLOSE)
    assert np.array_equal(y, yt)
    return Xa, Xt, y


def split_samples(dataset: SplitDataset, split: str, lookback: int, stage: str):
    """One-step-ahead windows for every day of ``split``, history drawn from earlier rows."""
    rows, dates, offset = dataset.history_through(split, stage)
    targets = np.arange(offset, len(rows))
    cal = calendar_covariates(np.append(dates, dates[-1] + np.timedelta64(1, "D")))
    Xa = windows_ending_before(rows, targets, lookback)
    Xt = windows_ending_before(tft_inputs(rows, cal), targets, lookback)
    return Xa, Xt, rows[targets, CLOSE], dates[targets]


# ---------------------------------------------------------------------------
# artifacts


@dataclass
class PipelineArtifacts:
    acb: AcbModel
    tft: TftModel
    weights: StackingWeights
    meta: gbt.BoostedEnsemble
    scaler: MinMaxScaler
    lookback: int
    meta_residual: bool
    config_hash: str
    seed: int
    histories: dict[str, TrainHistory] = field(default_factory=dict)
    ledger: list[dict] = field(default_factory=list)
    validation: dict = field(default_factory=dict)

    def artifact_hash(self) -> str:
        h = hashlib.sha256()
        for model in (self.acb, self.tft):
            for k in sorted(model.params):
                h.update(k.encode())
                h.update(np.ascontiguousarray(model.params[k].value).tobytes())
        h.update(json.dumps(self.weights.to_dict(), sort_keys=True).encode())
        h.update(self.meta.to_text().encode())
        h.update(json.dumps(self.scaler.to_dict(), sort_keys=True).encode())
        h.update(f"{self.lookback}|{self.meta_residual}".encode())
        return h.hexdigest()

    # -- inference ----------------------------------------------------------
    def meta_predict(self, p_bl: np.ndarray, p_tft: np.ndarray) -> np.ndarray:
        feats = build_meta_features(p_bl, p_tft, self.weights)
        margin = feats.sum(axis=1) if self.meta_residual else None
        return self.meta.predict(feats, base_margin=margin)

    def forecast_next(self, rows_norm: np.ndarray, dates: np.ndarray, next_date) -> tuple[float, float, float]:
        """USD forecasts (ACB, TFT, stacked) for ``next_date`` from history ending the day before."""
        if len(rows_norm) < self.lookback:
            raise ValueError(f"need {self.lookback} rows of history, got {len(rows_norm)}")
        p_bl = float(self.acb.predict(acb_window(rows_norm, self.lookback))[0])
        p_tft = float(self.tft.predict(tft_window(rows_norm, dates, next_date, self.lookback))[0])
        usd = self.scaler.inverse_feature(np.array([p_bl, p_tft]), CLOSE)
        meta = float(self.meta_predict(usd[:1], usd[1:])[0])
        return float(usd[0]), float(usd[1]), meta

    # -- directory form -----------------------------------------------------
    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.acb.save(d / "acb.npz")
        self.tft.save(d / "tft.npz")
        self.meta.save(d / "meta_gbt.txt", {"config_hash": self.config_hash, "seed": self.seed})
        (d / "weights.json").write_text(json.dumps(
            {**self.weights.to_dict(), "config_hash": self.config_hash, "seed": self.seed},
            indent=2, sort_keys=True) + "\n")
        (d / "ledger.json").write_text(json.dumps(
            {"config_hash": self.config_hash, "seed": self.seed, "entries": self.ledger}, indent=2) + "\n")
        manifest = {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "lookback": self.lookback,
            "meta_residual": self.meta_residual,
            "scaler": self.scaler.to_dict(),
            "artifact_hash": self.artifact_hash(),
            "param_audit": {"acb": self.acb.param_audit(), "tft": self.tft.param_audit()},
            "histories": {k: v.to_dict() for k, v in self.histories.items()},
            "validation": self.validation,
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        for name, hist in self.histories.items():
            hist.write_csv(d / f"history_{name}.csv", {"config_hash": self.config_hash, "seed": self.seed})
        return d

    @classmethod
    def load(cls, directory) -> "PipelineArtifacts":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        weights = json.loads((d / "weights.json").read_text())
        ledger = json.loads((d / "ledger.json").read_text())["entries"]
        art = cls(
            acb=AcbModel.load(d / "acb.npz"),
            tft=TftModel.load(d / "tft.npz"),
            weights=StackingWeights.from_dict(weights),
            meta=gbt.BoostedEnsemble.load(d / "meta_gbt.txt"),
            scaler=MinMaxScaler.from_dict(manifest["scaler"]),
            lookback=int(manifest["lookback"]),
            meta_residual=bool(manifest["meta_residual"]),
            config_hash=manifest["config_hash"],
            seed=int(manifest["seed"]),
            ledger=ledger,
            validation=manifest.get("validation", {}),
        )
        for name, h in manifest.get("histories", {}).items():
            art.histories[name] = TrainHistory(h["train_loss"], h["val_loss"], h["best_epoch"], h["stop_reason"])
        if art.artifact_hash() != manifest["artifact_hash"]:
            raise LeakageError(f"{d}: artifact hash mismatch (files modified after freezing)")
        return art


# ---------------------------------------------------------------------------
# protocol


def derive_seeds(seed: int) -> dict[str, int]:
    children = np.random.SeedSequence(seed).spawn(5)
    names = ("acb_init", "acb_train", "tft_init", "tft_train", "meta")
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


def fit_base_learners(dataset: SplitDataset, config: RunConfig):
    seeds = derive_seeds(config.seed)
    L = config.lookback
    Xa, Xt, y = training_samples(dataset, L)
    Va, Vt, vy, vdates = split_samples(dataset, "validation", L, stage="validate")
    acb = AcbModel(config.acb_architecture(), seed=seeds["acb_init"])
    tft = TftModel(config.tft_architecture(), seed=seeds["tft_init"])
    log.info("training ACB on %d windows", len(Xa))
    h_acb = train(acb, (Xa, y), (Va, vy), config.train_config("acb", seeds["acb_train"]))
    log.info("ACB: %s (best epoch %s)", h_acb.stop_reason, h_acb.best_epoch)
    log.info("training TFT on %d windows", len(Xt))
    h_tft = train(tft, (Xt, y), (Vt, vy), config.train_config("tft", seeds["tft_train"]))
    log.info("TFT: %s (best epoch %s)", h_tft.stop_reason, h_tft.best_epoch)
    return acb, tft, {"acb": h_acb, "tft": h_tft}, (Va, Vt, vdates)


def run_protocol(dataset: SplitDataset, config: RunConfig) -> PipelineArtifacts:
    """Steps i-vii of the stacking protocol; returns frozen artifacts."""
    acb, tft, histories, (Va, Vt, vdates) = fit_base_learners(dataset, config)
    scaler = dataset.scaler

    # ii. one-step-ahead validation forecasts in USD
    p_bl = scaler.inverse_feature(acb.predict(Va), CLOSE)
    p_tft = scaler.inverse_feature(tft.predict(Vt), CLOSE)
    y_val = dataset.raw_rows("validation", "stack")[:, CLOSE]

    # iii. weights from validation MAPE
    weights = compute_weights(mape(y_val, p_bl), mape(y_val, p_tft))
    log.info("weights W_bl=%.4f W_tft=%.4f (validation MAPE %.3f%% / %.3f%%)",
             weights.w_bl, weights.w_tft, weights.error_bl, weights.error_tft)

    # iv-v. weighted meta-features and the meta-learner, validation rows only
    feats = build_meta_features(p_bl, p_tft, weights)
    margin = feats.sum(axis=1) if config.meta_residual else None
    n_fit = len(y_val) - int(round(config.meta_holdout_fraction * len(y_val)))
    fit_idx = slice(0, n_fit)
    eval_idx = slice(n_fit, None) if n_fit < len(y_val) else slice(0, None)
    meta = gbt.fit(feats[fit_idx], y_val[fit_idx], config.gbt_config(derive_seeds(config.seed)["meta"]),
                   eval_set=(feats[eval_idx], y_val[eval_idx]),
                   base_margin=None if margin is None else margin[fit_idx],
                   eval_margin=None if margin is None else margin[eval_idx])
    log.info("meta-learner kept %d trees", len(meta.trees))

    # vi-vii. freeze; prove the test split was never touched
    dataset.assert_no_test_reads()
    art = PipelineArtifacts(acb=acb, tft=tft, weights=weights, meta=meta, scaler=scaler,
                            lookback=config.lookback, meta_residual=config.meta_residual,
                            config_hash=config.config_hash(), seed=config.seed, histories=histories,
                            ledger=dataset.ledger.to_list())
    p_meta = art.meta_predict(p_bl, p_tft)
    art.validation = {
        "dates": [str(d) for d in vdates],
        "true": y_val.tolist(), "p_bl": p_bl.tolist(), "p_tft": p_tft.tolist(), "p_meta": p_meta.tolist(),
        "mape_bl": weights.error_bl, "mape_tft": weights.error_tft, "mape_meta": mape(y_val, p_meta),
    }
    return art


def new_dataset(series, config: RunConfig) -> SplitDataset:
    return SplitDataset(series, config.ratios, AccessLedger())
