"""Static figures for the report command. Everything renders off-screen to PNG."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .trainer import TrainHistory  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}
COLORS = {"true": "black", "acb": "tab:blue", "tft": "tab:orange", "stacked": "tab:red", "naive": "tab:gray"}


def _save(fig, path, stamp: Mapping[str, object]) -> Path:
    """Write a PNG whose metadata carries the run stamp; no timestamps, so reruns match."""
    text = " ".join(f"{k}={v}" for k, v in stamp.items())
    fig.text(0.995, 0.005, text, ha="right", va="bottom", fontsize=6, color="0.5")
    path = Path(path)
    fig.savefig(path, format="png", metadata={"Software": None, "Description": text})
    plt.close(fig)
    return path


def training_curves(histories: Mapping[str, TrainHistory], path, stamp: Mapping[str, object]) -> Path:
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(histories), figsize=(5 * len(histories), 3.5), squeeze=False)
        for ax, (name, h) in zip(axes[0], histories.items()):
            ep = np.arange(1, len(h.train_loss) + 1)
            ax.plot(ep, h.train_loss, label="train")
            ax.plot(ep, h.val_loss, label="validation")
            if h.best_epoch is not None:
                ax.axvline(h.best_epoch + 1, color="0.5", ls="--", lw=0.8, label="restored")
            ax.set_yscale("log")
            ax.set_xlabel("epoch")
            ax.set_ylabel("MSE (normalised)")
            ax.set_title(name.upper())
            ax.legend()
        fig.tight_layout()
        return _save(fig, path, stamp)


def prediction_series(dates, true, preds: Mapping[str, np.ndarray], path, stamp: Mapping[str, object],
                      title: str = "One-step-ahead forecasts") -> Path:
    """Price panel plus an absolute-percentage-error panel underneath."""
    d = np.asarray(dates, dtype="datetime64[D]")
    true = np.asarray(true, dtype=float)
    with plt.rc_context(STYLE):
        fig, (top, bottom) = plt.subplots(2, 1, figsize=(9, 6), sharex=True, height_ratios=[3, 1])
        top.plot(d, true, color=COLORS["true"], lw=1.4, label="actual")
        for name, p in preds.items():
            top.plot(d, p, lw=0.9, color=COLORS.get(name), label=name)
            bottom.plot(d, np.abs(true - p) / true * 100, lw=0.8, color=COLORS.get(name), label=name)
        top.set_ylabel("close (USD)")
        top.set_title(title)
        top.legend(ncol=len(preds) + 1)
        bottom.set_ylabel("APE (%)")
        fig.autofmt_xdate()
        fig.tight_layout()
        return _save(fig, path, stamp)


def regime_panel(dates, close, volume, rolling_vol, windows: Sequence[tuple[str, str, str]], path,
                 stamp: Mapping[str, object]) -> Path:
    """Close, volume and rolling volatility with the regime windows shaded."""
    d = np.asarray(dates, dtype="datetime64[D]")
    lo = np.datetime64(windows[0][1]) - np.timedelta64(60, "D")
    hi = np.datetime64(windows[-1][2]) + np.timedelta64(60, "D")
    m = (d >= lo) & (d <= hi)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(3, 1, figsize=(9, 7), sharex=True)
        axes[0].plot(d[m], np.asarray(close)[m], color="black", lw=1)
        axes[0].set_ylabel("close (USD)")
        axes[1].bar(d[m], np.asarray(volume)[m], width=1.0, color="tab:blue", alpha=0.6)
        axes[1].set_ylabel("volume")
        axes[2].plot(d[m], np.asarray(rolling_vol)[m], color="tab:red", lw=1)
        axes[2].set_ylabel("rolling vol (ann.)")
        shades = ("tab:green", "tab:purple", "tab:orange")
        for (label, start, end), c in zip(windows, shades):
            for ax in axes:
                ax.axvspan(np.datetime64(start), np.datetime64(end), color=c, alpha=0.08)
            axes[0].text(np.datetime64(start), axes[0].get_ylim()[1], label, fontsize=7, va="top")
        fig.autofmt_xdate()
        fig.tight_layout()
        return _save(fig, path, stamp)


def selection_heatmap(weights: np.ndarray, names: Sequence[str], path, stamp: Mapping[str, object],
                      attention: np.ndarray | None = None) -> Path:
    """Variable-selection weights over the window and, optionally, the causal attention map."""
    panels = 2 if attention is not None else 1
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, axes = plt.subplots(1, panels, figsize=(6 * panels, 5), squeeze=False)
        im = axes[0, 0].imshow(np.asarray(weights).T, aspect="auto", cmap="viridis")
        axes[0, 0].set_yticks(range(len(names)), names, fontsize=6)
        axes[0, 0].set_xlabel("window step")
        axes[0, 0].set_title("variable selection")
        fig.colorbar(im, ax=axes[0, 0])
        if attention is not None:
            im = axes[0, 1].imshow(attention, cmap="magma")
            axes[0, 1].set_xlabel("key step")
            axes[0, 1].set_ylabel("query step")
            axes[0, 1].set_title("temporal attention")
            fig.colorbar(im, ax=axes[0, 1])
        fig.tight_layout()
        return _save(fig, path, stamp)


def metric_bars(report: Mapping[str, Mapping], path, stamp: Mapping[str, object],
                models: Sequence[str] = ("naive", "acb", "tft", "stacked")) -> Path:
    """Test MAPE with its interval per model, annotated with gain over persistence."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        x = np.arange(len(models))
        vals = [report[m]["mape"] for m in models]
        err = [report[m]["ci"]["half_width"] for m in models]
        ax.bar(x, vals, yerr=err, capsize=4, color=[COLORS[m] for m in models])
        for i, m in enumerate(models):
            ax.text(i, vals[i], f"PG {report[m]['performance_gain']:+.3f}", ha="center", va="bottom", fontsize=7)
        ax.set_xticks(x, models)
        ax.set_ylabel("test MAPE (%)")
        fig.tight_layout()
        return _save(fig, path, stamp)
