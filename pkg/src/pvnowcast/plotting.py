"""Figures written next to evaluation reports (Agg backend, PNG files)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import REPORT_CLASSES, MetricsReport  # noqa: E402

STYLE = {
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "savefig.dpi": 120,
}


def day_curves(samples, pred_w, path, max_days: int = 4) -> Path:
    """Truth, persistence and prediction against time for each evaluated day."""
    path = Path(path)
    days = np.unique(samples.day_ids) if samples.day_ids is not None else np.array([0])
    days = days[:max_days]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(days), 1, figsize=(8, 2.4 * len(days)), squeeze=False)
        for ax, d in zip(axes[:, 0], days):
            m = samples.day_ids == d if samples.day_ids is not None else np.ones(len(samples), bool)
            minutes = (samples.t0[m] - samples.t0[m][0]) / 60 + samples.horizon
            ax.plot(minutes, samples.p_target[m], color="k", lw=1.2, label="measured")
            ax.plot(minutes, samples.p_t0[m], color="tab:gray", lw=0.8, ls="--", label="persistence")
            ax.plot(minutes, pred_w[m], color="tab:red", lw=0.9, label="prediction")
            ax.set_ylabel("power [W]")
            ax.set_title(f"{samples.labels[m][0]} day", loc="left")
        axes[-1, 0].set_xlabel("minutes since first target")
        axes[0, 0].legend(loc="lower right", ncol=3, frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def skill_bars(report: MetricsReport, path) -> Path:
    """SS-MAE and SS-RMSE per weather class."""
    path = Path(path)
    names = [c for c in REPORT_CLASSES if c in report.classes]
    ss_mae = [report.classes[c].ss_mae or 0.0 for c in names]
    ss_rmse = [report.classes[c].ss_rmse or 0.0 for c in names]
    x = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar(x - 0.2, ss_mae, 0.4, label="SS-MAE")
        ax.bar(x + 0.2, ss_rmse, 0.4, label="SS-RMSE")
        ax.axhline(0, color="k", lw=0.8)
        ax.set_xticks(x, names)
        ax.set_ylabel("skill vs persistence [%]")
        ax.set_title(f"{report.model_id}, {report.horizon_minutes}-min horizon", loc="left")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def training_curve(history, path) -> Path:
    """Validation MAE per epoch with the best-so-far envelope."""
    path = Path(path)
    epochs = [r["epoch"] for r in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(epochs, [r["val_mae"] for r in history], marker="o", ms=3, label="validation MAE")
        ax.step(epochs, [r["best_val_mae"] for r in history], where="post", label="best so far")
        ax.set_xlabel("epoch")
        ax.set_ylabel("MAE [W]")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
