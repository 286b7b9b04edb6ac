"""Persistence baseline, error metrics, skill scores and per-class reports."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .datapipe.io import iso_utc
from .datapipe.samples import WEATHER_CLASSES, SampleSet, q_to_watts_delta

log = logging.getLogger(__name__)

REPORT_CLASSES = (*WEATHER_CLASSES, "all")


def persistence_predict(sample) -> float:
    """The future equals the present: p_hat(t0 + x) = p(t0)."""
    return float(sample.p_t0)


def _errors(pred, truth) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction length {pred.shape} != truth length {truth.shape}")
    if pred.size == 0:
        raise ValueError("metrics need at least one value")
    return truth - pred


def mae(pred, truth) -> float:
    return float(np.mean(np.abs(_errors(pred, truth))))


def rmse(pred, truth) -> float:
    return float(np.sqrt(np.mean(_errors(pred, truth) ** 2)))


def skill_score(e_pred: float, e_base: float) -> float:
    """Percent improvement of ``e_pred`` over the baseline error ``e_base``."""
    if e_base == 0:
        raise ZeroDivisionError("skill score undefined for a zero baseline error")
    return (1.0 - e_pred / e_base) * 100.0


def predicted_watts(p_t0, q_t0, dq_hat, alpha: float) -> np.ndarray:
    """Current power plus the linearized predicted variation."""
    return np.asarray(p_t0, dtype=np.float64) + q_to_watts_delta(q_t0, dq_hat, alpha)


@dataclass
class ClassMetrics:
    count: int
    mae: float
    rmse: float
    persistence_mae: float
    persistence_rmse: float
    ss_mae: Optional[float]
    ss_rmse: Optional[float]

    def to_json(self) -> dict:
        return {k: (None if v is None else round(float(v), 9) if isinstance(v, float) else v) for k, v in self.__dict__.items()}


@dataclass
class MetricsReport:
    model_id: str
    horizon_minutes: int
    sample_hash: str
    persistence_hash: str
    classes: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "classes": {k: v.to_json() for k, v in self.classes.items()},
            "horizon_minutes": self.horizon_minutes,
            "model_id": self.model_id,
            "persistence_hash": self.persistence_hash,
            "sample_hash": self.sample_hash,
            "schema_version": 1,
        }

    def table(self) -> str:
        rows = [f"{'class':<9} {'n':>6} {'MAE W':>9} {'RMSE W':>9} {'pers MAE':>9} {'pers RMSE':>9} {'SS-MAE %':>9} {'SS-RMSE %':>9}"]
        for name in REPORT_CLASSES:
            c = self.classes.get(name)
            if c is None:
                continue
            ss = [("n/a" if v is None else f"{v:.2f}") for v in (c.ss_mae, c.ss_rmse)]
            rows.append(
                f"{name:<9} {c.count:>6} {c.mae:>9.2f} {c.rmse:>9.2f} {c.persistence_mae:>9.2f} "
                f"{c.persistence_rmse:>9.2f} {ss[0]:>9} {ss[1]:>9}"
            )
        return "\n".join(rows)


def _skill(e, base):
    return skill_score(e, base) if base > 0 else None


def report_from_predictions(
    samples: SampleSet, pred_w: np.ndarray, model_id: str, persistence_w: Optional[np.ndarray] = None
) -> MetricsReport:
    """Per-class metrics of watt predictions against persistence on the same samples."""
    truth = samples.p_target
    if persistence_w is None:
        # vectorized persistence_predict over the whole set
        persistence_w = samples.p_t0.astype(np.float64)
    base_hash = samples.digest()
    report = MetricsReport(model_id, samples.horizon, samples.digest(), base_hash)
    for name in REPORT_CLASSES:
        mask = np.ones(len(samples), dtype=bool) if name == "all" else samples.labels == name
        n = int(mask.sum())
        if n == 0:
            log.debug("evaluate: no %s samples; class omitted", name)
            continue
        m, r = mae(pred_w[mask], truth[mask]), rmse(pred_w[mask], truth[mask])
        pm, pr = mae(persistence_w[mask], truth[mask]), rmse(persistence_w[mask], truth[mask])
        report.classes[name] = ClassMetrics(n, m, r, pm, pr, _skill(m, pm), _skill(r, pr))
    return report


def evaluate(
    model,
    samples: SampleSet,
    channels: Optional[Sequence[int]] = None,
    batch_size: int = 64,
    model_id: Optional[str] = None,
):
    """Metrics of ``model`` (None = persistence) on ``samples``.

    Returns (MetricsReport, predicted watts).
    """
    from .models import ModelKind, make_batch, predict_variation

    if len(samples) == 0:
        raise ValueError("evaluate: empty sample set")
    if model is None:
        dq_hat = np.zeros(len(samples))
        model_id = model_id or "persistence"
    else:
        was_training = model.training
        model.eval()
        dtype = model.parameters()[0].dtype
        parts = []
        for start in range(0, len(samples), batch_size):
            idx = np.arange(start, min(start + batch_size, len(samples)))
            batch = make_batch(samples, idx, channels, images=model.kind is not ModelKind.MLP, dtype=dtype)
            parts.append(predict_variation(model, batch))
        dq_hat = np.concatenate(parts)
        model.train(was_training)
        model_id = model_id or model.kind.value
    pred_w = predicted_watts(samples.p_t0, samples.q_hist[:, -1], dq_hat, samples.alpha)
    return report_from_predictions(samples, pred_w, model_id), pred_w


def write_report_json(path, report: MetricsReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    return path


def write_predictions_csv(path, samples: SampleSet, pred_w: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    target_time = samples.t0 + 60 * samples.horizon
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "label", "truth_w", "persistence_w", "prediction_w"])
        for i in range(len(samples)):
            w.writerow(
                [iso_utc(target_time[i]), samples.labels[i], f"{samples.p_target[i]:.3f}", f"{samples.p_t0[i]:.3f}", f"{pred_w[i]:.3f}"]
            )
    return path
