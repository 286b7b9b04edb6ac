"""Power-value preprocessing: log transform, scaling, window averaging and
invalid-minute filtering."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

DARKNESS_THRESHOLD = 0.02
# Powers are clamped to this floor before the log transform so that the
# transform is continuous and invertible on every value that reaches it.
POWER_FLOOR_W = 1.0


@dataclass
class PowerSeries:
    """Timestamped power samples; ``timestamps`` are UTC seconds."""

    timestamps: np.ndarray
    power: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.power = np.asarray(self.power, dtype=np.float64)
        if self.timestamps.shape != self.power.shape:
            raise ValueError("timestamps and power must have the same length")
        if self.timestamps.size > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if not np.all(np.isfinite(self.power)):
            raise ValueError("power values must be finite")

    def __len__(self) -> int:
        return self.timestamps.size


def log_transform(x):
    """x for x < 1, log(x) for x >= 1."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("log_transform: negative power")
    return np.where(x >= 1, np.log(np.maximum(x, 1)), x)


def inverse_log_transform(y):
    """Inverse of :func:`log_transform` on its invertible range (y >= 0 -> x >= 1)."""
    y = np.asarray(y, dtype=np.float64)
    return np.exp(y)


def clamp_power(watts):
    return np.maximum(np.asarray(watts, dtype=np.float64), POWER_FLOOR_W)


def fit_alpha(train_power) -> float:
    """Scale factor mapping the largest training power to 1."""
    train_power = np.asarray(train_power, dtype=np.float64)
    if train_power.size == 0:
        raise ValueError("fit_alpha: empty training series")
    top = float(log_transform(clamp_power(train_power.max())))
    if top <= 0:
        raise ValueError("fit_alpha: training powers never exceed the 1 W floor")
    return 1.0 / top


def normalize(y, alpha: float):
    """Map log-space values to [0, 1]; values beyond the training range clip."""
    if alpha <= 0:
        raise ValueError("normalize: alpha must be positive")
    q = alpha * np.asarray(y, dtype=np.float64)
    if np.any(q > 1):
        log.warning("normalize: %d value(s) above the training maximum clipped to 1", int(np.sum(q > 1)))
    return np.clip(q, 0.0, 1.0)


def power_to_q(watts, alpha: float):
    return normalize(log_transform(clamp_power(watts)), alpha)


def q_to_power(q, alpha: float):
    return inverse_log_transform(np.asarray(q, dtype=np.float64) / alpha)


def window_average(raw: PowerSeries, at, window_s: int) -> np.ndarray:
    """Mean of raw samples with timestamp in (t - window_s, t] for each t in ``at``.

    Instants with no raw coverage give NaN.
    """
    at = np.asarray(at, dtype=np.int64)
    csum = np.concatenate([[0.0], np.cumsum(raw.power)])
    hi = np.searchsorted(raw.timestamps, at, side="right")
    lo = np.searchsorted(raw.timestamps, at - window_s, side="right")
    count = hi - lo
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, (csum[hi] - csum[lo]) / np.maximum(count, 1), np.nan)


def minute_marks(raw: PowerSeries) -> np.ndarray:
    """Whole-minute instants spanning the raw series."""
    if len(raw) == 0:
        return np.zeros(0, dtype=np.int64)
    first = -(-raw.timestamps[0] // 60) * 60
    last = -(-raw.timestamps[-1] // 60) * 60
    return np.arange(first, last + 1, 60, dtype=np.int64)


def minute_average(raw: PowerSeries, window_minutes: int = 1) -> PowerSeries:
    """One entry per whole minute: the mean raw power over the preceding window.

    Minutes without any raw sample in the window are dropped.
    """
    marks = minute_marks(raw)
    avg = window_average(raw, marks, 60 * window_minutes)
    keep = np.isfinite(avg)
    return PowerSeries(marks[keep], avg[keep])


def filter_invalid(power, stacks, threshold: float = DARKNESS_THRESHOLD) -> np.ndarray:
    """Boolean mask of usable minutes.

    A minute is dropped when its power is 0 (below the panel's sensitivity) or
    when the longest exposure of its most recent frame is too dark on average.
    ``stacks`` is [M, C, H, W], uint8 or float in [0, 1], channels ordered
    instant-major / exposure-minor so the last channel is that frame.
    """
    power = np.asarray(power, dtype=np.float64)
    stacks = np.asarray(stacks)
    longest = stacks[:, -1].reshape(len(stacks), -1).mean(axis=1) if len(stacks) else np.zeros(0)
    if stacks.dtype == np.uint8:
        longest = longest / 255.0
    keep = (power > 0) & (longest >= threshold)
    dropped = int((~keep).sum())
    if dropped:
        log.info("filter_invalid: dropped %d of %d minutes", dropped, keep.size)
    return keep
