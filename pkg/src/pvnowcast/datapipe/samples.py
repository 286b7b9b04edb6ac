"""Per-day minute records, supervised sample construction and day splits."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .transforms import inverse_log_transform, power_to_q

log = logging.getLogger(__name__)

EXPOSURES = 4
INSTANTS = 5
CHANNELS = EXPOSURES * INSTANTS
WEATHER_CLASSES = ("clear", "partly", "overcast")
EXPOSURE_SETS = ("all", "shortest", "longest")


def stack_channels(frames) -> np.ndarray:
    """[5 instants, 4 exposures, H, W] -> [20, H, W], instant-major."""
    frames = np.asarray(frames)
    if frames.shape[:2] != (INSTANTS, EXPOSURES):
        raise ValueError(f"expected frames shaped [{INSTANTS}, {EXPOSURES}, H, W], got {frames.shape}")
    return frames.reshape((CHANNELS,) + frames.shape[2:])


def exposure_channels(which: str = "all") -> list:
    """Channel indices of a stack kept for an exposure ablation."""
    if which == "all":
        return list(range(CHANNELS))
    if which == "shortest":
        return list(range(0, CHANNELS, EXPOSURES))
    if which == "longest":
        return list(range(EXPOSURES - 1, CHANNELS, EXPOSURES))
    raise ValueError(f"exposure selection must be one of {EXPOSURE_SETS}, got {which!r}")


def normalized_sun(sun) -> np.ndarray:
    """(azimuth, elevation) radians -> (elevation/pi, azimuth/2pi)."""
    sun = np.asarray(sun, dtype=np.float64)
    return np.stack([sun[..., 1] / np.pi, sun[..., 0] / (2 * np.pi)], axis=-1)


def sun_variation(later, earlier) -> np.ndarray:
    """Normalized (delta elevation, delta azimuth) with azimuth wrapped to (-pi, pi]."""
    later = np.asarray(later, dtype=np.float64)
    earlier = np.asarray(earlier, dtype=np.float64)
    d_el = later[..., 1] - earlier[..., 1]
    d_az = later[..., 0] - earlier[..., 0]
    d_az = np.pi - np.mod(np.pi - d_az, 2 * np.pi)
    return np.stack([d_el / np.pi, d_az / (2 * np.pi)], axis=-1)


@dataclass
class DayRecord:
    """One day on a contiguous whole-minute grid.

    ``stacks`` holds the 20-channel uint8 exposure stack of each minute,
    ``sun`` the (azimuth, elevation) in radians and ``sky`` the sky intensity.
    Minutes with ``valid`` False are never used as sample inputs or targets.
    """

    day: str
    label: str
    minutes: np.ndarray
    power_w: np.ndarray
    stacks: np.ndarray
    sun: np.ndarray
    sky: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        n = len(self.minutes)
        for name in ("power_w", "stacks", "sun", "sky", "valid"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"day {self.day}: {name} has {len(getattr(self, name))} rows for {n} minutes")
        if n > 1 and np.any(np.diff(self.minutes) != 60):
            raise ValueError(f"day {self.day}: minutes must be a contiguous 60 s grid")
        if self.label not in WEATHER_CLASSES:
            raise ValueError(f"day {self.day}: unknown weather label {self.label!r}")

    @property
    def resolution(self) -> int:
        return int(self.stacks.shape[-1])


def horizon_power(day: DayRecord, horizon: int):
    """Mean of the ``horizon`` one-minute averages ending at each minute.

    With a uniform raw cadence this equals the raw mean over (t - x min, t].
    Returns the averaged power and the mask of minutes whose whole window is valid.
    """
    x = int(horizon)
    n = len(day.minutes)
    power = np.where(day.valid, day.power_w, 0.0)
    csum = np.concatenate([[0.0], np.cumsum(power)])
    bad = np.concatenate([[0], np.cumsum(~day.valid)])
    idx = np.arange(n)
    lo = np.maximum(idx + 1 - x, 0)
    ok = (idx + 1 - x >= 0) & (bad[idx + 1] - bad[lo] == 0)
    avg = np.where(ok, (csum[idx + 1] - csum[lo]) / x, np.nan)
    return avg, ok


@dataclass
class Sample:
    """One supervised example in a form convenient for inspection."""

    t0: int
    horizon: int
    label: str
    q_history: np.ndarray
    stacks: Optional[np.ndarray]
    dq: float
    p_t0: float
    p_target: float
    sun_history: np.ndarray
    dtheta: np.ndarray
    ds: float


@dataclass
class SampleSet:
    """Columnar storage of many samples.

    ``frames`` pools every minute stack referenced by any sample once;
    ``hist`` holds, per sample and history step, a row index into it.
    """

    horizon: int
    alpha: float
    frames: np.ndarray
    hist: np.ndarray
    t0: np.ndarray
    labels: np.ndarray
    q_hist: np.ndarray
    q_target: np.ndarray
    p_t0: np.ndarray
    p_target: np.ndarray
    sun_hist: np.ndarray
    dtheta: np.ndarray
    ds: np.ndarray
    day_ids: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return int(self.t0.size)

    @property
    def dq(self) -> np.ndarray:
        return self.q_target - self.q_hist[:, -1]

    @property
    def history(self) -> int:
        return int(self.hist.shape[1])

    def __getitem__(self, i: int) -> Sample:
        return Sample(
            t0=int(self.t0[i]),
            horizon=self.horizon,
            label=str(self.labels[i]),
            q_history=self.q_hist[i].copy(),
            stacks=self.frames[self.hist[i]] if self.frames.size else None,
            dq=float(self.dq[i]),
            p_t0=float(self.p_t0[i]),
            p_target=float(self.p_target[i]),
            sun_history=self.sun_hist[i].copy(),
            dtheta=self.dtheta[i].copy(),
            ds=float(self.ds[i]),
        )

    def subset(self, index) -> "SampleSet":
        index = np.asarray(index)
        return SampleSet(
            horizon=self.horizon,
            alpha=self.alpha,
            frames=self.frames,
            hist=self.hist[index],
            t0=self.t0[index],
            labels=self.labels[index],
            q_hist=self.q_hist[index],
            q_target=self.q_target[index],
            p_t0=self.p_t0[index],
            p_target=self.p_target[index],
            sun_hist=self.sun_hist[index],
            dtheta=self.dtheta[index],
            ds=self.ds[index],
            day_ids=None if self.day_ids is None else self.day_ids[index],
        )

    def digest(self) -> str:
        """Hash identifying exactly which samples (and targets) are in the set."""
        h = hashlib.sha256()
        h.update(np.int64(self.horizon).tobytes())
        for arr in (self.t0, self.p_t0, self.p_target):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update("|".join(map(str, self.labels)).encode())
        return h.hexdigest()[:16]

    def images(self, index=None, channels: Optional[Sequence[int]] = None) -> np.ndarray:
        """Float stacks in [0, 1] for the given frame rows."""
        rows = self.frames if index is None else self.frames[np.asarray(index)]
        if channels is not None:
            rows = rows[:, list(channels)]
        return rows.astype(np.float64) / 255.0


def make_samples(
    days: Sequence[DayRecord],
    alpha: float,
    horizon: int = 1,
    history: int = 6,
    with_images: bool = True,
) -> SampleSet:
    """Build every sample whose history, averaging windows and target lie on
    valid minutes.

    History steps sit at t0 - (K-1)x ... t0 with step x and the target at
    t0 + x, all on the x-minute averaged power series.
    """
    if horizon < 1 or history < 1:
        raise ValueError("horizon and history must be positive")
    x, k = int(horizon), int(history)
    offsets = x * (np.arange(k) - (k - 1))
    cols = {name: [] for name in ("hist", "t0", "labels", "q_hist", "q_target", "p_t0", "p_target", "sun", "dth", "ds", "day")}
    frame_rows, frame_base = [], 0
    for d, day in enumerate(days):
        avg, ok = horizon_power(day, x)
        n = len(day.minutes)
        t0 = np.arange(n)
        first = t0 + offsets[0]
        last = t0 + x
        inside = (first >= 0) & (last < n)
        keep = np.zeros(n, dtype=bool)
        for j in np.nonzero(inside)[0]:
            keep[j] = ok[j + offsets].all() and ok[j + x]
        js = np.nonzero(keep)[0]
        if js.size == 0:
            continue
        q = np.full(n, np.nan)
        q[ok] = power_to_q(avg[ok], alpha)
        hist = js[:, None] + offsets[None, :]
        tgt = js + x
        cols["hist"].append(hist + frame_base)
        cols["t0"].append(day.minutes[js])
        cols["labels"].append(np.full(js.size, day.label, dtype=object))
        cols["q_hist"].append(q[hist])
        cols["q_target"].append(q[tgt])
        cols["p_t0"].append(avg[js])
        cols["p_target"].append(avg[tgt])
        cols["sun"].append(normalized_sun(day.sun[hist]))
        cols["dth"].append(sun_variation(day.sun[tgt], day.sun[js]))
        cols["ds"].append(day.sky[tgt] - day.sky[js])
        cols["day"].append(np.full(js.size, d))
        if with_images:
            frame_rows.append(day.stacks)
        frame_base += n if with_images else 0
    if not cols["t0"]:
        log.warning("make_samples: no complete %d-minute window in %d day(s)", x * (k + 1), len(days))
        res = days[0].resolution if days else 0
        empty = np.zeros(0)
        return SampleSet(
            horizon=x,
            alpha=alpha,
            frames=np.zeros((0, CHANNELS, res, res), dtype=np.uint8),
            hist=np.zeros((0, k), dtype=np.int64),
            t0=np.zeros(0, dtype=np.int64),
            labels=np.zeros(0, dtype=object),
            q_hist=np.zeros((0, k)),
            q_target=empty,
            p_t0=empty,
            p_target=empty,
            sun_hist=np.zeros((0, k, 2)),
            dtheta=np.zeros((0, 2)),
            ds=empty,
            day_ids=np.zeros(0, dtype=np.int64),
        )
    frames = np.concatenate(frame_rows) if with_images else np.zeros((0, CHANNELS, 0, 0), dtype=np.uint8)
    return SampleSet(
        horizon=x,
        alpha=alpha,
        frames=frames,
        hist=np.concatenate(cols["hist"]).astype(np.int64),
        t0=np.concatenate(cols["t0"]).astype(np.int64),
        labels=np.concatenate(cols["labels"]),
        q_hist=np.concatenate(cols["q_hist"]),
        q_target=np.concatenate(cols["q_target"]),
        p_t0=np.concatenate(cols["p_t0"]),
        p_target=np.concatenate(cols["p_target"]),
        sun_hist=np.concatenate(cols["sun"]),
        dtheta=np.concatenate(cols["dth"]),
        ds=np.concatenate(cols["ds"]),
        day_ids=np.concatenate(cols["day"]).astype(np.int64),
    )


def missing_history(day: DayRecord, t0: int, horizon: int = 1, history: int = 6) -> list:
    """Minutes (UTC seconds) needed for a prediction at ``t0`` that are absent or invalid."""
    x = int(horizon)
    first = int(t0) - 60 * (x * (history - 1) + x - 1)
    needed = np.arange(first, int(t0) + 1, 60, dtype=np.int64)
    pos = (needed - day.minutes[0]) // 60 if len(day.minutes) else needed
    inside = (pos >= 0) & (pos < len(day.minutes))
    ok = np.zeros(needed.size, dtype=bool)
    ok[inside] = day.valid[pos[inside]]
    return [int(t) for t in needed[~ok]]


def query_sample(day: DayRecord, alpha: float, t0: int, horizon: int = 1, history: int = 6) -> SampleSet:
    """A one-sample set for predicting from ``t0``; the target may lie in the future.

    Target fields are NaN when the target minute is not in the record.
    """
    missing = missing_history(day, t0, horizon, history)
    if missing:
        raise InsufficientHistory(missing)
    x = int(horizon)
    avg, ok = horizon_power(day, x)
    j = int((int(t0) - day.minutes[0]) // 60)
    hist = j + x * (np.arange(history) - (history - 1))
    tgt = j + x
    has_target = tgt < len(day.minutes) and ok[tgt]
    q = power_to_q(avg[hist], alpha)
    return SampleSet(
        horizon=x,
        alpha=alpha,
        frames=day.stacks,
        hist=hist[None, :].astype(np.int64),
        t0=np.array([int(t0)], dtype=np.int64),
        labels=np.array([day.label], dtype=object),
        q_hist=q[None, :],
        q_target=np.array([power_to_q(avg[tgt], alpha) if has_target else np.nan]),
        p_t0=np.array([avg[j]]),
        p_target=np.array([avg[tgt] if has_target else np.nan]),
        sun_hist=normalized_sun(day.sun[hist])[None],
        dtheta=np.full((1, 2), np.nan),
        ds=np.array([np.nan]),
        day_ids=np.zeros(1, dtype=np.int64),
    )


class InsufficientHistory(ValueError):
    def __init__(self, missing: list):
        self.missing = missing
        super().__init__(f"{len(missing)} required minute(s) missing or invalid")


def q_to_watts_delta(q_t0, dq_hat, alpha: float) -> np.ndarray:
    """Linearized power change implied by a normalized-log variation."""
    q_t0 = np.asarray(q_t0, dtype=np.float64)
    after = inverse_log_transform(np.clip(q_t0 + dq_hat, 0.0, None) / alpha)
    before = inverse_log_transform(q_t0 / alpha)
    return after - before


def split_days(days: Sequence[str], seed: int = 0) -> dict:
    """Seeded whole-day split: 20% test, then 10% of the rest (at least 1) validation."""
    days = sorted(days)
    n = len(days)
    if n < 5:
        raise ValueError(f"split_days needs at least 5 days, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [days[i] for i in order]
    n_test = max(1, int(np.floor(0.2 * n)))
    n_val = max(1, int(np.floor(0.1 * (n - n_test))))
    return {
        "test": sorted(shuffled[:n_test]),
        "validation": sorted(shuffled[n_test : n_test + n_val]),
        "train": sorted(shuffled[n_test + n_val :]),
    }


def train_power(days: Sequence[DayRecord]) -> np.ndarray:
    """Every valid one-minute power value of the given (training) days."""
    parts = [d.power_w[d.valid] for d in days]
    return np.concatenate(parts) if parts else np.zeros(0)


__all__ = [
    "CHANNELS",
    "DayRecord",
    "EXPOSURE_SETS",
    "Sample",
    "SampleSet",
    "WEATHER_CLASSES",
    "exposure_channels",
    "horizon_power",
    "InsufficientHistory",
    "missing_history",
    "query_sample",
    "make_samples",
    "normalized_sun",
    "q_to_watts_delta",
    "split_days",
    "stack_channels",
    "sun_variation",
    "train_power",
]
