"""Synthetic sky camera and PV plant.

Clouds are round blobs with soft logistic edges drifting with a constant per-day wind over a
periodic plane that is larger than the visible fisheye circle; the plane is
expressed in units of the circle radius. Radiance is computed in camera
units (frame value per millisecond of exposure), so an exposure of ``t`` ms
yields ``clamp(radiance * t)`` before 8-bit quantization.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .datapipe.geometry import EXPOSURE_TIMES_MS, sky_intensity, sky_to_unit, solar_position, solid_angles
from .datapipe.io import IMAGE_DIR, METADATA_FILE, POWER_FILE, TRUTH_FILE, Metadata, frame_name, write_json, write_pgm, write_power_csv
from .datapipe.samples import WEATHER_CLASSES
from .datapipe.transforms import PowerSeries

log = logging.getLogger(__name__)

PLANE_HALF_WIDTH = 2.0
SUN_RADIUS = 0.05
CLEAR_MAX, OVERCAST_MIN = 0.1, 0.9


@dataclass
class Blob:
    x: float
    y: float
    radius: float
    opacity: float


@dataclass
class RegimeParams:
    blobs: tuple = (0, 0)
    radius: tuple = (0.25, 0.6)
    opacity: tuple = (0.6, 1.0)
    wind_px_per_min: tuple = (0.6, 1.2)
    layer_opacity: tuple = (0.0, 0.0)


REGIMES = {
    "clear": RegimeParams(),
    "partly": RegimeParams(blobs=(10, 18)),
    "overcast": RegimeParams(blobs=(4, 8), layer_opacity=(0.93, 0.98)),
}


@dataclass
class SimConfig:
    seed: int = 0
    days: int = 10
    resolution: int = 32
    latitude: float = 35.03
    longitude: float = 135.78
    capacity_w: float = 2500.0
    start_date: str = "2021-06-01"
    # local solar time window rendered each day, in hours
    day_start_h: float = 10.5
    day_end_h: float = 13.5
    regimes: Optional[Sequence[str]] = None
    wind_direction_deg: float = 250.0
    wind_spread_deg: float = 30.0
    # width of a blob's opacity edge, in units of the circle radius
    edge_width: float = 0.02
    beta: float = 0.8
    noise_w: float = 5.0
    exposure_times_ms: tuple = EXPOSURE_TIMES_MS
    frame_cadence_s: int = 15
    gain: float = 1e-5
    sky_radiance: float = 100.0
    cloud_radiance: float = 250.0
    sun_radiance: float = 1e6
    blobs_override: Optional[list] = None
    wind_override_px_per_min: Optional[tuple] = None
    regime_params: dict = field(default_factory=lambda: dict(REGIMES))

    def __post_init__(self):
        level = math.log2(self.resolution / 8) if self.resolution >= 16 else 0
        if level < 1 or level != int(level):
            raise ValueError(f"resolution must be 8*2^L with L >= 1, got {self.resolution}")
        if 60 % self.frame_cadence_s or self.frame_cadence_s * 4 > 60:
            raise ValueError("frame cadence must divide 60 s and allow 5 frames per minute")
        if self.edge_width <= 0:
            raise ValueError("edge_width must be positive")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if self.regimes is not None:
            bad = [r for r in self.regimes if r not in WEATHER_CLASSES]
            if bad:
                raise ValueError(f"unknown regime(s) {bad}")

    def regime(self, day_index: int) -> str:
        if self.regimes:
            return self.regimes[day_index % len(self.regimes)]
        return "partly"

    def day_seed(self, day_index: int) -> int:
        return int(self.seed) ^ int(day_index)


DESK_REGIMES = ("clear", "partly", "partly", "partly", "partly", "overcast", "partly", "partly", "partly", "partly")


def desk_config(**overrides) -> SimConfig:
    """The 10-day 32x32 configuration used for desk-scale experiments."""
    kw = dict(days=10, resolution=32, regimes=DESK_REGIMES)
    kw.update(overrides)
    return SimConfig(**kw)


@dataclass
class SimTruth:
    minutes: np.ndarray
    azimuth: np.ndarray
    elevation: np.ndarray
    cloud_fraction: np.ndarray
    sky_intensity: np.ndarray
    power_w: np.ndarray

    def to_json(self) -> dict:
        return {
            "azimuth_rad": [round(float(v), 9) for v in self.azimuth],
            "cloud_fraction": [round(float(v), 9) for v in self.cloud_fraction],
            "elevation_rad": [round(float(v), 9) for v in self.elevation],
            "power_w": [round(float(v), 6) for v in self.power_w],
            "sky_intensity": [round(float(v), 12) for v in self.sky_intensity],
            "timestamps": [int(t) for t in self.minutes],
        }


@dataclass
class DayRender:
    day: str
    regime: str
    label: str
    frame_times: np.ndarray
    frames: np.ndarray
    power: PowerSeries
    truth: SimTruth
    wind_px_per_min: tuple


class CloudField:
    """Blob layer plus an optional uniform layer, advected by a constant wind."""

    def __init__(self, blobs: Sequence[Blob], wind: tuple, t_ref: int, layer: float = 0.0, edge_width: float = 0.02):
        self.x0 = np.array([b.x for b in blobs], dtype=np.float64)
        self.y0 = np.array([b.y for b in blobs], dtype=np.float64)
        self.radius = np.array([b.radius for b in blobs], dtype=np.float64)
        self.opacity = np.array([b.opacity for b in blobs], dtype=np.float64)
        self.wind = (float(wind[0]), float(wind[1]))
        self.t_ref = int(t_ref)
        self.layer = float(layer)
        self.edge_width = float(edge_width)

    def centres(self, t):
        """Blob centres at times ``t`` -> two arrays [T, N]."""
        dt = (np.atleast_1d(np.asarray(t, dtype=np.float64)) - self.t_ref) / 60.0
        w = PLANE_HALF_WIDTH
        cx = np.mod(self.x0[None, :] + self.wind[0] * dt[:, None] + w, 2 * w) - w
        cy = np.mod(self.y0[None, :] + self.wind[1] * dt[:, None] + w, 2 * w) - w
        return cx, cy

    def opacity_at(self, t, x, y) -> np.ndarray:
        """Opacity in [0, 1] at points (x, y) [T, P] for times t [T]."""
        cx, cy = self.centres(t)
        clear = np.full(np.shape(x), 1.0 - self.layer)
        for j in range(self.x0.size):
            d = np.hypot(x - cx[:, j : j + 1], y - cy[:, j : j + 1])
            edge = np.clip((self.radius[j] - d) / self.edge_width, -50.0, 50.0)
            o = self.opacity[j] / (1.0 + np.exp(-edge))
            clear *= 1.0 - o
        return 1.0 - clear


def _solar_noon_utc(day: date, longitude: float) -> int:
    midnight = datetime(day.year, day.month, day.day, tzinfo=timezone.utc)
    return int(midnight.timestamp()) + 43200 - int(round(longitude * 240))


def _pixel_plane(resolution: int):
    c = (np.arange(resolution) + 0.5 - resolution / 2) / (resolution / 2)
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return xx.reshape(-1), yy.reshape(-1), np.hypot(xx, yy).reshape(-1)


def _disk_points(n_ring: int = 6):
    ang = 2 * np.pi * np.arange(n_ring) / n_ring
    dx = np.concatenate([[0.0], 0.6 * SUN_RADIUS * np.cos(ang)])
    dy = np.concatenate([[0.0], 0.6 * SUN_RADIUS * np.sin(ang)])
    return dx, dy


def make_cloud_field(config: SimConfig, day_index: int, t_ref: int, rng: np.random.Generator) -> CloudField:
    regime = config.regime(day_index)
    p = config.regime_params[regime]
    n = int(rng.integers(p.blobs[0], p.blobs[1] + 1)) if p.blobs[1] > 0 else 0
    w = PLANE_HALF_WIDTH
    blobs = [
        Blob(
            x=float(rng.uniform(-w, w)),
            y=float(rng.uniform(-w, w)),
            radius=float(rng.uniform(*p.radius)),
            opacity=float(rng.uniform(*p.opacity)),
        )
        for _ in range(n)
    ]
    speed = float(rng.uniform(*p.wind_px_per_min))
    heading = math.radians(config.wind_direction_deg + rng.uniform(-config.wind_spread_deg, config.wind_spread_deg))
    layer = float(rng.uniform(*p.layer_opacity)) if p.layer_opacity[1] > 0 else 0.0
    if config.blobs_override is not None:
        blobs = [b if isinstance(b, Blob) else Blob(**b) for b in config.blobs_override]
    if config.wind_override_px_per_min is not None:
        wind_px = tuple(float(v) for v in config.wind_override_px_per_min)
    else:
        # heading is the direction the wind blows towards, clockwise from north
        wind_px = (speed * math.sin(heading), -speed * math.cos(heading))
    scale = 2.0 / config.resolution
    return CloudField(blobs, (wind_px[0] * scale, wind_px[1] * scale), t_ref, layer, config.edge_width)


def sky_radiance(config: SimConfig, x, y, r, sun_xy, elevation, opacity) -> np.ndarray:
    """Scene radiance (scene units) at plane points for one instant."""
    daylight = np.clip(3.0 * np.sin(elevation), 0.0, 1.0)
    d_sun = np.hypot(x - sun_xy[0], y - sun_xy[1])
    clear = config.sky_radiance * (0.6 + 0.4 * np.clip(r, 0, 1) ** 2) + 1e4 * np.exp(-d_sun / 0.08)
    disk = config.sun_radiance * (d_sun <= SUN_RADIUS * 1.5)
    clear_total = (clear + disk) * daylight
    cloud = config.cloud_radiance * daylight * (1.0 + 2.0 * np.exp(-d_sun / 0.2))
    return (1.0 - opacity) * clear_total + opacity * cloud


def expose(radiance_cam: np.ndarray, exposure_ms: float) -> np.ndarray:
    """Linear camera: clamp(radiance * t) quantized to 8 bits."""
    v = np.clip(radiance_cam * exposure_ms, 0.0, 1.0)
    return np.round(v * 255.0).astype(np.uint8)


def sun_occlusion(field_: CloudField, t, sun_xy) -> np.ndarray:
    """Mean cloud opacity over the sun disk at times ``t``."""
    dx, dy = _disk_points()
    x = sun_xy[0][:, None] + dx[None, :]
    y = sun_xy[1][:, None] + dy[None, :]
    return field_.opacity_at(t, x, y).mean(axis=1)


def day_power(config: SimConfig, field_: CloudField, seconds: np.ndarray, rng: np.random.Generator) -> tuple:
    """Noisy 1 s power samples and the noiseless curve."""
    sun = solar_position(seconds, config.latitude, config.longitude)
    sx, sy = sky_to_unit(sun[:, 0], sun[:, 1])
    occ = sun_occlusion(field_, seconds, (sx, sy))
    clean = config.capacity_w * np.maximum(0.0, np.sin(sun[:, 1])) * (1.0 - config.beta * occ)
    noisy = np.clip(clean + rng.normal(0.0, config.noise_w, clean.shape), 0.0, config.capacity_w)
    return noisy, clean


def auto_label(cloud_fraction: float) -> str:
    if cloud_fraction < CLEAR_MAX:
        return "clear"
    if cloud_fraction > OVERCAST_MIN:
        return "overcast"
    return "partly"


def day_date(config: SimConfig, day_index: int) -> date:
    return date.fromisoformat(config.start_date) + timedelta(days=day_index)


def render_window(config: SimConfig, field_: CloudField, frame_times: np.ndarray):
    """Frames [T, E, H, W], true camera radiance, cloud fraction, sky intensity."""
    h = config.resolution
    x, y, r = _pixel_plane(h)
    inside = r <= 1.0
    omega = solid_angles(h)
    weight = omega.reshape(-1)
    sun = solar_position(frame_times, config.latitude, config.longitude)
    sx, sy = sky_to_unit(sun[:, 0], sun[:, 1])
    frames = np.zeros((len(frame_times), len(config.exposure_times_ms), h, h), dtype=np.uint8)
    fraction = np.zeros(len(frame_times))
    intensity = np.zeros(len(frame_times))
    intensity_nosun = np.zeros(len(frame_times))
    for i, t in enumerate(frame_times):
        opac = field_.opacity_at(np.array([t]), x[None, :], y[None, :])[0]
        rad = sky_radiance(config, x, y, r, (sx[i], sy[i]), sun[i, 1], opac) * config.gain
        rad = np.where(inside, rad, 0.0)
        for e, ms in enumerate(config.exposure_times_ms):
            frames[i, e] = expose(rad, ms).reshape(h, h)
        fraction[i] = float((opac * weight).sum() / weight.sum())
        intensity[i] = sky_intensity(rad.reshape(h, h), omega)
    return frames, fraction, intensity, sun


def render_day(config: SimConfig, day_index: int) -> DayRender:
    """Render one simulated day: 15 s frames at every exposure, 1 s power, truth."""
    rng = np.random.default_rng(config.day_seed(day_index))
    day = day_date(config, day_index)
    noon = _solar_noon_utc(day, config.longitude)
    start = noon + int(round((config.day_start_h - 12.0) * 3600))
    end = noon + int(round((config.day_end_h - 12.0) * 3600))
    start -= start % 60
    end -= end % 60
    field_ = make_cloud_field(config, day_index, start, rng)
    frame_times = np.arange(start - 60, end + 1, config.frame_cadence_s, dtype=np.int64)
    frames, fraction, intensity, sun = render_window(config, field_, frame_times)
    seconds = np.arange(start - 59, end + 1, dtype=np.int64)
    noisy, clean = day_power(config, field_, seconds, rng)
    minutes = np.arange(start, end + 1, 60, dtype=np.int64)
    at_minute = np.searchsorted(frame_times, minutes)
    sec_idx = np.searchsorted(seconds, minutes)
    truth = SimTruth(
        minutes=minutes,
        azimuth=sun[at_minute, 0],
        elevation=sun[at_minute, 1],
        cloud_fraction=fraction[at_minute],
        sky_intensity=intensity[at_minute],
        power_w=clean[sec_idx],
    )
    label = auto_label(float(truth.cloud_fraction.mean()))
    wind = field_.wind
    return DayRender(
        day=day.isoformat(),
        regime=config.regime(day_index),
        label=label,
        frame_times=frame_times,
        frames=frames,
        power=PowerSeries(seconds, np.round(noisy, 3)),
        truth=truth,
        wind_px_per_min=(wind[0] * config.resolution / 2, wind[1] * config.resolution / 2),
    )


def _config_echo(config: SimConfig) -> dict:
    doc = asdict(config)
    doc["regime_params"] = {k: asdict(v) for k, v in config.regime_params.items()}
    return json.loads(json.dumps(doc))


def emit_dataset(config: SimConfig, out_dir) -> Path:
    """Write a simulated dataset in the datapipe's on-disk formats, plus truth.json."""
    out = Path(out_dir)
    images = out / IMAGE_DIR
    try:
        images.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"{images}: {exc}") from exc
    ts, pw, labels, truth_days = [], [], {}, {}
    for d in range(config.days):
        r = render_day(config, d)
        for i, t in enumerate(r.frame_times):
            for e, ms in enumerate(config.exposure_times_ms):
                path = images / frame_name(t, ms)
                try:
                    write_pgm(path, r.frames[i, e])
                except OSError as exc:
                    raise OSError(f"{path}: {exc}") from exc
        ts.append(r.power.timestamps)
        pw.append(r.power.power)
        labels[r.day] = r.label
        doc = r.truth.to_json()
        doc.update({"label": r.label, "regime": r.regime, "wind_px_per_min": [round(v, 9) for v in r.wind_px_per_min]})
        truth_days[r.day] = doc
        log.info("simulated %s (%s, label %s)", r.day, r.regime, r.label)
    write_power_csv(out / POWER_FILE, PowerSeries(np.concatenate(ts), np.concatenate(pw)))
    meta = Metadata(
        latitude=config.latitude,
        longitude=config.longitude,
        capacity_w=config.capacity_w,
        resolution=config.resolution,
        labels=labels,
        exposure_times_ms=tuple(config.exposure_times_ms),
        frame_cadence_s=config.frame_cadence_s,
    )
    write_json(out / METADATA_FILE, meta.to_json())
    write_json(out / TRUTH_FILE, {"config": _config_echo(config), "days": truth_days, "schema_version": 1})
    return out
