"""Sky-camera geometry and radiometry.

Fisheye model: equiangular, zenith at the image centre, the inscribed circle
of radius H/2 reaching the horizon. North is up and east is to the right
(azimuth measured clockwise from north).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

EXPOSURE_TIMES_MS = (11, 88, 176, 264)
SATURATED = 0.99
NEAR_BLACK = 0.01


def hat_weight(v):
    """Triangle weight peaking at mid-range, zero for clipped or near-black pixels."""
    v = np.asarray(v, dtype=np.float64)
    w = 1.0 - np.abs(2.0 * v - 1.0)
    return np.where((v > SATURATED) | (v < NEAR_BLACK), 0.0, w)


def hdr_merge(frames, exposure_times_ms=EXPOSURE_TIMES_MS) -> np.ndarray:
    """Merge same-instant exposures of a linear camera into one radiance map.

    ``frames`` is [E, H, W] with values in [0, 1] (uint8 input is rescaled),
    ordered like ``exposure_times_ms``. Radiance is in value-per-millisecond.
    Pixels where every exposure is excluded fall back to the shortest one.
    """
    frames = np.asarray(frames)
    if frames.dtype == np.uint8:
        frames = frames / 255.0
    frames = frames.astype(np.float64)
    times = np.asarray(exposure_times_ms, dtype=np.float64)
    if frames.shape[0] != times.size:
        raise ValueError(f"hdr_merge: {frames.shape[0]} frames for {times.size} exposure times")
    if np.any(np.diff(times) <= 0):
        raise ValueError("hdr_merge: exposures must be ordered by increasing exposure time")
    w = hat_weight(frames)
    shape = (-1,) + (1,) * (frames.ndim - 1)
    num = (w * frames / times.reshape(shape)).sum(axis=0)
    den = w.sum(axis=0)
    fallback = frames[0] / times[0]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), fallback)


def _sinc(theta):
    return np.sinc(theta / np.pi)


@lru_cache(maxsize=16)
def _solid_angles(resolution: int, supersample: int) -> np.ndarray:
    h = resolution
    offsets = (np.arange(supersample) + 0.5) / supersample
    coords = (np.arange(h)[:, None] + offsets[None, :]).reshape(-1) - h / 2
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    r = np.hypot(xx, yy)
    theta = r / (h / 2) * (np.pi / 2)
    # d(omega)/d(area) = sin(theta) dtheta dphi / (r dr dphi) = (pi/H)^2 sinc(theta)
    density = (np.pi / h) ** 2 * _sinc(theta) * (r <= h / 2)
    return density.reshape(h, supersample, h, supersample).mean(axis=(1, 3))


def solid_angles(resolution: int, supersample: int = 8) -> np.ndarray:
    """Per-pixel solid angle (steradians) of an equiangular fisheye image.

    Each pixel footprint is integrated on a ``supersample`` x ``supersample``
    grid so that pixels straddling the horizon circle get partial weight;
    pixels outside the circle are 0.
    """
    if resolution < 16:
        raise ValueError("solid_angles: resolution must be at least 16")
    out = _solid_angles(int(resolution), int(supersample)).copy()
    out.setflags(write=True)
    return out


def sky_intensity(radiance, omega) -> float:
    """Solid-angle-weighted radiance sum over the hemisphere, divided by 2*pi."""
    radiance = np.asarray(radiance, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    if radiance.shape != omega.shape:
        raise ValueError(f"sky_intensity: radiance shape {radiance.shape} != solid-angle shape {omega.shape}")
    return float((radiance * omega).sum() / (2 * np.pi))


def pixel_grid(resolution: int):
    """Zenith angle and azimuth at each pixel centre, plus the in-circle mask."""
    c = np.arange(resolution) + 0.5 - resolution / 2
    yy, xx = np.meshgrid(c, c, indexing="ij")
    r = np.hypot(xx, yy)
    zenith = r / (resolution / 2) * (np.pi / 2)
    azimuth = np.mod(np.arctan2(xx, -yy), 2 * np.pi)
    return zenith, azimuth, r <= resolution / 2


def sky_to_unit(azimuth, elevation):
    """Sky direction -> fisheye position in units of the circle radius (x right, y down)."""
    radius = (np.pi / 2 - np.asarray(elevation)) / (np.pi / 2)
    return radius * np.sin(azimuth), -radius * np.cos(azimuth)


@dataclass(frozen=True)
class SolarPosition:
    azimuth: float
    elevation: float


def _solar_angles(timestamps, latitude, longitude):
    ts = np.asarray(timestamps, dtype=np.int64)
    day = ts // 86400
    seconds = ts - day * 86400
    dt = day.astype("datetime64[D]")
    year_start = dt.astype("datetime64[Y]").astype("datetime64[D]")
    doy = (dt - year_start).astype(np.int64) + 1
    hours = seconds / 3600.0
    leap = ((dt.astype("datetime64[Y]").astype(np.int64) + 1970) % 4) == 0
    gamma = 2 * np.pi / np.where(leap, 366, 365) * (doy - 1 + (hours - 12) / 24)
    eot = 229.18 * (
        0.000075
        + 0.001868 * np.cos(gamma)
        - 0.032077 * np.sin(gamma)
        - 0.014615 * np.cos(2 * gamma)
        - 0.040849 * np.sin(2 * gamma)
    )
    decl = (
        0.006918
        - 0.399912 * np.cos(gamma)
        + 0.070257 * np.sin(gamma)
        - 0.006758 * np.cos(2 * gamma)
        + 0.000907 * np.sin(2 * gamma)
        - 0.002697 * np.cos(3 * gamma)
        + 0.00148 * np.sin(3 * gamma)
    )
    true_solar_min = hours * 60 + eot + 4 * longitude
    hour_angle = np.radians(true_solar_min / 4 - 180)
    lat = np.radians(latitude)
    cos_zen = np.sin(lat) * np.sin(decl) + np.cos(lat) * np.cos(decl) * np.cos(hour_angle)
    elevation = np.pi / 2 - np.arccos(np.clip(cos_zen, -1, 1))
    azimuth = np.arctan2(np.sin(hour_angle), np.cos(hour_angle) * np.sin(lat) - np.tan(decl) * np.cos(lat)) + np.pi
    return np.mod(azimuth, 2 * np.pi), elevation


def solar_position(timestamp, latitude: float, longitude: float):
    """Sun azimuth (clockwise from north) and elevation in radians.

    Uses the Fourier-series declination and equation-of-time approximation;
    accurate to a fraction of a degree. Accepts a scalar timestamp (returns a
    :class:`SolarPosition`) or an array (returns an [N, 2] array of
    azimuth, elevation).
    """
    if abs(latitude) > 90:
        raise ValueError(f"latitude {latitude} outside [-90, 90]")
    az, el = _solar_angles(timestamp, latitude, longitude)
    if np.ndim(timestamp) == 0:
        return SolarPosition(float(az), float(el))
    return np.stack([az, el], axis=-1)
