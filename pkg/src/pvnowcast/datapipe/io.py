"""On-disk formats: power CSV, PGM frames, metadata JSON, and ingestion of a
dataset directory into per-day minute records (optionally cached as npz)."""

from __future__ import annotations

import csv
import json
import logging
import re
from collections import defaultdict
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .geometry import EXPOSURE_TIMES_MS, hdr_merge, sky_intensity, solar_position, solid_angles
from .samples import CHANNELS, EXPOSURES, INSTANTS, DayRecord
from .transforms import DARKNESS_THRESHOLD, PowerSeries, filter_invalid, minute_average

log = logging.getLogger(__name__)

POWER_FILE = "power.csv"
IMAGE_DIR = "images"
METADATA_FILE = "metadata.json"
TRUTH_FILE = "truth.json"
CACHE_INDEX = "index.json"
FRAME_PATTERN = re.compile(r"^(\d{8}T\d{6}Z)_(\d+)\.pgm$")
STAMP_FORMAT = "%Y%m%dT%H%M%SZ"


class DataError(ValueError):
    """Malformed or missing dataset content."""


def iso_utc(ts: int) -> str:
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_iso(text: str) -> int:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def write_power_csv(path, series: PowerSeries) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "power_w"])
        for t, p in zip(series.timestamps, series.power):
            w.writerow([iso_utc(t), f"{p:.3f}"])


def read_power_csv(path) -> PowerSeries:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not rows or [c.strip() for c in rows[0]] != ["timestamp", "power_w"]:
        raise DataError(f"{path}: expected header 'timestamp,power_w'")
    ts, pw = [], []
    for n, row in enumerate(rows[1:], start=2):
        try:
            ts.append(parse_iso(row[0]))
            pw.append(float(row[1]))
        except (IndexError, ValueError) as exc:
            raise DataError(f"{path}:{n}: {exc}") from exc
    try:
        return PowerSeries(np.array(ts, dtype=np.int64), np.array(pw))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def frame_name(ts: int, exposure_ms: int) -> str:
    stamp = datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime(STAMP_FORMAT)
    return f"{stamp}_{int(exposure_ms)}.pgm"


def parse_frame_name(name: str):
    m = FRAME_PATTERN.match(name)
    if not m:
        return None
    dt = datetime.strptime(m.group(1), STAMP_FORMAT).replace(tzinfo=timezone.utc)
    return int(dt.timestamp()), int(m.group(2))


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise ValueError(f"write_pgm: expected a 2-D uint8 array, got {image.dtype} {image.shape}")
    Image.fromarray(image, mode="L").save(path, format="PPM")


def read_pgm(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise DataError(f"{path}: expected 8-bit grayscale PGM, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint8).copy()


@dataclass
class Metadata:
    latitude: float
    longitude: float
    capacity_w: float
    resolution: int
    labels: dict
    exposure_times_ms: tuple = EXPOSURE_TIMES_MS
    frame_cadence_s: int = 15

    def to_json(self) -> dict:
        return {
            "capacity_w": self.capacity_w,
            "exposure_times_ms": list(self.exposure_times_ms),
            "frame_cadence_s": self.frame_cadence_s,
            "labels": dict(sorted(self.labels.items())),
            "latitude": self.latitude,
            "longitude": self.longitude,
            "resolution": self.resolution,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Metadata":
        try:
            return cls(
                latitude=float(doc["latitude"]),
                longitude=float(doc["longitude"]),
                capacity_w=float(doc["capacity_w"]),
                resolution=int(doc["resolution"]),
                labels=dict(doc["labels"]),
                exposure_times_ms=tuple(int(t) for t in doc.get("exposure_times_ms", EXPOSURE_TIMES_MS)),
                frame_cadence_s=int(doc.get("frame_cadence_s", 15)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"metadata: missing or invalid field ({exc})") from exc


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_metadata(root) -> Metadata:
    path = Path(root) / METADATA_FILE
    try:
        return Metadata.from_json(json.loads(path.read_text()))
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from exc


def solar_day(ts, longitude: float):
    """Local solar calendar date (YYYY-MM-DD) of UTC timestamps."""
    shifted = np.asarray(ts, dtype=np.int64) + int(round(longitude * 240))
    days = (shifted // 86400).astype("datetime64[D]")
    return np.datetime_as_string(days)


def discover_frames(image_dir, exposure_times_ms) -> dict:
    """Map capture instant -> {exposure_ms: path}, ignoring unrelated files."""
    found = defaultdict(dict)
    wanted = set(int(t) for t in exposure_times_ms)
    for path in sorted(Path(image_dir).iterdir()):
        parsed = parse_frame_name(path.name)
        if parsed and parsed[1] in wanted:
            found[parsed[0]][parsed[1]] = path
    return dict(sorted(found.items()))


def _minute_stacks(frames_at: dict, minutes: np.ndarray, cadence: int, times, resolution: int):
    """Stack the 5 instants x 4 exposures ending at each minute; flag minutes missing any frame."""
    offsets = np.arange(-(INSTANTS - 1), 1) * cadence
    stacks = np.zeros((len(minutes), CHANNELS, resolution, resolution), dtype=np.uint8)
    present = np.ones(len(minutes), dtype=bool)
    for m, t in enumerate(minutes):
        for i, off in enumerate(offsets):
            per_exp = frames_at.get(int(t + off))
            if per_exp is None or len(per_exp) != EXPOSURES:
                present[m] = False
                break
            for e, ms in enumerate(times):
                stacks[m, i * EXPOSURES + e] = per_exp[ms]
    return stacks, present


def ingest(root, threshold: float = DARKNESS_THRESHOLD) -> tuple:
    """Read a raw dataset directory into (Metadata, [DayRecord]) sorted by day."""
    root = Path(root)
    meta = read_metadata(root)
    raw = read_power_csv(root / POWER_FILE)
    image_dir = root / IMAGE_DIR
    if not image_dir.is_dir():
        raise DataError(f"{image_dir}: image directory not found")
    if 60 % meta.frame_cadence_s or meta.frame_cadence_s * (INSTANTS - 1) > 60:
        raise DataError(f"frame cadence {meta.frame_cadence_s} s cannot give {INSTANTS} frames per minute")
    times = tuple(sorted(meta.exposure_times_ms))
    paths = discover_frames(image_dir, times)
    frames_at = {}
    for t, per_exp in paths.items():
        imgs = {}
        for ms, p in per_exp.items():
            img = read_pgm(p)
            if img.shape != (meta.resolution, meta.resolution):
                raise DataError(f"{p}: image is {img.shape}, metadata says {meta.resolution}x{meta.resolution}")
            imgs[ms] = img
        frames_at[t] = imgs
    minute = minute_average(raw)
    omega = solid_angles(meta.resolution)
    by_day = defaultdict(list)
    for idx, day in enumerate(solar_day(minute.timestamps, meta.longitude)):
        by_day[str(day)].append(idx)
    records = []
    for day, idx in sorted(by_day.items()):
        if day not in meta.labels:
            log.warning("ingest: day %s has no weather label in metadata; skipped", day)
            continue
        ts = minute.timestamps[idx]
        grid = np.arange(ts[0], ts[-1] + 1, 60, dtype=np.int64)
        power = np.zeros(grid.size)
        have = np.zeros(grid.size, dtype=bool)
        pos = (ts - grid[0]) // 60
        power[pos] = minute.power[idx]
        have[pos] = True
        stacks, present = _minute_stacks(frames_at, grid, meta.frame_cadence_s, times, meta.resolution)
        valid = have & present & filter_invalid(power, stacks, threshold)
        sun = solar_position(grid, meta.latitude, meta.longitude)
        sky = np.zeros(grid.size)
        last = (INSTANTS - 1) * EXPOSURES
        for m in np.nonzero(present)[0]:
            sky[m] = sky_intensity(hdr_merge(stacks[m, last : last + EXPOSURES], times), omega)
        records.append(DayRecord(day, meta.labels[day], grid, power, stacks, sun, sky, valid))
    if not records:
        raise DataError(f"{root}: no labelled day with power data")
    return meta, records


def save_cache(out_dir, meta: Metadata, records) -> Path:
    """Write ingested records as one npz per day plus an index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in records:
        np.savez_compressed(
            out / f"{r.day}.npz",
            minutes=r.minutes,
            power_w=r.power_w,
            stacks=r.stacks,
            sun=r.sun,
            sky=r.sky,
            valid=r.valid,
        )
    index = {
        "days": [{"day": r.day, "label": r.label, "minutes": int(len(r.minutes)), "valid": int(r.valid.sum())} for r in records],
        "metadata": meta.to_json(),
        "schema_version": 1,
    }
    write_json(out / CACHE_INDEX, index)
    return out


def load_cache(cache_dir) -> tuple:
    cache = Path(cache_dir)
    index = json.loads((cache / CACHE_INDEX).read_text())
    meta = Metadata.from_json(index["metadata"])
    records = []
    for entry in index["days"]:
        with np.load(cache / f"{entry['day']}.npz") as z:
            records.append(
                DayRecord(
                    entry["day"], entry["label"], z["minutes"], z["power_w"], z["stacks"], z["sun"], z["sky"], z["valid"]
                )
            )
    return meta, records


def load_dataset(path, cache: Optional[Path] = None) -> tuple:
    """Load either a preprocessed cache (has index.json) or a raw dataset."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: dataset not found")
    if (path / CACHE_INDEX).is_file():
        return load_cache(path)
    if cache is not None and (Path(cache) / CACHE_INDEX).is_file():
        return load_cache(cache)
    meta, records = ingest(path)
    if cache is not None:
        save_cache(cache, meta, records)
    return meta, records
