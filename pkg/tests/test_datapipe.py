import logging
import math
from datetime import datetime, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _util import T_BASE, make_day
from pvnowcast.datapipe import (
    CHANNELS,
    DataError,
    DayRecord,
    InsufficientHistory,
    PowerSeries,
    exposure_channels,
    filter_invalid,
    fit_alpha,
    hdr_merge,
    horizon_power,
    inverse_log_transform,
    log_transform,
    make_samples,
    minute_average,
    missing_history,
    normalize,
    pixel_grid,
    power_to_q,
    q_to_power,
    query_sample,
    read_power_csv,
    sky_intensity,
    solar_position,
    solid_angles,
    split_days,
    stack_channels,
    sun_variation,
    write_power_csv,
)
from pvnowcast.datapipe.io import (
    Metadata,
    discover_frames,
    frame_name,
    parse_frame_name,
    read_metadata,
    read_pgm,
    write_json,
    write_pgm,
)


def utc(*args):
    return int(datetime(*args, tzinfo=timezone.utc).timestamp())


# transforms


def test_log_transform_examples():
    assert log_transform(1.0) == 0.0
    assert log_transform(math.e) == pytest.approx(1.0, abs=1e-15)
    assert log_transform(0.5) == 0.5
    assert inverse_log_transform(log_transform(2500.0)) == pytest.approx(2500.0, rel=1e-6)
    with pytest.raises(ValueError, match="negative"):
        log_transform(-1.0)


def test_alpha_for_2500_watts():
    alpha = fit_alpha([10.0, 2500.0, 700.0])
    assert alpha == pytest.approx(0.1278, abs=5e-5)
    assert power_to_q(2500.0, alpha) == pytest.approx(1.0, abs=1e-12)
    for a in (0.05, alpha, 0.5):
        assert power_to_q(1.0, a) == 0.0
    # sub-watt readings clamp to the same floor
    assert power_to_q(0.3, alpha) == 0.0


def test_fit_alpha_errors():
    with pytest.raises(ValueError, match="empty"):
        fit_alpha([])
    with pytest.raises(ValueError):
        fit_alpha([0.5, 0.9])


def test_normalize_clips_with_warning(caplog):
    alpha = fit_alpha([2500.0])
    with caplog.at_level(logging.WARNING):
        q = power_to_q(3000.0, alpha)
    assert q == 1.0
    assert "clipped" in caplog.text
    with pytest.raises(ValueError):
        normalize(1.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(1.0, 2500.0))
def test_q_round_trip(w):
    alpha = fit_alpha([2500.0])
    back = power_to_q(q_to_power(power_to_q(w, alpha), alpha), alpha)
    assert back == pytest.approx(float(power_to_q(w, alpha)), rel=1e-6, abs=1e-12)
    assert q_to_power(power_to_q(w, alpha), alpha) == pytest.approx(w, rel=1e-6)


def test_minute_average_examples():
    t = T_BASE + np.arange(1, 61)
    const = minute_average(PowerSeries(t, np.full(60, 100.0)))
    np.testing.assert_array_equal(const.power, [100.0])
    assert const.timestamps[0] == T_BASE + 60
    alt = minute_average(PowerSeries(t, np.where(np.arange(60) % 2, 200.0, 0.0)))
    np.testing.assert_array_equal(alt.power, [100.0])
    ramp = minute_average(PowerSeries(t, np.arange(60.0)))
    assert ramp.power[0] == pytest.approx(29.5, abs=1e-12)


def test_minute_average_drops_uncovered_minutes():
    t = np.concatenate([T_BASE + np.arange(1, 61), T_BASE + 180 + np.arange(1, 61)])
    out = minute_average(PowerSeries(t, np.ones(120)))
    assert list(out.timestamps - T_BASE) == [60, 240]


def test_power_series_invariants():
    with pytest.raises(ValueError, match="increasing"):
        PowerSeries([2, 1], [0.0, 0.0])
    with pytest.raises(ValueError, match="finite"):
        PowerSeries([1, 2], [0.0, np.nan])


def test_filter_invalid_examples():
    stacks = np.full((3, CHANNELS, 4, 4), 120, dtype=np.uint8)
    stacks[2, -1] = 0  # black longest exposure
    keep = filter_invalid([0.0, 500.0, 500.0], stacks)
    assert keep.tolist() == [False, True, False]
    assert filter_invalid(np.zeros(0), np.zeros((0, CHANNELS, 4, 4), np.uint8)).size == 0


# geometry


def test_hdr_merge_linear_pixel():
    times = np.array([11, 88, 176, 264], dtype=float)
    r = 0.003
    merged = hdr_merge((r * times)[:, None, None] * np.ones((4, 2, 2)))
    np.testing.assert_allclose(merged, r, rtol=1e-12)


def test_hdr_merge_ignores_saturated_exposure():
    times = np.array([11, 88, 176, 264], dtype=float)
    r = 0.005  # 264 ms clips at 1.32
    v = np.clip(r * times, 0, 1)[:, None, None]
    assert v[-1] == 1.0
    assert hdr_merge(v)[0, 0] == pytest.approx(r, abs=1e-6)


def test_hdr_merge_all_zero_fallback():
    assert not np.any(hdr_merge(np.zeros((4, 3, 3))))
    assert hdr_merge(np.ones((4, 1, 1)))[0, 0] == pytest.approx(1 / 11)
    with pytest.raises(ValueError):
        hdr_merge(np.zeros((3, 2, 2)))


def test_solid_angle_sum_near_two_pi():
    total = solid_angles(256).sum()
    assert 2 * np.pi * 0.99 <= total <= 2 * np.pi * 1.01
    assert solid_angles(64).sum() == pytest.approx(2 * np.pi, rel=0.01)


def test_solid_angle_outside_circle_and_radial_profile():
    om = solid_angles(64)
    assert om[0, 0] == 0.0
    c = 32
    # equiangular mapping: per-area solid angle is sinc(theta), so it falls
    # monotonically from the zenith outwards
    row = om[c, c:60]
    assert np.all(np.diff(row) < 0)
    assert om[c, c] > om[c, c + 16]


def test_sky_intensity_uniform_and_zero():
    om = solid_angles(64)
    assert sky_intensity(np.ones((64, 64)), om) == pytest.approx(1.0, rel=0.01)
    assert sky_intensity(np.zeros((64, 64)), om) == 0.0
    with pytest.raises(ValueError, match="shape"):
        sky_intensity(np.ones((32, 32)), om)


def _polar_quadrature(mask, n_theta=800, n_phi=1600):
    """Hemisphere fraction of pixels in ``mask``, integrated on a (theta, phi) grid."""
    h = mask.shape[0]
    th = (np.arange(n_theta) + 0.5) * (np.pi / 2) / n_theta
    ph = (np.arange(n_phi) + 0.5) * 2 * np.pi / n_phi
    T, P = np.meshgrid(th, ph, indexing="ij")
    r = T / (np.pi / 2) * (h / 2)
    col = np.clip(np.floor(h / 2 + r * np.sin(P)).astype(int), 0, h - 1)
    row = np.clip(np.floor(h / 2 - r * np.cos(P)).astype(int), 0, h - 1)
    w = np.sin(T) * (np.pi / 2 / n_theta) * (2 * np.pi / n_phi)
    return float((w * mask[row, col]).sum() / (2 * np.pi))


@pytest.mark.parametrize("region", ["north", "high"])
def test_sky_intensity_region_matches_quadrature(region):
    om = solid_angles(64)
    zenith, _, _ = pixel_grid(64)
    if region == "north":
        mask = np.zeros((64, 64))
        mask[:32] = 1.0
    else:
        mask = (zenith < np.pi / 4).astype(float)
    s = sky_intensity(mask, om)
    assert s == pytest.approx(_polar_quadrature(mask), rel=0.01)
    if region == "north":
        assert s == pytest.approx(0.5, rel=0.01)


def test_sky_intensity_linear():
    om = solid_angles(32)
    b = np.random.default_rng(0).uniform(size=(32, 32))
    assert sky_intensity(3.7 * b, om) == pytest.approx(3.7 * sky_intensity(b, om), rel=1e-9)


def _noon_scan(day_start, lat, lon):
    ts = day_start + np.arange(0, 86400, 30)
    pos = solar_position(ts, lat, lon)
    i = int(np.argmax(pos[:, 1]))
    return ts, pos, i


def test_solar_position_equator_equinox():
    ts, pos, i = _noon_scan(utc(2021, 3, 20), 0.0, 0.0)
    assert np.degrees(pos[i, 1]) == pytest.approx(90.0, abs=1.0)
    morning = solar_position(int(ts[i]) - 6 * 3600, 0.0, 0.0)
    assert np.degrees(morning.elevation) == pytest.approx(0.0, abs=1.0)
    assert np.degrees(morning.azimuth) == pytest.approx(90.0, abs=1.0)


def test_solar_position_kyoto_solstice():
    _, pos, i = _noon_scan(utc(2021, 6, 21) - 9 * 3600, 35.03, 135.78)
    assert np.degrees(pos[i, 1]) == pytest.approx(90 - abs(35.03 - 23.44), abs=1.0)
    assert np.degrees(pos[i, 0]) == pytest.approx(180.0, abs=2.0)
    with pytest.raises(ValueError):
        solar_position(0, 91.0, 0.0)


def test_sun_variation_wraps_azimuth():
    later = np.array([0.05, 0.5])
    earlier = np.array([2 * np.pi - 0.05, 0.4])
    d = sun_variation(later, earlier)
    assert d[1] == pytest.approx(0.1 / (2 * np.pi))
    assert d[0] == pytest.approx(0.1 / np.pi)


# channel layout


def test_stack_channels_order():
    frames = np.arange(20).reshape(5, 4, 1, 1) * np.ones((5, 4, 2, 2))
    stacked = stack_channels(frames)
    assert stacked.shape == (20, 2, 2)
    assert [int(v) for v in stacked[:, 0, 0]] == list(range(20))
    assert exposure_channels("shortest") == [0, 4, 8, 12, 16]
    assert exposure_channels("longest") == [3, 7, 11, 15, 19]
    with pytest.raises(ValueError):
        stack_channels(np.zeros((4, 5, 2, 2)))


# samples


def test_samples_one_minute_windows():
    day = make_day(np.linspace(100, 400, 30))
    s = make_samples([day], alpha=0.13, horizon=1)
    first = s[0]
    steps = (day.minutes[s.hist[0]] - s.t0[0]) // 60
    assert steps.tolist() == [-5, -4, -3, -2, -1, 0]
    assert first.t0 == day.minutes[5]
    assert len(s) == 30 - 6
    assert s.p_target[0] == pytest.approx(day.power_w[6])


def test_samples_ten_minute_windows():
    power = np.arange(100, 200, dtype=float)
    day = make_day(power)
    s = make_samples([day], alpha=0.13, horizon=10)
    steps = (day.minutes[s.hist[0]] - s.t0[0]) // 60
    assert steps.tolist() == [-50, -40, -30, -20, -10, 0]
    j = int((s.t0[0] - day.minutes[0]) // 60)
    assert s.p_t0[0] == pytest.approx(power[j - 9 : j + 1].mean())
    assert s.p_target[0] == pytest.approx(power[j + 1 : j + 11].mean())
    # first valid t0 needs averaging windows back to minute 0
    assert j == 59
    assert len(s) == 100 - 59 - 10


def test_constant_series_has_zero_targets():
    s = make_samples([make_day(np.full(40, 800.0))], alpha=0.13, horizon=3)
    assert len(s) > 0
    assert not np.any(s.dq)


def test_gap_removes_straddling_samples():
    n = 40
    full = make_samples([make_day(np.full(n, 500.0))], alpha=0.13)
    valid = np.ones(n, dtype=bool)
    valid[20] = False
    gapped = make_samples([make_day(np.full(n, 500.0), valid=valid)], alpha=0.13)
    # minute 20 can be any of 6 history slots or the target
    assert len(full) - len(gapped) == 7
    bad = make_day(np.full(n, 500.0)).minutes[20]
    for i in range(len(gapped)):
        used = np.append(gapped.t0[i] + 60 * np.arange(-5, 1), gapped.t0[i] + 60)
        assert bad not in used


def test_horizon_power_matches_raw_mean():
    power = np.random.default_rng(0).uniform(100, 900, 30)
    avg, ok = horizon_power(make_day(power), 5)
    assert not ok[:4].any() and ok[4:].all()
    assert avg[12] == pytest.approx(power[8:13].mean())


def test_short_series_gives_empty_set(caplog):
    with caplog.at_level(logging.WARNING):
        s = make_samples([make_day(np.full(5, 300.0))], alpha=0.13)
    assert len(s) == 0
    assert "no complete" in caplog.text


def test_query_sample_and_missing_history():
    day = make_day(np.linspace(200, 300, 20))
    t0 = int(day.minutes[19])
    q = query_sample(day, 0.13, t0)
    assert np.isnan(q.p_target[0])
    assert q.p_t0[0] == pytest.approx(300.0)
    assert missing_history(day, int(day.minutes[2])) == [int(day.minutes[0]) - 180, int(day.minutes[0]) - 120, int(day.minutes[0]) - 60]
    with pytest.raises(InsufficientHistory) as info:
        query_sample(day, 0.13, int(day.minutes[3]))
    assert len(info.value.missing) == 2


def test_split_days_examples():
    days = [f"d{i:03d}" for i in range(90)]
    s = split_days(days, seed=0)
    assert (len(s["test"]), len(s["validation"]), len(s["train"])) == (18, 7, 65)
    assert sorted(s["test"] + s["validation"] + s["train"]) == days
    assert not set(s["test"]) & set(s["train"])
    small = split_days(days[:5], seed=3)
    assert (len(small["test"]), len(small["validation"]), len(small["train"])) == (1, 1, 3)
    assert split_days(days, seed=0) == s
    assert split_days(list(reversed(days)), seed=0) == s
    with pytest.raises(ValueError):
        split_days(days[:4])


# on-disk formats


def test_power_csv_round_trip(tmp_path):
    series = PowerSeries(T_BASE + np.arange(3), [1.5, 2.25, 0.0])
    path = tmp_path / "power.csv"
    write_power_csv(path, series)
    assert path.read_text().splitlines()[0] == "timestamp,power_w"
    back = read_power_csv(path)
    np.testing.assert_array_equal(back.timestamps, series.timestamps)
    np.testing.assert_array_equal(back.power, series.power)


def test_power_csv_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("time,watts\n")
    with pytest.raises(DataError, match="header"):
        read_power_csv(bad)
    bad.write_text("timestamp,power_w\n2021-06-01T00:00:00Z,abc\n")
    with pytest.raises(DataError, match=":2"):
        read_power_csv(bad)
    with pytest.raises(DataError):
        read_power_csv(tmp_path / "missing.csv")


def test_frame_names_and_pgm(tmp_path):
    name = frame_name(utc(2021, 6, 1, 3, 4, 15), 88)
    assert name == "20210601T030415Z_88.pgm"
    assert parse_frame_name(name) == (utc(2021, 6, 1, 3, 4, 15), 88)
    assert parse_frame_name("notes.txt") is None
    img = np.random.default_rng(0).integers(0, 256, (16, 16), dtype=np.uint8)
    write_pgm(tmp_path / name, img)
    assert (tmp_path / name).read_bytes()[:2] == b"P5"
    np.testing.assert_array_equal(read_pgm(tmp_path / name), img)
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "x.pgm", img.astype(float))


def test_discover_frames_sorted_and_filtered(tmp_path):
    img = np.zeros((16, 16), dtype=np.uint8)
    t = utc(2021, 6, 1, 3, 0, 0)
    for ms in (264, 11, 176, 88, 50):
        write_pgm(tmp_path / frame_name(t, ms), img)
    write_pgm(tmp_path / frame_name(t - 15, 11), img)
    (tmp_path / "readme.txt").write_text("x")
    found = discover_frames(tmp_path, (11, 88, 176, 264))
    assert list(found) == [t - 15, t]
    assert sorted(found[t]) == [11, 88, 176, 264]


def test_metadata_round_trip_and_errors(tmp_path):
    meta = Metadata(35.0, 135.0, 2500.0, 32, {"2021-06-01": "clear"})
    write_json(tmp_path / "metadata.json", meta.to_json())
    assert read_metadata(tmp_path) == meta
    write_json(tmp_path / "metadata.json", {"latitude": 1})
    with pytest.raises(DataError, match="missing"):
        read_metadata(tmp_path)
    with pytest.raises(DataError):
        read_metadata(tmp_path / "nope")


def test_day_record_validation():
    with pytest.raises(ValueError, match="label"):
        make_day(np.ones(3), label="sunny")
    day = make_day(np.ones(3))
    with pytest.raises(ValueError, match="contiguous"):
        DayRecord("x", "clear", np.array([0, 60, 180]), day.power_w, day.stacks, day.sun, day.sky, day.valid)
