from .geometry import (
    EXPOSURE_TIMES_MS,
    SolarPosition,
    hat_weight,
    hdr_merge,
    pixel_grid,
    sky_intensity,
    sky_to_unit,
    solar_position,
    solid_angles,
)
from .io import DataError, Metadata, ingest, load_dataset, read_power_csv, save_cache, write_power_csv
from .samples import (
    CHANNELS,
    WEATHER_CLASSES,
    DayRecord,
    InsufficientHistory,
    Sample,
    SampleSet,
    exposure_channels,
    horizon_power,
    make_samples,
    missing_history,
    normalized_sun,
    q_to_watts_delta,
    query_sample,
    split_days,
    stack_channels,
    sun_variation,
    train_power,
)
from .transforms import (
    DARKNESS_THRESHOLD,
    PowerSeries,
    clamp_power,
    filter_invalid,
    fit_alpha,
    inverse_log_transform,
    log_transform,
    minute_average,
    normalize,
    power_to_q,
    q_to_power,
    window_average,
)
