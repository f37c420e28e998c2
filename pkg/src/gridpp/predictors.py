"""Model inputs: forecast error, decaying-average bias, sun geometry, feature stacks."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from datetime import datetime

import numpy as np

from .grid import Grid, GridError
from .store import FeatureManifest, FieldSet, ManifestError, parse_time, read_container, write_container

DEFAULT_W = 0.05
DEFAULT_LAGS = 40


def forecast_error(forecast: FieldSet, verifying_analysis: FieldSet) -> FieldSet:
    """``forecast - analysis`` per feature; the analysis must be valid at the forecast time."""
    forecast.check_compatible(verifying_analysis, "forecast_error")
    if forecast.time != verifying_analysis.time:
        raise ManifestError(
            f"forecast_error: analysis time {verifying_analysis.time} != valid time {forecast.time}"
        )
    return forecast.with_values(
        np.asarray(forecast.values, np.float64) - np.asarray(verifying_analysis.values, np.float64)
    )


def _check_w(w):
    if not 0.0 < w < 1.0:
        raise ValueError(f"decay constant w must lie in (0, 1), got {w}")


def decay_weights(n: int, w: float) -> np.ndarray:
    """Weights ``(1 - w)**i`` for lags ``i = 0 .. n-1``."""
    _check_w(w)
    return (1.0 - w) ** np.arange(n)


def decay_bias(errors, w: float = DEFAULT_W, n_lags: int | None = None):
    """Decay-weighted mean of past errors, ordered newest first.

    ``B = sum_i (1-w)**i e_{t-i} / sum_i (1-w)**i`` over lags ``0..n_lags``
    (all supplied errors when ``n_lags`` is None).  Accepts FieldSets or
    arrays and returns the same kind.  Sums run over differences from the
    newest error, so a constant history returns that constant bit-exactly.
    """
    _check_w(w)
    errors = list(errors)
    if not errors:
        raise ValueError("decay_bias needs at least one error field")
    if n_lags is not None:
        errors = errors[: n_lags + 1]
    arrays = [np.asarray(e.values if isinstance(e, FieldSet) else e, np.float64) for e in errors]
    if isinstance(errors[0], FieldSet):
        for e in errors[1:]:
            errors[0].check_compatible(e, "decay_bias")
    wts = decay_weights(len(arrays), w)
    anchor = arrays[0]
    num = np.zeros_like(anchor)
    for wt, a in zip(wts[1:], arrays[1:]):
        num += wt * (a - anchor)
    bias = anchor + num / wts.sum()
    if isinstance(errors[0], FieldSet):
        return errors[0].with_values(bias)
    return bias


class BiasState:
    """Streaming accumulator for the decay-weighted bias.

    With ``n_lags=None`` the average runs over the whole history.  With a
    finite window the last ``n_lags + 1`` errors are retained so the
    expiring term can be removed exactly.  Sums are kept relative to the
    first ingested error (the anchor).
    """

    def __init__(self, shape, w: float = DEFAULT_W, n_lags: int | None = DEFAULT_LAGS):
        _check_w(w)
        if n_lags is not None and n_lags < 0:
            raise ValueError("n_lags must be >= 0")
        self.w = float(w)
        self.n_lags = n_lags
        self.weighted_sum = np.zeros(shape)
        self.weight_sum = np.zeros(shape)
        self.anchor = None
        self.history = deque()
        self.count = 0

    def update(self, newest_error) -> "BiasState":
        e = np.asarray(newest_error.values if isinstance(newest_error, FieldSet) else newest_error,
                       np.float64)
        if e.shape != self.weighted_sum.shape:
            raise ValueError(f"error shape {e.shape} != state shape {self.weighted_sum.shape}")
        if self.anchor is None:
            self.anchor = e.copy()
        d = e - self.anchor
        decay = 1.0 - self.w
        self.weighted_sum = decay * self.weighted_sum + d
        self.weight_sum = decay * self.weight_sum + 1.0
        if self.n_lags is not None:
            self.history.append(d)
            if len(self.history) > self.n_lags + 1:
                old = self.history.popleft()
                tail = decay ** (self.n_lags + 1)
                self.weighted_sum -= tail * old
                self.weight_sum -= tail
        self.count += 1
        return self

    def bias(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("no errors ingested yet")
        return self.anchor + self.weighted_sum / self.weight_sum

    def save(self, path, manifest: FeatureManifest, time=None):
        """Checkpoint as a container: sums, weights, anchor, then retained history (oldest first)."""
        meta = manifest.to_dict()
        meta.update(
            kind="bias_state",
            w=self.w,
            n_lags=self.n_lags,
            count=self.count,
            n_history=len(self.history),
            time=None if time is None else parse_time(time).isoformat(),
        )
        del meta["times"]
        shape = list(self.weighted_sum.shape)
        anchor = np.zeros_like(self.weighted_sum) if self.anchor is None else self.anchor
        arrays = [self.weighted_sum, self.weight_sum, anchor, *self.history]
        meta["array_shapes"] = [shape] * len(arrays)
        write_container(path, meta, arrays, dtype="<f8")

    @classmethod
    def load(cls, path) -> tuple["BiasState", FeatureManifest]:
        meta, arrays = read_container(path)
        if meta.get("kind") != "bias_state":
            raise ManifestError(f"{path}: not a bias state checkpoint")
        state = cls(arrays[0].shape, meta["w"], meta["n_lags"])
        state.weighted_sum, state.weight_sum = arrays[0], arrays[1]
        state.count = int(meta["count"])
        state.anchor = arrays[2] if state.count else None
        state.history = deque(arrays[3:])
        return state, FeatureManifest.from_dict({**meta, "times": []})


def bias_series(errors, w: float = DEFAULT_W, n_lags: int | None = DEFAULT_LAGS, lag_steps: int = 1):
    """Bias available for each forecast in a series.

    ``errors`` are oldest first, one per valid time.  The forecast valid at
    step k is issued ``lag_steps`` earlier, so it may only use errors up to
    step ``k - lag_steps``.  Returns a list aligned with ``errors``; entries
    without any usable history are None.
    """
    state = None
    out = [None] * len(errors)
    for k, e in enumerate(errors):
        if state is None:
            state = BiasState(np.shape(e.values if isinstance(e, FieldSet) else e), w, n_lags)
        state.update(e)
        target = k + lag_steps
        if target < len(errors):
            b = state.bias()
            ref = errors[target]
            out[target] = ref.with_values(b) if isinstance(ref, FieldSet) else b
    return out


# ---------------------------------------------------------------- sun geometry


@dataclass
class SolarGeometry:
    azimuth: np.ndarray   # degrees clockwise from north, [0, 360)
    altitude: np.ndarray  # degrees above the horizon


_MIN_YEAR, _MAX_YEAR = 1950, 2050


def _julian_day(t: datetime) -> float:
    return t.timestamp() / 86400.0 + 2440587.5


def solar_position(time, lat, lon) -> SolarGeometry:
    """Geometric sun position from the low-precision almanac formulae.

    Good to a few hundredths of a degree between 1950 and 2050; no
    atmospheric refraction is applied.  ``lat``/``lon`` may be arrays.
    """
    t = parse_time(time)
    if not _MIN_YEAR <= t.year < _MAX_YEAR:
        raise ValueError(f"time {t.isoformat()} outside supported range {_MIN_YEAR}-{_MAX_YEAR}")
    n = _julian_day(t) - 2451545.0
    hour = t.hour + t.minute / 60.0 + (t.second + t.microsecond * 1e-6) / 3600.0

    mean_lon = np.mod(280.460 + 0.9856474 * n, 360.0)
    mean_anom = np.deg2rad(np.mod(357.528 + 0.9856003 * n, 360.0))
    ecl_lon = np.deg2rad(mean_lon + 1.915 * np.sin(mean_anom) + 0.020 * np.sin(2 * mean_anom))
    obliq = np.deg2rad(23.439 - 0.0000004 * n)
    ra = np.arctan2(np.cos(obliq) * np.sin(ecl_lon), np.cos(ecl_lon))
    dec = np.arcsin(np.sin(obliq) * np.sin(ecl_lon))

    gmst = np.mod(6.697375 + 0.0657098242 * n + hour, 24.0)
    lmst = np.mod(gmst + np.asarray(lon, np.float64) / 15.0, 24.0)
    ha = np.deg2rad(np.mod(lmst * 15.0 - np.rad2deg(ra) + 180.0, 360.0) - 180.0)

    phi = np.deg2rad(np.asarray(lat, np.float64))
    sin_alt = np.sin(dec) * np.sin(phi) + np.cos(dec) * np.cos(phi) * np.cos(ha)
    alt = np.arcsin(np.clip(sin_alt, -1.0, 1.0))
    az = np.arctan2(-np.cos(dec) * np.sin(ha),
                    np.sin(dec) * np.cos(phi) - np.cos(dec) * np.sin(phi) * np.cos(ha))
    az = np.mod(np.rad2deg(az), 360.0)
    az = np.where(az >= 360.0, 0.0, az)
    return SolarGeometry(azimuth=az, altitude=np.rad2deg(alt))


def subsolar_point(time) -> tuple[float, float]:
    """Latitude/longitude where the sun is at the zenith under the same formulae."""
    t = parse_time(time)
    n = _julian_day(t) - 2451545.0
    hour = t.hour + t.minute / 60.0 + (t.second + t.microsecond * 1e-6) / 3600.0
    mean_lon = np.mod(280.460 + 0.9856474 * n, 360.0)
    g = np.deg2rad(np.mod(357.528 + 0.9856003 * n, 360.0))
    lam = np.deg2rad(mean_lon + 1.915 * np.sin(g) + 0.020 * np.sin(2 * g))
    eps = np.deg2rad(23.439 - 0.0000004 * n)
    ra = np.rad2deg(np.arctan2(np.cos(eps) * np.sin(lam), np.cos(lam)))
    dec = np.rad2deg(np.arcsin(np.sin(eps) * np.sin(lam)))
    gmst = np.mod(6.697375 + 0.0657098242 * n + hour, 24.0)
    lon = np.mod(ra - gmst * 15.0, 360.0)
    return float(dec), float(lon)


# ---------------------------------------------------------------- feature stacks

GEOMETRY_CHANNELS = ("lat", "sin_lon", "cos_lon", "sin_azimuth", "cos_azimuth", "altitude")


@dataclass
class FeatureTensor:
    """Per-gridpoint model inputs, channel-first ``(C, n_lat, n_lon)``.

    Channel order: lat, sin/cos lon, sin/cos solar azimuth, solar altitude,
    then the F forecast features, the F analysis features at issue time and
    the F bias features.
    """

    values: np.ndarray
    channels: list
    grid: Grid
    time: datetime | None = None

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    def points(self) -> np.ndarray:
        """``(n_points, C)`` view in row-major gridpoint order."""
        return self.values.reshape(self.n_channels, -1).T


def geometry_channels(grid: Grid, valid_time) -> np.ndarray:
    lat2d, lon2d = grid.mesh()
    sun = solar_position(valid_time, lat2d, lon2d)
    lon_r = np.deg2rad(lon2d)
    az_r = np.deg2rad(sun.azimuth)
    return np.stack([lat2d, np.sin(lon_r), np.cos(lon_r), np.sin(az_r), np.cos(az_r), sun.altitude])


def assemble_features(forecast_t: FieldSet, analysis_at_issue: FieldSet, bias: FieldSet,
                      valid_time=None) -> FeatureTensor:
    for other, name in ((analysis_at_issue, "analysis"), (bias, "bias")):
        if other.grid != forecast_t.grid:
            raise GridError(f"assemble_features: {name} grid differs from forecast grid")
        forecast_t.check_compatible(other, f"assemble_features ({name})")
    valid_time = forecast_t.time if valid_time is None else parse_time(valid_time)
    geo = geometry_channels(forecast_t.grid, valid_time)
    values = np.concatenate([
        geo,
        np.asarray(forecast_t.values, np.float64),
        np.asarray(analysis_at_issue.values, np.float64),
        np.asarray(bias.values, np.float64),
    ])
    if not np.all(np.isfinite(values)):
        raise GridError("assemble_features: non-finite input")
    keys = forecast_t.manifest.keys()
    channels = list(GEOMETRY_CHANNELS)
    for prefix in ("forecast", "analysis", "bias"):
        channels += [f"{prefix}:{k}" for k in keys]
    return FeatureTensor(values, channels, forecast_t.grid, valid_time)
