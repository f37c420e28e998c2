"""Synthetic analysis/forecast pairs with a known, learnable systematic error."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grid import Grid, gaussian_blur, make_grid
from .store import FeatureManifest, FieldSet, desk_manifest, generic_manifest, time_range


def gaussian_random_field(grid_or_shape, beta: float, seed) -> np.ndarray:
    """Zero-mean, unit-variance random field with power spectrum ``k**-beta``.

    Random complex coefficients are shaped by ``k**(-beta/2)`` and inverse
    transformed; the real part is kept and renormalized.
    """
    shape = grid_or_shape.shape if isinstance(grid_or_shape, Grid) else tuple(grid_or_shape)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_lat, n_lon = shape
    ky = np.fft.fftfreq(n_lat) * n_lat
    kx = np.fft.fftfreq(n_lon) * n_lon
    k = np.hypot(ky[:, None], kx[None, :])
    amp = np.zeros_like(k)
    amp[k > 0] = k[k > 0] ** (-beta / 2.0)
    coeff = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * amp
    x = np.fft.ifft2(coeff).real
    x -= x.mean()
    x /= x.std()
    # second pass tightens the zero-mean / unit-variance round-off
    x -= x.mean()
    return x / x.std()


@dataclass
class ScenarioConfig:
    n_lat: int = 64
    n_lon: int = 64
    n_features: int = 5
    beta: float = 3.0                 # spectral slope of the weather anomalies
    bias_beta: float = 4.0            # spectral slope of the systematic bias pattern
    bias_amplitude: float | list = 1.0
    noise_std: float = 0.1
    forecast_blur: float = 0.0        # sigma in cells, mimics model diffusion
    amplitude_error: tuple = (0.0, 0.0)  # forecast anomaly gain error (extratropics, tropics)
    tropics_band: tuple = (-30.0, 30.0)
    n_steps: int = 60
    step_hours: int = 6
    lead_steps: int = 1
    advection: int = 1                # zonal shift in cells per step
    innovation: float = 0.1           # fresh anomaly fraction per step
    offset: float | list = 10.0       # climatological mean of each feature
    start: str = "2021-01-01T00:00:00Z"
    seed: int = 0
    features: list = field(default=None)  # optional [{"variable", "level", "units"}]

    def __post_init__(self):
        if not 1.0 <= self.beta <= 4.0 or not 1.0 <= self.bias_beta <= 4.0:
            raise ValueError("spectral slopes must lie in [1, 4]")
        amps = np.atleast_1d(self.bias_amplitude)
        if np.any(amps < 0) or self.noise_std < 0 or self.forecast_blur < 0:
            raise ValueError("amplitudes, noise std and blur must be >= 0")
        if self.n_steps < 1 or self.lead_steps < 0:
            raise ValueError("n_steps must be >= 1 and lead_steps >= 0")
        self.amplitude_error = tuple(self.amplitude_error)
        self.tropics_band = tuple(self.tropics_band)

    @property
    def grid(self) -> Grid:
        return make_grid(self.n_lat, self.n_lon, 90.0, -180.0 / (self.n_lat - 1), 0.0, 360.0 / self.n_lon)

    @property
    def lead_hours(self) -> int:
        return self.lead_steps * self.step_hours

    def manifest(self) -> FeatureManifest:
        times = time_range(self.start, self.step_hours, self.n_steps)
        if self.features:
            m = FeatureManifest.from_dict({"features": self.features, "grid": self.grid.to_dict()})
            if m.n_features != self.n_features:
                raise ValueError("features list length differs from n_features")
            return FeatureManifest(m.features, self.grid, times, self.lead_hours)
        desk = desk_manifest(self.grid, times, self.lead_hours)
        if self.n_features <= desk.n_features:
            return FeatureManifest(desk.features[: self.n_features], self.grid, times, self.lead_hours)
        return generic_manifest(self.n_features, self.grid, times, self.lead_hours)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        data = json.loads(Path(path).read_text())
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**data)


def _per_feature(value, n):
    arr = np.atleast_1d(np.asarray(value, np.float64))
    return np.broadcast_to(arr, (n,)).copy()


def _streams(config: ScenarioConfig):
    ss = np.random.SeedSequence(config.seed)
    bias_ss, init_ss, step_ss = ss.spawn(3)
    return bias_ss, init_ss, step_ss.spawn(config.n_steps)


def bias_patterns(config: ScenarioConfig) -> np.ndarray:
    """The systematic error added to every forecast, ``(F, n_lat, n_lon)``."""
    bias_ss, _, _ = _streams(config)
    amps = _per_feature(config.bias_amplitude, config.n_features)
    seeds = bias_ss.spawn(config.n_features)
    return np.stack([a * gaussian_random_field(config.grid, config.bias_beta, np.random.default_rng(s))
                     for a, s in zip(amps, seeds)])


def _gain_field(config: ScenarioConfig) -> np.ndarray:
    lat = config.grid.lats
    south, north = config.tropics_band
    extra, trop = config.amplitude_error
    g = np.where((lat >= south) & (lat <= north), trop, extra)
    return np.repeat(g[:, None], config.n_lon, axis=1)


def synth_pair_series(config: ScenarioConfig) -> tuple[list, list]:
    """Return ``(analyses, forecasts)``, one FieldSet per valid time.

    Anomalies advect zonally with a small fresh innovation each step.  The
    forecast valid at each time is the (optionally blurred, optionally
    mis-amplified) analysis plus the bias pattern plus white noise.
    """
    manifest = config.manifest()
    F = config.n_features
    _, init_ss, step_seeds = _streams(config)
    rng0 = np.random.default_rng(init_ss)
    state = np.stack([gaussian_random_field(config.grid, config.beta, rng0) for _ in range(F)])
    offsets = _per_feature(config.offset, F)[:, None, None]
    bias = bias_patterns(config)
    gain = _gain_field(config)
    keep = np.sqrt(1.0 - config.innovation ** 2)
    analyses, forecasts = [], []
    for k, t in enumerate(manifest.times):
        rng = np.random.default_rng(step_seeds[k])
        if k > 0:
            fresh = np.stack([gaussian_random_field(config.grid, config.beta, rng) for _ in range(F)])
            state = keep * np.roll(state, config.advection, axis=-1) + config.innovation * fresh
        analysis = offsets + state
        fc_anom = gaussian_blur(state, config.forecast_blur) * (1.0 + gain)
        noise = config.noise_std * rng.standard_normal(state.shape)
        forecast = offsets + fc_anom + bias + noise
        analyses.append(FieldSet(manifest, t, analysis))
        forecasts.append(FieldSet(manifest, t, forecast))
    return analyses, forecasts
