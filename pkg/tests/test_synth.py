import json

import numpy as np
import pytest

from gridpp.predictors import decay_bias, forecast_error
from gridpp.synth import ScenarioConfig, bias_patterns, gaussian_random_field, synth_pair_series
from gridpp.verification import radial_power_spectrum


def test_grf_deterministic_and_normalized():
    a = gaussian_random_field((48, 96), 3.0, 7)
    assert np.array_equal(a, gaussian_random_field((48, 96), 3.0, 7))
    assert not np.array_equal(a, gaussian_random_field((48, 96), 3.0, 8))
    for beta in (1.0, 2.5, 4.0):
        x = gaussian_random_field((33, 70), beta, 3)
        assert abs(x.mean()) < 1e-10 and abs(x.var() - 1) < 1e-10


@pytest.mark.parametrize("beta", [1.0, 2.0, 3.0, 4.0])
def test_grf_spectral_slope(beta):
    slopes = []
    for seed in range(4):
        s = radial_power_spectrum(gaussian_random_field((128, 128), beta, seed))
        k = s.wavenumbers[1:48]  # skip bin 1 and the corner-starved top bins
        slopes.append(np.polyfit(np.log(k), np.log(s.power[1:48]), 1)[0])
    assert abs(np.mean(slopes) + beta) < 0.3
    assert all(abs(sl + beta) < 0.3 for sl in slopes)


def test_noise_free_error_equals_bias():
    cfg = ScenarioConfig(n_lat=16, n_lon=24, n_features=3, noise_std=0.0, forecast_blur=0.0, n_steps=5, seed=3)
    analyses, forecasts = synth_pair_series(cfg)
    bias = bias_patterns(cfg)
    for a, f in zip(analyses, forecasts):
        np.testing.assert_allclose(forecast_error(f, a).values, bias, rtol=0, atol=1e-12)


def test_decay_bias_recovers_pattern():
    cfg = ScenarioConfig(n_lat=32, n_lon=48, n_features=2, noise_std=0.1, n_steps=40, seed=11)
    analyses, forecasts = synth_pair_series(cfg)
    errors = [forecast_error(f, a) for f, a in zip(forecasts, analyses)]
    est = decay_bias(errors[::-1][:30], 0.05)
    rmse = np.sqrt(np.mean((est.values - bias_patterns(cfg)) ** 2))
    assert rmse < 0.05


def test_series_reproducible_and_seed_sensitive():
    cfg = ScenarioConfig(n_lat=12, n_lon=16, n_features=2, n_steps=6, seed=5, forecast_blur=1.0)
    a1, f1 = synth_pair_series(cfg)
    a2, f2 = synth_pair_series(cfg)
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a1 + f1, a2 + f2))
    a3, _ = synth_pair_series(ScenarioConfig(n_lat=12, n_lon=16, n_features=2, n_steps=6, seed=6))
    assert not np.array_equal(a1[0].values, a3[0].values)
    assert [x.time for x in a1] == cfg.manifest().times


def test_amplitude_error_by_region():
    cfg = ScenarioConfig(n_lat=19, n_lon=12, n_features=1, noise_std=0.0, bias_amplitude=0.0,
                         amplitude_error=(0.5, -0.3), n_steps=2, seed=1)
    analyses, forecasts = synth_pair_series(cfg)
    anom_a = analyses[1].values[0] - cfg.offset
    anom_f = forecasts[1].values[0] - cfg.offset
    lat = cfg.grid.lats
    np.testing.assert_allclose(anom_f[np.abs(lat) <= 30], 0.7 * anom_a[np.abs(lat) <= 30], atol=1e-12)
    np.testing.assert_allclose(anom_f[np.abs(lat) > 30], 1.5 * anom_a[np.abs(lat) > 30], atol=1e-12)


def test_scenario_config_validation_and_file(tmp_path):
    for kw in ({"beta": 0.5}, {"bias_amplitude": -1.0}, {"noise_std": -0.1}, {"n_steps": 0}):
        with pytest.raises(ValueError):
            ScenarioConfig(**kw)
    cfg = ScenarioConfig(n_lat=10, n_lon=20, seed=9, bias_amplitude=[1.0, 0.5, 0.0, 2.0, 1.0])
    path = tmp_path / "s.json"
    path.write_text(cfg.to_json())
    assert ScenarioConfig.from_file(path) == cfg
    path.write_text(json.dumps({"n_lat": 10, "bogus": 1}))
    with pytest.raises(ValueError, match="bogus"):
        ScenarioConfig.from_file(path)
    amps = np.sqrt(np.mean(bias_patterns(cfg) ** 2, axis=(1, 2)))
    np.testing.assert_allclose(amps, [1.0, 0.5, 0.0, 2.0, 1.0], atol=1e-12)
    assert cfg.manifest().n_features == 5
