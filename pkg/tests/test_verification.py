import math

import numpy as np
import pytest

from gridpp.grid import gaussian_blur, make_grid
from gridpp.store import FieldSet, ManifestError, generic_manifest, time_range
from gridpp.synth import gaussian_random_field
from gridpp.verification import (
    acc,
    build_climatology,
    clsds,
    fss,
    log_spectral_distance,
    paired_significance,
    radial_power_spectrum,
    rmse,
    significance_level,
    skill_card,
)

def _fs(values, t="2021-03-01T00:00Z", grid=None):
    values = np.asarray(values, np.float64)
    if values.ndim == 2:
        values = values[None]
    grid = grid or make_grid(values.shape[1], values.shape[2], 80, -160 / (values.shape[1] - 1), 0,
                             360 / values.shape[2])
    return FieldSet(generic_manifest(values.shape[0], grid), t, values)


@pytest.fixture
def fixture8():
    rng = np.random.default_rng(100)
    return rng.standard_normal((8, 8)), rng.standard_normal((8, 8)), rng.uniform(0.1, 1, (8, 8))


# ---------------------------------------------------------------- rmse / acc


def test_rmse_direct_oracle(fixture8):
    c, t, w = fixture8
    num = den = 0.0
    for i in range(8):
        for j in range(8):
            num += w[i, j] * (c[i, j] - t[i, j]) ** 2
            den += w[i, j]
    assert abs(rmse(_fs(c), _fs(t), w)[0] - math.sqrt(num / den)) < 1e-12
    s = sum((c[i, j] - t[i, j]) ** 2 for i in range(8) for j in range(8))
    assert abs(rmse(_fs(c), _fs(t))[0] - math.sqrt(s / 64)) < 1e-12


def test_rmse_cases(fixture8):
    c, t, w = fixture8
    assert rmse(_fs(c), _fs(c))[0] == 0.0
    for weights in (None, w, np.eye(8) + 0.01):
        assert rmse(_fs(t + 1.75), _fs(t), weights)[0] == pytest.approx(1.75, abs=1e-12)
    assert rmse(_fs(c), _fs(t))[0] > 0
    with pytest.raises(ManifestError):
        rmse(_fs(c), _fs(np.zeros((8, 6))))


def _acc_oracle(c, t, clim, w):
    ac, at = c - clim, t - clim
    ws = w.sum()
    mc = sum(w[i, j] * ac[i, j] for i in range(8) for j in range(8)) / ws
    mt = sum(w[i, j] * at[i, j] for i in range(8) for j in range(8)) / ws
    cov = sum(w[i, j] * (ac[i, j] - mc) * (at[i, j] - mt) for i in range(8) for j in range(8))
    vc = sum(w[i, j] * (ac[i, j] - mc) ** 2 for i in range(8) for j in range(8))
    vt = sum(w[i, j] * (at[i, j] - mt) ** 2 for i in range(8) for j in range(8))
    return cov / math.sqrt(vc * vt)


def test_acc_direct_oracle(fixture8):
    c, t, w = fixture8
    clim = np.random.default_rng(101).standard_normal((8, 8))
    assert abs(acc(_fs(c), _fs(t), clim, weights=w)[0] - _acc_oracle(c, t, clim, w)) < 1e-12
    assert abs(acc(_fs(c), _fs(t), clim)[0] - _acc_oracle(c, t, clim, np.ones((8, 8)))) < 1e-12


def test_acc_cases(fixture8):
    c, t, w = fixture8
    clim = np.zeros((8, 8)) + 0.3
    assert acc(_fs(t), _fs(t), clim)[0] == pytest.approx(1.0, abs=1e-12)
    assert acc(_fs(2 * clim - t), _fs(t), clim)[0] == pytest.approx(-1.0, abs=1e-12)
    score, degenerate = acc(_fs(clim), _fs(t), clim, return_degenerate=True)
    assert score[0] == 0.0 and degenerate[0]
    shift = np.random.default_rng(102).standard_normal((8, 8))
    np.testing.assert_allclose(acc(_fs(c + shift), _fs(t + shift), clim + shift, weights=w),
                               acc(_fs(c), _fs(t), clim, weights=w), atol=1e-12)


def test_acc_missing_climatology_day():
    grid = make_grid(8, 8, 87.5, -25, 0, 45)
    series = [_fs(np.ones((8, 8)), t, grid) for t in time_range("2021-01-01T00:00Z", 24, 10)]
    clim = build_climatology(series)
    assert acc(series[0], series[0], clim).shape == (1,)
    with pytest.raises(ValueError, match="missing climatology day"):
        acc(_fs(np.ones((8, 8)), "2021-07-01T00:00Z", grid), series[0].with_values(np.ones((1, 8, 8))), clim,
            valid_time="2021-07-01T00:00Z")


def test_metric_ranges_random():
    rng = np.random.default_rng(103)
    for _ in range(50):
        c, t, clim = rng.standard_normal((3, 2, 6, 7)) * rng.uniform(0.1, 10)
        assert np.all(rmse(_fs(c), _fs(t)) >= 0)
        a = acc(_fs(c), _fs(t), clim)
        assert np.all((a >= -1) & (a <= 1))
        f = fss(c, t, rng.uniform(-1, 1), 3)
        assert np.all((f >= 0) & (f <= 1))


# ---------------------------------------------------------------- fss


def _fractions_oracle(binary, window):
    h = window // 2
    n_lat, n_lon = binary.shape
    out = np.zeros_like(binary, dtype=float)
    for i in range(n_lat):
        for j in range(n_lon):
            s = 0.0
            for di in range(-h, h + 1):
                for dj in range(-h, h + 1):
                    s += binary[min(max(i + di, 0), n_lat - 1), (j + dj) % n_lon]
            out[i, j] = s / window ** 2
    return out


@pytest.mark.parametrize("window", [1, 3, 5])
def test_fss_direct_oracle(fixture8, window):
    c, t, _ = fixture8
    fc = _fractions_oracle((c >= 0.2).astype(float), window)
    ft = _fractions_oracle((t >= 0.2).astype(float), window)
    expected = 1 - np.mean((fc - ft) ** 2) / (np.mean(fc ** 2) + np.mean(ft ** 2))
    assert abs(fss(c, t, 0.2, window) - expected) < 1e-12


def test_fss_cases(fixture8):
    c, t, _ = fixture8
    assert fss(c, c, 0.0, 3) == 1.0
    assert fss(c, t, 100.0, 3) == 1.0  # no exceedances anywhere
    a, b = np.zeros((8, 8)), np.zeros((8, 8))
    a[2, 2], b[5, 6] = 1, 1
    assert fss(a, b, 0.5, 1) == 0.0
    with pytest.raises(ValueError):
        fss(c, t, 0.0, 2)


# ---------------------------------------------------------------- climatology


def test_climatology_constant():
    grid = make_grid(4, 5, 60, -40, 0, 72)
    series = [_fs(np.full((2, 4, 5), 3.5), t, grid) for t in time_range("2021-01-01T00:00Z", 24, 365)]
    clim = build_climatology(series)
    assert clim.full_coverage
    for day in (1, 100, 365, 366):
        np.testing.assert_allclose(clim.at(day), 3.5, rtol=0, atol=1e-12)


def test_climatology_annual_sinusoid():
    grid = make_grid(3, 4, 60, -60, 0, 90)
    period = 365.0
    amp = np.array([[1.0, 2.0, 3.0, 4.0]] * 3)
    times = time_range("2021-01-01T00:00Z", 24, 365)
    series = [_fs(amp * np.sin(2 * np.pi * (k + 1) / period), t, grid) for k, t in enumerate(times)]
    clim = build_climatology(series, half_window=7)
    # closed form: mean of sin over a +/-7 day window is sin(x) * mean(cos(2 pi d / P))
    factor = np.mean(np.cos(2 * np.pi * np.arange(-7, 8) / period))
    assert 1 - factor < 0.02
    worst = 0.0
    for day in range(1, 366):
        truth = amp * np.sin(2 * np.pi * day / period)
        got = clim.at(day)[0]
        worst = max(worst, np.max(np.abs(got - truth) / amp))
        if 8 <= day <= 358:
            np.testing.assert_allclose(got, factor * truth, rtol=0, atol=1e-12)
    assert worst < 0.02


def test_climatology_errors():
    grid = make_grid(3, 4, 60, -60, 0, 90)
    with pytest.raises(ValueError):
        build_climatology([])
    same_day = [_fs(np.ones((3, 4)), t, grid) for t in time_range("2021-05-01T00:00Z", 6, 4)]
    with pytest.raises(ValueError, match="insufficient coverage"):
        build_climatology(same_day)
    clim = build_climatology(same_day + [_fs(np.full((3, 4), 3.0), "2021-05-03T00:00Z", grid)])
    assert not clim.full_coverage
    np.testing.assert_allclose(clim.at(200), 1.4)  # uncovered day falls back to the overall mean
    with pytest.raises(ValueError):
        clim.at(0)


# ---------------------------------------------------------------- spectrum


def _dft_power(x):
    n_lat, n_lon = x.shape
    a = np.exp(-2j * np.pi * np.outer(np.arange(n_lat), np.arange(n_lat)) / n_lat)
    b = np.exp(-2j * np.pi * np.outer(np.arange(n_lon), np.arange(n_lon)) / n_lon)
    return np.abs(a @ x @ b.T) ** 2 / x.size ** 2


def _binned_oracle(x):
    n_lat, n_lon = x.shape
    p = _dft_power(x)
    n_bins = min(n_lat, n_lon) // 2
    sums, counts = np.zeros(n_bins), np.zeros(n_bins)
    for i in range(n_lat):
        for j in range(n_lon):
            ky = i if i <= n_lat // 2 else i - n_lat
            kx = j if j <= n_lon // 2 else j - n_lon
            if i == n_lat // 2 and n_lat % 2 == 0:
                ky = -n_lat // 2
            if j == n_lon // 2 and n_lon % 2 == 0:
                kx = -n_lon // 2
            r = int(np.rint(math.hypot(ky, kx)))
            if 1 <= r <= n_bins:
                sums[r - 1] += p[i, j]
                counts[r - 1] += 1
    return sums / counts, p[0, 0]


def test_spectrum_constant_field():
    s = radial_power_spectrum(np.full((12, 16), -2.5))
    assert s.dc == pytest.approx(6.25, rel=1e-14)
    assert np.all(np.abs(s.power) < 1e-28)
    assert len(s.power) == 6 and s.wavenumbers[0] == 1


def test_spectrum_pure_cosine_bin4():
    lon = np.arange(16)
    x = np.tile(np.cos(2 * np.pi * 4 * lon / 16), (16, 1))
    s = radial_power_spectrum(x)
    assert s.totals[3] / s.totals.sum() > 0.99
    np.testing.assert_allclose(s.totals[3], 0.5, rtol=1e-12)


def test_spectrum_matches_explicit_dft():
    x = gaussian_random_field((20, 24), 3.0, 104) + 4.0
    power, dc = _binned_oracle(x)
    s = radial_power_spectrum(x)
    np.testing.assert_allclose(s.power, power, rtol=1e-10, atol=1e-18)
    assert s.dc == pytest.approx(dc, rel=1e-12)


@pytest.mark.parametrize("shape", [(16, 16), (33, 64), (181, 360)])
def test_parseval(shape):
    x = np.random.default_rng(105).standard_normal(shape) + 1.3
    total = np.sum(np.abs(np.fft.fft2(x)) ** 2) / x.size ** 2
    assert abs(total - np.mean(x ** 2)) / np.mean(x ** 2) < 1e-10
    s = radial_power_spectrum(x)
    assert s.dc + s.totals.sum() <= np.mean(x ** 2) * (1 + 1e-10)


def test_spectrum_rejects_nonfinite():
    x = np.zeros((8, 8))
    x[1, 1] = np.nan
    with pytest.raises(ValueError):
        radial_power_spectrum(x)
    with pytest.raises(ValueError):
        radial_power_spectrum(np.zeros(8))


# ---------------------------------------------------------------- LSD / CLSDS


def _red(seed, n=64, mean=5.0):
    # cropped from a taller periodic synthesis, so not periodic in latitude like a lat-lon raster
    return gaussian_random_field((2 * n, n), 3.0, seed)[:n] + mean


def test_lsd_direct_oracle():
    o = _red(106, 32)
    p = gaussian_blur(o, 2.0)
    sp, dp = _binned_oracle(p)
    so, do = _binned_oracle(o)
    expected = np.mean(np.log(sp) / np.log(dp) - np.log(so) / np.log(do))
    assert log_spectral_distance(p, o) == pytest.approx(expected, rel=1e-10)
    assert log_spectral_distance(o, o) == 0.0


def test_lsd_symmetry_rules():
    o = _red(107)
    p = gaussian_blur(o, 1.5)
    # blur keeps the mean, so B(P) == B(O) and the distance is antisymmetric
    assert log_spectral_distance(p, o) == pytest.approx(-log_spectral_distance(o, p), rel=1e-12)
    # the distance itself is antisymmetric for any B; the calibrated score is not,
    # because its denominator is built from the base field
    q = p + 2.0
    assert log_spectral_distance(q, o) == pytest.approx(-log_spectral_distance(o, q), rel=1e-12)
    assert clsds(q, o) != pytest.approx(-clsds(o, q), rel=1e-3)
    assert clsds(q, o) != pytest.approx(clsds(o, q), rel=1e-3)


def test_lsd_errors():
    with pytest.raises(ValueError, match="spectrally empty"):
        log_spectral_distance(np.full((8, 8), 3.0), np.full((8, 8), 3.0))
    with pytest.raises(ValueError, match="bias component"):
        g = gaussian_random_field((16, 16), 3.0, 108)
        log_spectral_distance(g + 1.0, _red(108, 16))  # mean exactly 1, so log(DC power) = 0


def test_clsds_calibration():
    for seed in range(3):
        o = _red(109 + seed)
        assert abs(clsds(o, o)) < 1e-9
        assert abs(clsds(gaussian_blur(o, 1.0), o) - 1.0) < 1e-9
        values = [clsds(gaussian_blur(o, s), o) for s in (0.5, 1.0, 2.0, 4.0)]
        assert all(b > a for a, b in zip(values, values[1:]))
        assert values[2] > 1
        assert clsds(o + 0.5 * np.random.default_rng(seed).standard_normal(o.shape), o) < 0
    with pytest.raises(ValueError, match="indistinguishable"):
        clsds(_red(112), _red(112), sigma_ref=0.0)


def test_clsds_periodic_fields_need_periodic_blur():
    # doubly periodic red noise: the edge-replicating blur breaks the wrap and leaks
    # power into high wavenumbers, which can make the sigma sweep non-monotone
    o = gaussian_random_field((128, 128), 3.0, 9) + 5.0
    edge = [clsds(gaussian_blur(o, s), o) for s in (2.0, 4.0)]
    assert edge[1] < edge[0]
    per = [clsds(gaussian_blur(o, s, lat_mode="periodic"), o, lat_mode="periodic") for s in (0.5, 1.0, 2.0, 4.0)]
    assert per[1] == pytest.approx(1.0, abs=1e-12)
    assert all(b > a for a, b in zip(per, per[1:]))


# ---------------------------------------------------------------- significance


def _t_pvalue_quadrature(d):
    mpmath = pytest.importorskip("mpmath")
    mpmath.mp.dps = 30
    n = len(d)
    t = abs(np.mean(d) / (np.std(d, ddof=1) / math.sqrt(n)))
    nu = n - 1
    c = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi) * mpmath.gamma(nu / 2))
    tail = mpmath.quad(lambda x: c * (1 + x * x / nu) ** (-(nu + 1) / 2), [t, mpmath.inf])
    return float(2 * tail)


def test_paired_significance_oracles():
    d = np.array([0.31, -0.12, 0.45, 0.22, 0.08, 0.51, -0.05, 0.27, 0.19, 0.33])
    p, level = paired_significance(d)
    assert abs(p - _t_pvalue_quadrature(d)) < 1e-6
    stats = pytest.importorskip("scipy.stats")
    assert abs(p - stats.ttest_1samp(d, 0.0).pvalue) < 1e-9
    assert level == significance_level(p) == "99%"
    rng = np.random.default_rng(113)
    for _ in range(10):
        x = rng.standard_normal(rng.integers(2, 40)) + rng.uniform(-0.5, 0.5)
        assert abs(paired_significance(x)[0] - _t_pvalue_quadrature(x)) < 1e-6


def test_paired_significance_edges():
    assert paired_significance(np.zeros(5)) == (1.0, "not sig")
    assert paired_significance(np.full(5, 0.2)) == (0.0, "99%")
    with pytest.raises(ValueError):
        paired_significance([1.0])
    assert significance_level(0.03) == "95%" and significance_level(0.05) == "not sig"


def test_significance_scale_invariant():
    rng = np.random.default_rng(114)
    for _ in range(30):
        d = rng.standard_normal(12) + rng.uniform(-1, 1)
        p, level = paired_significance(d)
        for k in (1e-3, 7.0, 1e4):
            pk, lk = paired_significance(d * k)
            assert lk == level and pk == pytest.approx(p, rel=1e-9, abs=1e-15)


# ---------------------------------------------------------------- skill card


def _runs(seed, n=20, noise=0.5, offset=0.0):
    rng = np.random.default_rng(seed)
    grid = make_grid(8, 8, 87.5, -25, 0, 45)
    times = time_range("2021-01-01T00:00Z", 6, n)
    m = generic_manifest(2, grid, times, 6)
    truth = [FieldSet(m, t, rng.standard_normal((2, 8, 8))) for t in times]
    cand = [FieldSet(m, t, tr.values + offset + noise * rng.standard_normal((2, 8, 8))) for t, tr in zip(times, truth)]
    return truth, cand


def test_skill_card_identical_runs():
    truth, cand = _runs(115)
    card = skill_card(cand, cand, truth)
    assert all(r.diff == 0 and r.significance == "not sig" and r.p_value == 1.0 for r in card.rows)


def test_skill_card_strictly_better():
    truth, cand = _runs(116, noise=0.1)
    _, base = _runs(116, noise=1.0)
    card = skill_card(cand, base, truth)
    assert all(r.diff > 0 and r.significance == "99%" for r in card.rows)
    header = card.to_csv().splitlines()[0]
    assert header == "variable,level,metric_a,metric_b,diff,p_value,significance"
    assert '"rows"' in card.to_report()


def test_skill_card_composition_oracle():
    truth, cand = _runs(117, noise=0.4)
    _, base = _runs(118, noise=0.45)
    w = np.random.default_rng(119).uniform(0.2, 1, (8, 8))
    card = skill_card(cand, base, truth, weights=w)
    for f, row in enumerate(card.rows):
        ra = np.array([rmse(a, t, w)[f] for a, t in zip(cand, truth)])
        rb = np.array([rmse(b, t, w)[f] for b, t in zip(base, truth)])
        p, level = paired_significance(rb - ra)
        assert row.metric_a == pytest.approx(ra.mean(), rel=1e-12)
        assert row.metric_b == pytest.approx(rb.mean(), rel=1e-12)
        assert row.diff == pytest.approx((rb - ra).mean(), rel=1e-12, abs=1e-15)
        assert row.p_value == pytest.approx(p, rel=1e-12) and row.significance == level


def test_skill_card_acc_and_errors():
    truth, cand = _runs(120, noise=0.2)
    _, base = _runs(120, noise=0.8)
    clim = build_climatology(truth)
    card = skill_card(cand, base, truth, metric="acc", climatology=clim)
    assert all(r.diff > 0 for r in card.rows)
    with pytest.raises(ValueError):
        skill_card(cand, base, truth, metric="acc")
    with pytest.raises(ManifestError):
        skill_card(cand[1:], base, truth)
    shifted = [b.__class__(b.manifest, t.time, b.values) for b, t in zip(base, truth[1:] + truth[:1])]
    with pytest.raises(ManifestError):
        skill_card(cand, shifted, truth)
