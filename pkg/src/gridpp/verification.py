"""Forecast verification: RMSE, ACC, FSS, climatology, significance, skill cards, CLSDS."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .grid import gaussian_blur, neighborhood_mean
from .store import FieldSet, ManifestError, parse_time

POWER_FLOOR = 1e-30


def _values(x):
    return np.asarray(x.values if isinstance(x, FieldSet) else x, np.float64)


def _pair(candidate, truth):
    if isinstance(candidate, FieldSet) and isinstance(truth, FieldSet):
        candidate.check_compatible(truth, "verification")
    c, t = _values(candidate), _values(truth)
    if c.shape != t.shape:
        raise ManifestError(f"shape mismatch {c.shape} vs {t.shape}")
    return c, t


def _weights(weights, shape):
    if weights is None:
        return np.ones(shape[-2:])
    w = np.asarray(weights, np.float64)
    if w.shape != tuple(shape[-2:]):
        raise ValueError(f"weights shape {w.shape} vs field {shape[-2:]}")
    return w


# ---------------------------------------------------------------- point scores


def rmse(candidate, truth, weights=None):
    """Weighted RMSE over the last two axes; one value per leading index."""
    c, t = _pair(candidate, truth)
    w = _weights(weights, c.shape)
    return np.sqrt((w * (c - t) ** 2).sum(axis=(-2, -1)) / w.sum())


def acc(candidate, truth, climatology, valid_time=None, weights=None, return_degenerate=False):
    """Weighted anomaly correlation coefficient per feature.

    ``climatology`` is a :class:`Climatology` (looked up at ``valid_time``)
    or a field of expected values.  Where either anomaly has zero weighted
    variance the score is 0 and the feature is flagged degenerate.
    """
    c, t = _pair(candidate, truth)
    if isinstance(climatology, Climatology):
        if valid_time is None:
            valid_time = candidate.time if isinstance(candidate, FieldSet) else None
        if valid_time is None:
            raise ValueError("acc: valid_time needed to look up the climatology")
        if not climatology.covered(_doy(valid_time)):
            raise ValueError(f"acc: missing climatology day {_doy(valid_time)}")
        clim = climatology.at(valid_time)
    else:
        clim = _values(climatology)
    w = _weights(weights, c.shape)
    ws = w.sum()
    a_c = c - clim
    a_t = t - clim
    a_c = a_c - (w * a_c).sum(axis=(-2, -1), keepdims=True) / ws
    a_t = a_t - (w * a_t).sum(axis=(-2, -1), keepdims=True) / ws
    cov = (w * a_c * a_t).sum(axis=(-2, -1))
    var_c = (w * a_c * a_c).sum(axis=(-2, -1))
    var_t = (w * a_t * a_t).sum(axis=(-2, -1))
    degenerate = (var_c <= 0) | (var_t <= 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        score = np.where(degenerate, 0.0, cov / np.sqrt(var_c * var_t))
    score = np.clip(score, -1.0, 1.0)
    if return_degenerate:
        return score, degenerate
    return score


def fss(candidate, truth, threshold: float, window: int):
    """Fractions skill score of exceedances of ``threshold`` at neighbourhood ``window``."""
    c, t = _pair(candidate, truth)
    fc = neighborhood_mean((c >= threshold).astype(np.float64), window)
    ft = neighborhood_mean((t >= threshold).astype(np.float64), window)
    mse = ((fc - ft) ** 2).mean(axis=(-2, -1))
    ref = (fc ** 2).mean(axis=(-2, -1)) + (ft ** 2).mean(axis=(-2, -1))
    with np.errstate(invalid="ignore", divide="ignore"):
        score = np.where(ref > 0, 1.0 - mse / ref, 1.0)
    score = np.clip(score, 0.0, 1.0)
    return float(score) if np.ndim(score) == 0 else score


# ---------------------------------------------------------------- climatology


def _doy(t) -> int:
    return parse_time(t).timetuple().tm_yday


@dataclass
class Climatology:
    """Day-of-year expected values with a +/- ``half_window`` day running mean.

    Only the observed days are stored; :meth:`at` evaluates the windowed
    mean for any day 1-366 on demand.  Days with no samples within the
    window fall back to the mean over all samples.
    """

    days: np.ndarray       # observed day-of-year values, sorted
    sums: np.ndarray       # (n_days, F, n_lat, n_lon)
    counts: np.ndarray     # (n_days,)
    half_window: int = 7
    overall: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.overall is None:
            self.overall = self.sums.sum(axis=0) / self.counts.sum()

    def covered(self, day: int) -> bool:
        return bool(self._in_window(day).any())

    def _in_window(self, day: int) -> np.ndarray:
        dist = np.abs(self.days - day)
        dist = np.minimum(dist, 366 - dist)
        return dist <= self.half_window

    def at(self, when) -> np.ndarray:
        day = when if isinstance(when, (int, np.integer)) else _doy(when)
        if not 1 <= day <= 366:
            raise ValueError(f"day of year {day} out of range")
        sel = self._in_window(day)
        if not sel.any():
            return self.overall.copy()
        return self.sums[sel].sum(axis=0) / self.counts[sel].sum()

    @property
    def full_coverage(self) -> bool:
        return all(self.covered(d) for d in range(1, 367))


def build_climatology(analyses, half_window: int = 7) -> Climatology:
    """Per-gridpoint day-of-year mean of a series of analyses."""
    analyses = list(analyses)
    if not analyses:
        raise ValueError("build_climatology: empty series")
    by_day: dict[int, list] = {}
    for a in analyses:
        by_day.setdefault(_doy(a.time), []).append(_values(a))
    if len(by_day) < 2:
        raise ValueError("build_climatology: insufficient coverage (analyses span a single day)")
    days = np.array(sorted(by_day))
    sums = np.stack([np.sum(by_day[d], axis=0) for d in days])
    counts = np.array([len(by_day[d]) for d in days], dtype=np.float64)
    return Climatology(days, sums, counts, half_window)


# ---------------------------------------------------------------- significance


SIG_99, SIG_95, NOT_SIG = "99%", "95%", "not sig"


def paired_significance(differences) -> tuple[float, str]:
    """Two-tailed one-sample t-test of the per-time-step differences against zero."""
    d = np.asarray(differences, np.float64).ravel()
    n = d.size
    if n < 2:
        raise ValueError("paired_significance needs at least 2 differences")
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        p = 1.0 if mean == 0.0 else 0.0
    else:
        t = mean / (sd / math.sqrt(n))
        dof = n - 1
        # two-tailed tail area of Student's t via the regularized incomplete beta
        p = float(special.betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
    p = min(max(p, 0.0), 1.0)
    return p, significance_level(p)


def significance_level(p: float) -> str:
    if p < 0.01:
        return SIG_99
    if p < 0.05:
        return SIG_95
    return NOT_SIG


@dataclass
class SkillRow:
    variable: str
    level: str
    metric_a: float
    metric_b: float
    diff: float
    p_value: float
    significance: str


@dataclass
class SkillCard:
    metric: str
    rows: list

    COLUMNS = ("variable", "level", "metric_a", "metric_b", "diff", "p_value", "significance")

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(self.COLUMNS)
        for r in self.rows:
            wr.writerow([r.variable, r.level, repr(r.metric_a), repr(r.metric_b), repr(r.diff),
                         repr(r.p_value), r.significance])
        return buf.getvalue()

    def to_report(self) -> str:
        return json.dumps(
            {"metric": self.metric,
             "orientation": "diff > 0 means candidate better",
             "rows": [r.__dict__ for r in self.rows]},
            indent=2,
        )


def skill_card(candidate_runs, baseline_runs, truth_runs, metric: str = "rmse",
               climatology=None, weights=None) -> SkillCard:
    """Compare two aligned run series feature by feature.

    ``diff`` is oriented so that positive means the candidate is better
    (smaller RMSE or larger ACC); its p-value comes from a paired t-test
    over time steps.
    """
    if metric not in ("rmse", "acc"):
        raise ValueError(f"unknown metric {metric!r}")
    if not (len(candidate_runs) == len(baseline_runs) == len(truth_runs)) or not candidate_runs:
        raise ManifestError("skill_card: runs must be nonempty and equally long")
    per_a, per_b = [], []
    for a, b, t in zip(candidate_runs, baseline_runs, truth_runs):
        if not (a.time == b.time == t.time):
            raise ManifestError(f"skill_card: misaligned times {a.time}, {b.time}, {t.time}")
        a.check_compatible(b, "skill_card")
        a.check_compatible(t, "skill_card")
        if metric == "rmse":
            per_a.append(rmse(a, t, weights))
            per_b.append(rmse(b, t, weights))
        else:
            if climatology is None:
                raise ValueError("skill_card: ACC needs a climatology")
            per_a.append(acc(a, t, climatology, a.time, weights))
            per_b.append(acc(b, t, climatology, b.time, weights))
    per_a, per_b = np.array(per_a), np.array(per_b)
    diffs = per_b - per_a if metric == "rmse" else per_a - per_b
    rows = []
    for f, feat in enumerate(candidate_runs[0].manifest.features):
        p, level = paired_significance(diffs[:, f])
        rows.append(SkillRow(feat.variable, feat.level, float(per_a[:, f].mean()),
                             float(per_b[:, f].mean()), float(diffs[:, f].mean()), p, level))
    return SkillCard(metric, rows)


# ---------------------------------------------------------------- spectra


@dataclass
class Spectrum:
    """Radially binned power; ``power[i]`` is the mean over cells at radius ``i + 1``."""

    wavenumbers: np.ndarray
    power: np.ndarray
    counts: np.ndarray
    dc: float

    @property
    def totals(self) -> np.ndarray:
        return self.power * self.counts

    def to_csv(self) -> str:
        lines = ["bin,wavenumber,power"]
        lines += [f"{i},{k},{p!r}" for i, (k, p) in enumerate(zip(self.wavenumbers, self.power))]
        return "\n".join(lines) + "\n"


def power_2d(field) -> np.ndarray:
    """``|FFT|^2 / N^2``: sums to the mean square of the field; DC equals mean^2."""
    x = np.asarray(field, np.float64)
    return np.abs(np.fft.fft2(x)) ** 2 / x.size ** 2


def radial_power_spectrum(field) -> Spectrum:
    x = np.asarray(field, np.float64)
    if x.ndim != 2:
        raise ValueError("radial_power_spectrum expects a 2-D raster")
    if not np.all(np.isfinite(x)):
        raise ValueError("field contains NaN or Inf")
    n_lat, n_lon = x.shape
    power = power_2d(x)
    ky = np.fft.fftfreq(n_lat) * n_lat
    kx = np.fft.fftfreq(n_lon) * n_lon
    radius = np.rint(np.hypot(ky[:, None], kx[None, :])).astype(int)
    n_bins = min(n_lat, n_lon) // 2
    sel = (radius >= 1) & (radius <= n_bins)
    sums = np.bincount(radius[sel] - 1, power[sel], minlength=n_bins)
    counts = np.bincount(radius[sel] - 1, minlength=n_bins).astype(np.float64)
    mean = np.divide(sums, counts, out=np.zeros(n_bins), where=counts > 0)
    return Spectrum(np.arange(1, n_bins + 1), mean, counts, float(power[0, 0]))


def log_spectral_distance(P, O) -> float:
    """Mean over radial bins of ``log S(P) / B(P) - log S(O) / B(O)``.

    ``B`` is the log of the zero-wavenumber power.  Powers are floored at
    1e-30 and bins where the floor applies to either field are dropped.
    """
    sp, so = radial_power_spectrum(_values(P)), radial_power_spectrum(_values(O))
    bp, bo = _bias_term(sp), _bias_term(so)
    ok = (sp.power > POWER_FLOOR) & (so.power > POWER_FLOOR) & (sp.counts > 0)
    if not ok.any():
        raise ValueError("spectrally empty field")
    return float(np.mean(np.log(sp.power[ok]) / bp - np.log(so.power[ok]) / bo))


def _bias_term(spec: Spectrum) -> float:
    b = math.log(max(spec.dc, POWER_FLOOR))
    if abs(b) < 1e-12:
        raise ValueError("bias component log(DC power) is zero; field mean of magnitude 1")
    return b


def clsds(P, O, sigma_ref: float = 1.0, lat_mode: str = "edge") -> float:
    """Blur-calibrated log spectral distance of ``P`` relative to the base ``O``.

    0 means as sharp as ``O``, 1 means as blurry as ``O`` smoothed by a
    Gaussian of ``sigma_ref`` cells; positive is blurrier, negative sharper.
    ``lat_mode="periodic"`` suits fields that wrap in both directions; the
    edge-replicating default leaks a wrap discontinuity into the planar
    spectrum of such fields.
    """
    o = _values(O)
    ref = log_spectral_distance(gaussian_blur(o, sigma_ref, lat_mode=lat_mode), o)
    if abs(ref) < 1e-12:
        raise ValueError("reference blur indistinguishable from the base field")
    return log_spectral_distance(P, o) / ref
