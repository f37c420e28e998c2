"""Glue from forecast/analysis series to model-ready samples."""
from __future__ import annotations

from dataclasses import dataclass

from .predictors import DEFAULT_LAGS, DEFAULT_W, FeatureTensor, assemble_features, bias_series, forecast_error
from .store import FieldSet


@dataclass
class Sample:
    forecast: FieldSet
    analysis: FieldSet        # verifying analysis at the valid time
    analysis_issue: FieldSet  # analysis at issue time
    error: FieldSet
    bias: FieldSet
    features: FeatureTensor

    @property
    def time(self):
        return self.forecast.time


def align(analyses, forecasts):
    """Pair analyses and forecasts by valid time (both sorted, oldest first)."""
    by_time = {a.time: a for a in analyses}
    pairs = [(by_time[f.time], f) for f in forecasts if f.time in by_time]
    if not pairs:
        raise ValueError("no forecast has a verifying analysis")
    return pairs


def build_samples(analyses, forecasts, w=DEFAULT_W, n_lags=DEFAULT_LAGS, lead_steps=1,
                  warmup=0, biases=None):
    """Samples for every step whose issue-time analysis and bias exist.

    ``warmup`` additionally drops the first steps so the bias average has
    seen at least ``warmup`` errors.  Precomputed ``biases`` (aligned with
    the forecasts, None where unavailable) may be passed instead of
    recomputing them.
    """
    pairs = align(analyses, forecasts)
    errors = [forecast_error(f, a) for a, f in pairs]
    if biases is None:
        biases = bias_series(errors, w, n_lags, lag_steps=lead_steps)
    samples = []
    for k, ((a, f), e, b) in enumerate(zip(pairs, errors, biases)):
        issue = k - lead_steps
        if b is None or issue < 0 or issue + 1 < warmup:
            continue
        a_issue = pairs[issue][0]
        samples.append(Sample(f, a, a_issue, e, b, assemble_features(f, a_issue, b, f.time)))
    return samples


def split_samples(samples, train_fraction=0.7):
    n_train = int(round(len(samples) * train_fraction))
    return samples[:n_train], samples[n_train:]
