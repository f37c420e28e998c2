"""Reference correctors: decay-bias subtraction, Gaussian blur, per-gridpoint linear model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .grid import gaussian_blur
from .store import FeatureManifest, FieldSet, ManifestError, read_container, write_container

DEFAULT_BLUR_SIGMA = 2.0
RIDGE = 1e-8


def _values(x):
    return np.asarray(x.values if isinstance(x, FieldSet) else x, np.float64)


def decay_subtract(forecast: FieldSet, bias: FieldSet) -> FieldSet:
    forecast.check_compatible(bias, "decay_subtract")
    return forecast.with_values(_values(forecast) - _values(bias))


def blur_baseline(forecast: FieldSet, sigma: float = DEFAULT_BLUR_SIGMA) -> FieldSet:
    return forecast.with_values(gaussian_blur(_values(forecast), sigma))


@dataclass
class LinearMosModel:
    """Per-gridpoint, per-feature error model ``a + b*bias + c*(forecast - clim)``.

    Each coefficient array has shape ``(F, n_lat, n_lon)``.
    """

    intercept: np.ndarray
    bias_coef: np.ndarray
    anomaly_coef: np.ndarray
    n_ridge: int = 0

    def predict_error(self, forecast, bias, climatology) -> np.ndarray:
        f = _values(forecast)
        return self.intercept + self.bias_coef * _values(bias) + self.anomaly_coef * (f - _values(climatology))

    def save(self, path, manifest: FeatureManifest):
        meta = manifest.to_dict()
        del meta["times"]
        meta.update(kind="linear_mos", layers=["intercept", "bias_coef", "anomaly_coef"])
        arrays = [*self.intercept, *self.bias_coef, *self.anomaly_coef]
        write_container(path, meta, arrays, dtype="<f8")

    @classmethod
    def load(cls, path) -> "LinearMosModel":
        meta, arrays = read_container(path)
        if meta.get("kind") != "linear_mos":
            raise ManifestError(f"{path}: not a linear model file")
        stack = np.stack(arrays)
        F = len(meta["features"])
        return cls(stack[:F], stack[F : 2 * F], stack[2 * F :])


def linear_mos_fit(history, climatology) -> LinearMosModel:
    """Least-squares fit at every gridpoint and feature independently.

    Parameters
    ----------
    history : sequence of (error, bias, forecast)
        FieldSets or arrays of shape ``(F, n_lat, n_lon)``.  The error is
        the fit target.
    climatology : FieldSet, array, or sequence of them
        Expected value used to form the forecast anomaly; either one field
        for all samples or one per history entry.
    """
    history = list(history)
    if len(history) < 3:
        raise ValueError(f"linear_mos_fit needs >= 3 history entries, got {len(history)}")
    errs = np.stack([_values(h[0]) for h in history])
    bias = np.stack([_values(h[1]) for h in history])
    fc = np.stack([_values(h[2]) for h in history])
    if isinstance(climatology, (list, tuple)):
        clim = np.stack([_values(c) for c in climatology])
    else:
        clim = _values(climatology)[None]
    anom = fc - clim
    shape = errs.shape[1:]
    n = len(history)
    coef, n_ridge = _kernels.ols3_fit(
        errs.reshape(n, -1), bias.reshape(n, -1), anom.reshape(n, -1), ridge=RIDGE
    )
    coef = coef.reshape((3,) + shape)
    return LinearMosModel(coef[0], coef[1], coef[2], n_ridge)


def linear_mos_apply(model: LinearMosModel, forecast: FieldSet, bias, climatology) -> FieldSet:
    return forecast.with_values(_values(forecast) - model.predict_error(forecast, bias, climatology))
