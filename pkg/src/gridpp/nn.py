"""Pointwise neural error corrector.

A stack of 1x1 convolutions is the same multilayer perceptron applied at
every gridpoint independently, so the model here works on ``(n_points,
channels)`` matrices and reshapes to and from rasters at the edges.
Forward, backward and the optimizers are plain numpy.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .grid import cos_lat_weights, neighborhood_mean, neighborhood_mean_adjoint, tile_field
from .predictors import FeatureTensor
from .store import FieldSet, ManifestError, read_container, write_container

log = logging.getLogger(__name__)

LOSSES = ("mse", "mae", "logcosh", "cosine_similarity", "fractions")
REGIMES = ("global", "lat_weighted", "tri_region")
ACTIVATIONS = ("relu", "tanh")
FRACTIONS_WINDOWS = (1, 3, 9)


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    input_channels: int
    output_channels: int
    layer_widths: tuple = (64, 128, 256)
    activation: str = "relu"
    seed: int = 0
    loss: str = "mse"
    lat_weighting: bool = False
    regime: str = "global"
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    lr_schedule: str = "constant"
    tile_size: int = 16
    tropics_band: tuple = (-30.0, 30.0)
    blend_width: float = 5.0

    def __post_init__(self):
        self.layer_widths = tuple(int(w) for w in self.layer_widths)
        self.tropics_band = tuple(float(v) for v in self.tropics_band)
        if not self.layer_widths or min(self.layer_widths) < 1:
            raise ConfigError("layer_widths must be a nonempty list of positive integers")
        if self.input_channels < 1 or self.output_channels < 1:
            raise ConfigError("input_channels and output_channels must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("lr_schedule must be 'constant' or 'cosine'")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be 'adam' or 'sgd'")
        south, north = self.tropics_band
        if not south < north or self.blend_width < 0:
            raise ConfigError("tropics_band must be increasing and blend_width >= 0")
        if north - south <= self.blend_width:
            raise ConfigError("tropics band narrower than the blend width")

    @property
    def weighted_loss(self) -> bool:
        return self.lat_weighting or self.regime == "lat_weighted"


@dataclass
class ModelParams:
    config: ModelConfig
    weights: list
    biases: list
    in_mean: np.ndarray
    in_std: np.ndarray

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, [w.copy() for w in self.weights],
                           [b.copy() for b in self.biases], self.in_mean.copy(), self.in_std.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])


def init_model(config: ModelConfig) -> ModelParams:
    """He-uniform weights (limit ``sqrt(6 / fan_in)``), zero biases."""
    rng = np.random.default_rng(config.seed)
    sizes = [config.input_channels, *config.layer_widths, config.output_channels]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(config, weights, biases,
                       np.zeros(config.input_channels), np.ones(config.input_channels))


# ---------------------------------------------------------------- forward / backward


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z, a, kind):
    return (z > 0.0).astype(z.dtype) if kind == "relu" else 1.0 - a * a


def _as_points(features):
    """Return ``(X[n_points, C], spatial_shape or None)``."""
    if isinstance(features, FeatureTensor):
        return features.points(), features.values.shape[1:]
    x = np.asarray(features, np.float64)
    if x.ndim == 2:
        return x, None
    return x.reshape(x.shape[0], -1).T, x.shape[1:]


def _forward_points(params: ModelParams, X):
    kind = params.config.activation
    h = (X - params.in_mean) / params.in_std
    cache = [(None, h)]
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ W + b
        h = z if i == last else _act(z, kind)
        cache.append((z, h))
    return h, cache


def forward(params: ModelParams, features) -> np.ndarray:
    """Predicted error: ``(F, n_lat, n_lon)`` for rasters, ``(N, F)`` for point matrices."""
    X, spatial = _as_points(features)
    if X.shape[1] != params.config.input_channels:
        raise ConfigError(f"expected {params.config.input_channels} channels, got {X.shape[1]}")
    out, _ = _forward_points(params, X)
    if spatial is None:
        return out
    return out.T.reshape((out.shape[1],) + tuple(spatial))


def _backward_points(params: ModelParams, cache, d_out):
    kind = params.config.activation
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.weights)
    delta = d_out
    for i in range(len(params.weights) - 1, -1, -1):
        h_prev = cache[i][1]
        grads_w[i] = h_prev.T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            z, a = cache[i]
            delta = (delta @ params.weights[i].T) * _act_grad(z, a, kind)
    return grads_w, grads_b


# ---------------------------------------------------------------- losses


def _logcosh(x):
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax)) - np.log(2.0)


def loss_and_grad(prediction, target, kind: str = "mse", weights=None,
                  windows=FRACTIONS_WINDOWS):
    """Loss value and its gradient with respect to ``prediction``.

    ``prediction`` and ``target`` are ``(F, n_lat, n_lon)`` (or ``(n_lat,
    n_lon)``); ``weights`` is an optional nonnegative ``(n_lat, n_lon)``
    field applied to every feature.
    """
    p = np.asarray(prediction, np.float64)
    t = np.asarray(target, np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    if kind not in LOSSES:
        raise ValueError(f"unknown loss {kind!r}")
    if weights is None:
        w = np.ones(p.shape[-2:])
    else:
        w = np.asarray(weights, np.float64)
        if w.shape != p.shape[-2:]:
            raise ValueError(f"weights shape {w.shape} vs field {p.shape[-2:]}")
    n_feat = int(np.prod(p.shape[:-2])) if p.ndim > 2 else 1
    norm = n_feat * w.sum()
    if norm <= 0:
        raise ValueError("weights sum to zero")
    d = p - t
    if kind == "mse":
        return float((w * d * d).sum() / norm), 2.0 * w * d / norm
    if kind == "mae":
        return float((w * np.abs(d)).sum() / norm), w * np.sign(d) / norm
    if kind == "logcosh":
        return float((w * _logcosh(d)).sum() / norm), w * np.tanh(d) / norm
    if kind == "cosine_similarity":
        s = (w * p * t).sum()
        na = np.sqrt((w * p * p).sum())
        nb = np.sqrt((w * t * t).sum())
        if na == 0.0 or nb == 0.0:
            return 1.0, np.zeros_like(p)
        value = 1.0 - s / (na * nb)
        grad = -(w * t / (na * nb) - s * w * p / (na ** 3 * nb))
        return float(value), grad
    # fractions: mse of neighborhood means, averaged over window sizes
    value, grad = 0.0, np.zeros_like(p)
    for win in windows:
        dn = neighborhood_mean(d, win)
        value += (w * dn * dn).sum() / norm
        grad += neighborhood_mean_adjoint(2.0 * w * dn / norm, win)
    return float(value / len(windows)), grad / len(windows)


def loss(prediction, target, kind: str = "mse", weights=None) -> float:
    p = prediction.values if isinstance(prediction, FieldSet) else prediction
    t = target.values if isinstance(target, FieldSet) else target
    return loss_and_grad(p, t, kind, weights)[0]


def loss_and_gradient(params: ModelParams, features, target, kind: str | None = None,
                      weights=None):
    """Loss and exact reverse-mode gradient with respect to every weight and bias.

    Returns ``(value, (grad_weights, grad_biases))``.
    """
    kind = kind or params.config.loss
    X, spatial = _as_points(features)
    t = np.asarray(target.values if isinstance(target, FieldSet) else target, np.float64)
    if spatial is None:
        spatial = t.shape[-2:]
    out, cache = _forward_points(params, X)
    pred = out.T.reshape((out.shape[1],) + tuple(spatial))
    value, g = loss_and_grad(pred, t.reshape(pred.shape), kind, weights)
    d_out = g.reshape(out.shape[1], -1).T
    return value, _backward_points(params, cache, d_out)


def backward(params: ModelParams, features, target, kind: str | None = None, weights=None):
    """Gradient only; same layout as ``(params.weights, params.biases)``."""
    return loss_and_gradient(params, features, target, kind, weights)[1]


# ---------------------------------------------------------------- optimizers


class Adam:
    def __init__(self, params: ModelParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        arrays = params.weights + params.biases
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, params: ModelParams, grads):
        self.t += 1
        arrays = params.weights + params.biases
        gs = list(grads[0]) + list(grads[1])
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for a, g, m, v in zip(arrays, gs, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: ModelParams, lr=1e-2):
        self.lr = lr

    def step(self, params: ModelParams, grads):
        for a, g in zip(params.weights + params.biases, list(grads[0]) + list(grads[1])):
            a -= self.lr * g


# ---------------------------------------------------------------- regions


@dataclass
class RegionSplit:
    tropics_band: tuple = (-30.0, 30.0)
    blend_width: float = 5.0

    names = ("north", "tropics", "south")

    def weights(self, lat) -> np.ndarray:
        """Blend weights ``(3, *lat.shape)`` for north, tropics, south; they sum to 1."""
        lat = np.asarray(lat, np.float64)
        south, north = self.tropics_band
        bw = self.blend_width
        if bw == 0:
            w_n = (lat > north).astype(float)
            w_s = (lat < south).astype(float)
        else:
            w_n = np.clip((lat - (north - bw / 2)) / bw, 0.0, 1.0)
            w_s = np.clip(((south + bw / 2) - lat) / bw, 0.0, 1.0)
        return np.stack([w_n, 1.0 - w_n - w_s, w_s])


@dataclass
class RegionModels:
    models: list
    split: RegionSplit = field(default_factory=RegionSplit)

    @property
    def config(self) -> ModelConfig:
        return self.models[0].config


def _lat_channel(features):
    if isinstance(features, FeatureTensor):
        return features.values[0]
    return np.asarray(features)[0]


def predict(model, features) -> np.ndarray:
    """Predicted error from a single model or the blended regional models."""
    if isinstance(model, RegionModels):
        X, spatial = _as_points(features)
        lat = X[:, 0]
        blend = model.split.weights(lat)
        out = sum(b[:, None] * forward(m, X) for b, m in zip(blend, model.models))
        if spatial is None:
            return out
        return out.T.reshape((out.shape[1],) + tuple(spatial))
    return forward(model, features)


def postprocess(model, forecast: FieldSet, features) -> FieldSet:
    """Corrected forecast ``forecast - predicted_error``."""
    pred = predict(model, features)
    if pred.shape != forecast.values.shape:
        raise ManifestError(f"prediction shape {pred.shape} != forecast {forecast.values.shape}")
    return forecast.with_values(np.asarray(forecast.values, np.float64) - pred)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: object  # ModelParams or RegionModels
    trace: list    # per-epoch mean batch loss (one list per regional model for tri_region)


def _unpack(sample):
    feats, target = sample
    t = np.asarray(target.values if isinstance(target, FieldSet) else target, np.float64)
    if isinstance(feats, FeatureTensor):
        return feats.values, t, feats.grid
    return np.asarray(feats, np.float64), t, None


def normalization_stats(dataset):
    total, sq, n = 0.0, 0.0, 0
    for feats, _, _ in dataset:
        x = feats.reshape(feats.shape[0], -1)
        total = total + x.sum(axis=1)
        n += x.shape[1]
    mean = total / n
    for feats, _, _ in dataset:
        x = feats.reshape(feats.shape[0], -1)
        sq = sq + ((x - mean[:, None]) ** 2).sum(axis=1)
    std = np.sqrt(sq / n)
    std[std < 1e-12] = 1.0
    return mean, std


def _make_batches(samples, config: ModelConfig, region_weight=None, split=None):
    """Cut every sample into tiles; each batch carries a loss-weight raster."""
    batches = []
    for feats, target, grid in samples:
        n_lat, n_lon = feats.shape[1:]
        w = np.ones((n_lat, n_lon))
        if config.weighted_loss:
            if grid is None:
                w = np.clip(np.cos(np.deg2rad(feats[0])), 0.0, None)
            else:
                w = cos_lat_weights(grid)
        if region_weight is not None:
            w = w * split.weights(feats[0])[region_weight]
        size = min(config.tile_size, max(n_lat, n_lon))
        size = max(size, 8)
        ft = tile_field(feats, size)
        tt = tile_field(target, size)
        wt = tile_field(w, size)
        for (_, _, f), (_, _, t), (_, _, wv), mask in zip(ft.tiles, tt.tiles, wt.tiles, ft.valid_masks()):
            wv = wv * mask
            if wv.sum() > 0:
                batches.append((f, t, wv))
    return batches


def _fit(params: ModelParams, batches, epochs: int, tag: str = ""):
    config = params.config
    rng = np.random.default_rng(config.seed + 1)
    opt = Adam(params, config.learning_rate) if config.optimizer == "adam" else SGD(params, config.learning_rate)
    trace = []
    for epoch in range(epochs):
        if config.lr_schedule == "cosine":
            opt.lr = 0.5 * config.learning_rate * (1.0 + np.cos(np.pi * epoch / epochs))
        order = rng.permutation(len(batches))
        losses = []
        for i in order:
            f, t, w = batches[i]
            value, grads = loss_and_gradient(params, f, t, config.loss, w)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}{tag}")
            opt.step(params, grads)
            losses.append(value)
        trace.append(float(np.mean(losses)))
        if not all(np.all(np.isfinite(a)) for a in params.weights + params.biases):
            raise TrainingError(f"non-finite parameters at epoch {epoch}{tag}")
        log.debug("epoch %d%s loss %.6g", epoch, tag, trace[-1])
    return trace


def train(config: ModelConfig, dataset, epochs: int = 20) -> TrainResult:
    """Fit the corrector on ``[(features, target_error), ...]``.

    Batches are tiles of ``config.tile_size``; their order is reshuffled
    each epoch from ``config.seed``.  The ``tri_region`` regime returns a
    :class:`RegionModels` with three independently fitted models, each
    trained with its latitude blend mask as loss weight.
    """
    if not dataset:
        raise ValueError("train: empty dataset")
    samples = [_unpack(s) for s in dataset]
    for feats, target, _ in samples:
        if feats.shape[0] != config.input_channels:
            raise ConfigError(f"dataset has {feats.shape[0]} channels, config {config.input_channels}")
        if target.shape[0] != config.output_channels:
            raise ConfigError(f"target has {target.shape[0]} features, config {config.output_channels}")
    mean, std = normalization_stats(samples)

    def fresh():
        p = init_model(config)
        p.in_mean, p.in_std = mean.copy(), std.copy()
        return p

    if config.regime != "tri_region":
        params = fresh()
        trace = _fit(params, _make_batches(samples, config), epochs)
        return TrainResult(params, trace)

    split = RegionSplit(config.tropics_band, config.blend_width)
    models, traces = [], []
    for r, name in enumerate(split.names):
        params = fresh()
        batches = _make_batches(samples, config, region_weight=r, split=split)
        traces.append(_fit(params, batches, epochs, tag=f" ({name})") if batches else [])
        models.append(params)
    return TrainResult(RegionModels(models, split), traces)


def dataset_loss(model, dataset, kind: str = "mse", weighted: bool = False) -> float:
    """Mean per-sample loss of ``model`` (single or regional) over full rasters."""
    values = []
    for feats, target in dataset:
        t = np.asarray(target.values if isinstance(target, FieldSet) else target, np.float64)
        w = None
        if weighted:
            lat = _lat_channel(feats)
            w = np.clip(np.cos(np.deg2rad(lat)), 0.0, None)
        values.append(loss_and_grad(predict(model, feats), t, kind, w)[0])
    return float(np.mean(values))


# ---------------------------------------------------------------- checkpoints


def save_model(model, path):
    """Write a single or regional model with its config and normalization stats (float64)."""
    models = model.models if isinstance(model, RegionModels) else [model]
    cfg = asdict(models[0].config)
    meta = {"kind": "nn_model", "config": cfg, "n_models": len(models)}
    if isinstance(model, RegionModels):
        meta["split"] = {"tropics_band": list(model.split.tropics_band),
                         "blend_width": model.split.blend_width}
    arrays = []
    for m in models:
        arrays += [m.in_mean, m.in_std]
        for w, b in zip(m.weights, m.biases):
            arrays += [w, b]
    meta["array_shapes"] = [list(a.shape) for a in arrays]
    write_container(path, meta, arrays, dtype="<f8")


def load_model(path):
    meta, arrays = read_container(path)
    if meta.get("kind") != "nn_model":
        raise ManifestError(f"{path}: not a model checkpoint")
    config = ModelConfig(**meta["config"])
    n_layers = len(config.layer_widths) + 1
    per = 2 + 2 * n_layers
    models = []
    for k in range(meta["n_models"]):
        chunk = arrays[k * per : (k + 1) * per]
        models.append(ModelParams(config, list(chunk[2::2]), list(chunk[3::2]), chunk[0], chunk[1]))
    if "split" in meta:
        s = meta["split"]
        return RegionModels(models, RegionSplit(tuple(s["tropics_band"]), s["blend_width"]))
    return models[0]
