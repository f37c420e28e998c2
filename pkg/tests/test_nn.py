import numpy as np
import pytest

from gridpp.grid import make_grid
from gridpp.nn import (
    LOSSES,
    ConfigError,
    ModelConfig,
    RegionModels,
    RegionSplit,
    TrainingError,
    backward,
    dataset_loss,
    forward,
    init_model,
    load_model,
    loss,
    loss_and_gradient,
    postprocess,
    predict,
    save_model,
    train,
)
from gridpp.store import FieldSet, generic_manifest


def _random_model(seed=0, n_in=6, n_out=2, widths=(4, 4), activation="relu"):
    cfg = ModelConfig(n_in, n_out, widths, activation=activation, seed=seed)
    p = init_model(cfg)
    rng = np.random.default_rng(seed + 100)
    p.biases = [rng.standard_normal(b.shape) * 0.3 for b in p.biases]
    p.in_mean = rng.standard_normal(n_in) * 0.1
    p.in_std = rng.uniform(0.5, 2.0, n_in)
    return p


def test_param_count_reference_widths():
    p = init_model(ModelConfig(57, 17, (64, 128, 256)))
    assert p.n_params == 3712 + 8320 + 33024 + 4369 == 49425
    assert [w.shape for w in p.weights] == [(57, 64), (64, 128), (128, 256), (256, 17)]
    assert all(np.all(b == 0) for b in p.biases)
    assert np.abs(p.weights[0]).max() <= np.sqrt(6 / 57)


def test_init_deterministic():
    a = init_model(ModelConfig(9, 1, seed=42))
    b = init_model(ModelConfig(9, 1, seed=42))
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
    c = init_model(ModelConfig(9, 1, seed=43))
    assert not np.array_equal(a.weights[0], c.weights[0])


@pytest.mark.parametrize("kw", [{"layer_widths": ()}, {"layer_widths": (4, 0)}, {"loss": "huber"},
                                {"regime": "x"}, {"activation": "gelu"}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ModelConfig(9, 1, **kw)


def test_forward_pointwise_properties():
    p = _random_model(1, n_in=5, n_out=3)
    rng = np.random.default_rng(2)
    X = rng.standard_normal((40, 5))
    out = forward(p, X)
    perm = rng.permutation(40)
    assert np.array_equal(forward(p, X[perm]), out[perm])
    for i in (0, 17, 39):
        single = forward(p, X[i : i + 1])
        np.testing.assert_allclose(single[0], out[i], rtol=0, atol=1e-12)
    raster = X.T.reshape(5, 5, 8)
    np.testing.assert_allclose(forward(p, raster), out.T.reshape(3, 5, 8), atol=1e-12)


def test_forward_locality_under_perturbation():
    p = _random_model(3, n_in=4, n_out=2)
    x = np.random.default_rng(4).standard_normal((4, 6, 7))
    base = forward(p, x)
    y = x.copy()
    y[:, 2, 3] += 5.0
    diff = forward(p, y) != base
    assert diff[:, 2, 3].any()
    diff[:, 2, 3] = False
    assert not diff.any()


def test_forward_zero_params():
    p = _random_model()
    p.weights = [np.zeros_like(w) for w in p.weights]
    p.biases = [np.zeros_like(b) for b in p.biases]
    assert np.all(forward(p, np.ones((3, 6))) == 0)
    with pytest.raises(ConfigError):
        forward(p, np.ones((3, 7)))


# ---------------------------------------------------------------- losses


def test_loss_values():
    rng = np.random.default_rng(5)
    e = rng.standard_normal((2, 6, 7))
    for kind in LOSSES:
        assert loss(e, e, kind) == pytest.approx(0.0, abs=1e-14)
    assert loss(e + 1, e, "mse") == pytest.approx(1.0, abs=1e-14)
    assert loss(e + 1, e, "mae") == pytest.approx(1.0, abs=1e-14)
    assert loss(e + 1, e, "logcosh") == pytest.approx(np.log(np.cosh(1.0)), abs=1e-14)
    assert abs(np.log(np.cosh(1.0)) - 0.4338) < 1e-4
    assert loss(-e, e, "cosine_similarity") == pytest.approx(2.0, abs=1e-14)
    assert loss(np.zeros_like(e), e, "cosine_similarity") == 1.0
    assert loss(e + 1, e, "fractions") == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        loss(e, e[:1], "mse")
    with pytest.raises(ValueError):
        loss(e, e, "huber")


def test_weighted_loss_with_uniform_weights_equals_unweighted():
    rng = np.random.default_rng(6)
    p, t = rng.standard_normal((2, 3, 5, 8))
    for kind in LOSSES:
        assert loss(p, t, kind, np.full((5, 8), 0.37)) == pytest.approx(loss(p, t, kind), rel=1e-13)


def test_fractions_loss_direct_oracle():
    from gridpp.grid import neighborhood_mean

    rng = np.random.default_rng(7)
    p, t = rng.standard_normal((2, 1, 9, 10))
    expected = np.mean([np.mean((neighborhood_mean(p - t, s)) ** 2) for s in (1, 3, 9)])
    assert loss(p, t, "fractions") == pytest.approx(expected, rel=1e-13)


# ---------------------------------------------------------------- gradients


def _flat(grads):
    return np.concatenate([g.ravel() for pair in zip(*grads) for g in pair])


def _fd_gradient(p, x, t, kind, weights, h=1e-4):
    arrays = [a for pair in zip(p.weights, p.biases) for a in pair]
    out = []
    for a in arrays:
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            up = loss_and_gradient(p, x, t, kind, weights)[0]
            a[idx] = orig - h
            dn = loss_and_gradient(p, x, t, kind, weights)[0]
            a[idx] = orig
            out.append((up - dn) / (2 * h))
    return np.array(out)


@pytest.mark.parametrize("kind", LOSSES)
@pytest.mark.parametrize("activation", ["relu", "tanh"])
@pytest.mark.parametrize("weighted", [False, True])
def test_gradient_matches_finite_differences(kind, activation, weighted):
    p = _random_model(8, n_in=6, n_out=2, activation=activation)
    rng = np.random.default_rng(9)
    x = rng.standard_normal((6, 1, 5))  # 5 gridpoints
    t = rng.standard_normal((2, 1, 5))
    w = rng.uniform(0.2, 1.0, (1, 5)) if weighted else None
    analytic = _flat(backward(p, x, t, kind, w))
    numeric = _fd_gradient(p, x, t, kind, w)
    rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    assert rel < 1e-6


def test_gradient_zero_at_fit_and_deterministic():
    p = _random_model(10)
    x = np.random.default_rng(11).standard_normal((6, 2, 3))
    t = forward(p, x)
    gw, gb = backward(p, x, t, "mse")
    assert all(np.all(g == 0) for g in gw + gb)
    t2 = t + 0.5
    a = _flat(backward(p, x, t2, "mse"))
    b = _flat(backward(p, x, t2, "mse"))
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- training


def _linear_dataset(seed=12, n=4, shape=(8, 8), n_in=5, n_out=2):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n_in, n_out)) * 0.5
    data = []
    for _ in range(n):
        x = rng.standard_normal((n_in,) + shape)
        y = np.einsum("chw,cf->fhw", x, A) + 0.3
        data.append((x, y))
    return data


def test_train_realizable_linear_target():
    data = _linear_dataset(n=8, shape=(16, 16))
    cfg = ModelConfig(5, 2, (32,), seed=0, tile_size=8, learning_rate=1e-2, lr_schedule="cosine")
    res = train(cfg, data, epochs=500)
    assert res.trace[-1] < res.trace[0]
    assert dataset_loss(res.model, data, "mse") < 1e-4


def test_train_zero_epochs_returns_init():
    data = _linear_dataset()
    cfg = ModelConfig(5, 2, (8,), seed=3, tile_size=8)
    res = train(cfg, data, epochs=0)
    init = init_model(cfg)
    assert res.trace == []
    assert all(np.array_equal(a, b) for a, b in zip(res.model.weights, init.weights))


def test_train_bit_reproducible():
    data = _linear_dataset(n=2)
    cfg = ModelConfig(5, 2, (8, 8), seed=5, tile_size=8)
    a = train(cfg, data, epochs=5).model
    b = train(cfg, data, epochs=5).model
    assert np.array_equal(a.flat(), b.flat())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_errors():
    with pytest.raises(ValueError):
        train(ModelConfig(5, 2), [], epochs=1)
    data = _linear_dataset(n=1)
    data[0] = (data[0][0], data[0][1] * np.inf)
    with pytest.raises(TrainingError, match="epoch 0"):
        train(ModelConfig(5, 2, (4,), tile_size=8), data, epochs=2)


@pytest.mark.parametrize("kind", LOSSES)
def test_every_loss_trains(kind):
    data = _linear_dataset(n=2)
    cfg = ModelConfig(5, 2, (16,), seed=1, tile_size=8, loss=kind)
    res = train(cfg, data, epochs=30)
    assert res.trace[-1] < res.trace[0]


def _globe_dataset(n=2, n_lat=19, n_lon=12, seed=13):
    grid = make_grid(n_lat, n_lon, 90, -180 / (n_lat - 1), 0, 360 / n_lon)
    lat2d, _ = grid.mesh()
    rng = np.random.default_rng(seed)
    data = []
    for _ in range(n):
        x = np.concatenate([lat2d[None], rng.standard_normal((2, n_lat, n_lon))])
        gain = np.where(np.abs(lat2d) <= 30, 0.2, 1.5)
        data.append((x, (gain * x[1] + 0.1 * x[2])[None]))
    return data


def test_region_split_blend_weights():
    s = RegionSplit((-30.0, 30.0), 5.0)
    lat = np.linspace(-90, 90, 3601)
    w = s.weights(lat)
    np.testing.assert_allclose(w.sum(axis=0), 1.0)
    assert np.all(w >= 0)
    assert w[0, lat > 32.5].min() == 1.0 and w[1, np.abs(lat) < 27.5].min() == 1.0
    assert w[2, lat < -32.5].min() == 1.0
    assert np.max(np.abs(np.diff(w, axis=1))) <= 0.05 / 5 + 1e-12


def test_tri_region_returns_three_models_and_saves(tmp_path):
    data = _globe_dataset()
    cfg = ModelConfig(3, 1, (8,), regime="tri_region", tile_size=8, seed=2)
    res = train(cfg, data, epochs=3)
    assert isinstance(res.model, RegionModels) and len(res.model.models) == 3
    assert len(res.trace) == 3
    save_model(res.model, tmp_path / "m.fld")
    back = load_model(tmp_path / "m.fld")
    np.testing.assert_array_equal(predict(back, data[0][0]), predict(res.model, data[0][0]))


def test_lat_weighted_regime_trains():
    data = _globe_dataset()
    cfg = ModelConfig(3, 1, (8,), regime="lat_weighted", tile_size=8, seed=2)
    assert cfg.weighted_loss
    res = train(cfg, data, epochs=10)
    assert res.trace[-1] < res.trace[0]


def test_postprocess_subtracts_prediction():
    p = _random_model(14, n_in=6, n_out=2)
    grid = make_grid(3, 4, 60, -60, 0, 90)
    fc = FieldSet(generic_manifest(2, grid), "2021-01-01T00:00Z", np.random.default_rng(15).standard_normal((2, 3, 4)))
    x = np.random.default_rng(16).standard_normal((6, 3, 4))
    out = postprocess(p, fc, x)
    np.testing.assert_allclose(out.values, fc.values - forward(p, x))
    p.weights = [np.zeros_like(w) for w in p.weights]
    p.biases = [np.zeros_like(b) for b in p.biases]
    assert np.array_equal(postprocess(p, fc, x).values, fc.values)


def test_model_checkpoint_roundtrip(tmp_path):
    p = _random_model(17)
    save_model(p, tmp_path / "m.fld")
    q = load_model(tmp_path / "m.fld")
    assert np.array_equal(p.flat(), q.flat())
    assert np.array_equal(p.in_std, q.in_std)
    assert q.config == p.config
