import math

import numpy as np
import pytest

from dfdi.dynamics import SpacecraftParams
from dfdi.errors import ConfigError, DimensionError, HeaderError
from dfdi.faultgen import DatasetConfig, generate_dataset
from dfdi.flowmatch import (
    Adam,
    FlowModel,
    TrainConfig,
    build_features,
    feature_dim,
    gradients,
    load_checkpoint,
    model_for_scenario,
    nll_and_cond_grad,
    nll_loss,
    sample_bridge,
    save_checkpoint,
    total_loss,
    train,
)

N = 10


def toy_model(cond_dim=3, seed=0, hidden=(16, 16)):
    """Small model with every weight, normalization and FiLM path active."""
    m = FlowModel(cond_dim, hidden, memory=2, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for k, v in m.params.items():
        m.params[k] = v + 0.3 * rng.standard_normal(v.shape)
    m.in_shift = 0.1 * rng.standard_normal(m.input_dim)
    m.in_scale = rng.uniform(0.5, 2.0, m.input_dim)
    m.out_shift = 0.01 * rng.standard_normal(N)
    m.out_scale = rng.uniform(0.05, 0.2, N)
    m.bridge_sigma = 0.1
    return m


def toy_batch(model, b=6, seed=1):
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((b, model.input_dim))
    feats[:, 0] = rng.uniform(0, 1, b)
    feats[:, 1] = rng.uniform(0.05, 0.95, b)
    x_next = feats[:, 2 : 2 + N] + 0.1 * rng.standard_normal((b, N))
    return feats, x_next


def test_bridge_endpoints(rng):
    a, b = rng.standard_normal((2, N))
    np.testing.assert_array_equal(sample_bridge(a, b, 0.0, 0.03, rng).x_tau, a)
    np.testing.assert_array_equal(sample_bridge(a, b, 1.0, 0.03, rng).x_tau, b)
    with pytest.raises(ConfigError):
        sample_bridge(a, b, 1.5, 0.03, rng)


def test_bridge_midpoint_variance(rng):
    a, b = np.zeros(N), np.ones(N)
    draws = np.array([sample_bridge(a, b, 0.5, 0.03, rng).x_tau for _ in range(10_000)])
    np.testing.assert_allclose(draws.mean(axis=0), 0.5, atol=1e-3)
    np.testing.assert_allclose(draws.var(axis=0, ddof=1), 0.03**2 / 4, rtol=0.05)


@pytest.mark.parametrize("cond_dim,length", [(8, 60), (11, 63)])
def test_feature_length(cond_dim, length, rng):
    assert feature_dim(cond_dim) == length
    states = rng.standard_normal((5, N))
    f = build_features(states, 3, states[3], np.zeros(cond_dim), 10.0, np.arange(5) * 0.5)
    assert f.shape == (length,)


def test_feature_layout_and_padding(rng):
    states = rng.standard_normal((5, N))
    times = np.arange(5) * 0.5
    c = np.arange(8.0)
    br = sample_bridge(states[0], states[1], 0.25, 0.03, rng)
    f = build_features(states, 0, br, c, 10.0, times)
    assert f[0] == 0.0 and f[1] == 0.25
    np.testing.assert_array_equal(f[2:12], br.x_tau)
    for j in range(4):
        np.testing.assert_array_equal(f[12 + 10 * j : 22 + 10 * j], states[0])
    np.testing.assert_array_equal(f[-8:], c)
    f3 = build_features(states, 3, br, c, 10.0, times)
    assert f3[0] == pytest.approx(1.5 / 10.0)
    np.testing.assert_array_equal(f3[12:22], states[2])
    np.testing.assert_array_equal(f3[42:52], states[0])
    with pytest.raises(DimensionError):
        build_features(states, 0, br, np.zeros(3), 10.0, times, cond_dim=8)


def test_nll_examples():
    assert nll_loss(np.zeros(3), np.zeros(3), np.zeros(3)) == 0.0
    assert nll_loss(np.zeros(1), np.zeros(1), np.ones(1)) == pytest.approx(0.5)
    val = nll_loss(np.zeros(1), np.array([0.5 * math.log(4)]), np.array([2.0]))
    assert val == pytest.approx(0.5 + math.log(2), abs=1e-14)


def test_total_loss_arithmetic():
    """lambda 0.1, squared residual 2, NLL 1 -> 1.2 through an output-only model."""
    m = FlowModel(1, (4,), memory=1, state_dim=2)
    for k in m.params:
        m.params[k][...] = 0.0
    feats = np.zeros((1, m.input_dim))
    # log sigma = 0; residual (1, 1): NLL = 0.5 * 2 = 1, squared error 2
    x_next = np.ones((1, 2))
    assert total_loss(m, feats, x_next, TrainConfig(lambda_mse=0.1)) == pytest.approx(1.2, abs=1e-14)
    assert total_loss(m, feats, x_next, TrainConfig(lambda_mse=0.0)) == pytest.approx(1.0, abs=1e-14)
    assert total_loss(m, feats, np.zeros((1, 2)), TrainConfig(lambda_mse=0.1)) == 0.0
    with pytest.raises(ConfigError):
        total_loss(m, feats[:0], x_next[:0], TrainConfig())


def test_zero_film_is_unconditioned_mlp(rng):
    m = FlowModel(3, (16, 16), memory=2, seed=3)
    feats, _ = toy_batch(m)
    other = feats.copy()
    other[:, m.cond_slice()] = 0.0
    bare = m.copy()
    # remove c from the direct feature path: only the FiLM path remains, which is zero
    bare.params["W0"][m.cond_slice()] = 0.0
    np.testing.assert_array_equal(bare.forward(feats)[0], bare.forward(other)[0])
    _, _, dc = gradients(bare, feats, feats[:, 2:12], TrainConfig())
    assert np.all(dc == 0)


def test_batch_equals_rows():
    m = toy_model()
    feats, _ = toy_batch(m, b=5)
    mu, ls = m.forward(feats)
    for i in range(5):
        mi, li = m.forward(feats[i])
        np.testing.assert_allclose(mi[0], mu[i], rtol=1e-14)
        np.testing.assert_allclose(li[0], ls[i], rtol=1e-14)


def test_forward_rejects_wrong_length():
    m = toy_model()
    with pytest.raises(DimensionError):
        m.forward(np.zeros((2, m.input_dim + 1)))


def _rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300)


def test_gradients_match_finite_differences():
    """Central differences in extended precision (h = 1e-6) against reverse mode."""
    m = toy_model()
    m.params = {k: v.astype(np.longdouble) for k, v in m.params.items()}
    feats, x_next = toy_batch(m)
    feats = feats.astype(np.longdouble)
    cfg = TrainConfig(lambda_mse=0.1)
    _, grads, dc = gradients(m, feats, x_next, cfg)
    h = 1e-6
    for name in m.param_names():
        p = m.params[name]
        fd = np.zeros(p.shape)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = total_loss(m, feats, x_next, cfg)
            p[idx] = old - h
            down = total_loss(m, feats, x_next, cfg)
            p[idx] = old
            fd[idx] = (up - down) / (2 * h)
        assert _rel_err(np.asarray(grads[name], dtype=float), fd) < 1e-5, name
    # conditioning entries, per row (loss is a batch mean)
    cs = m.cond_slice()
    fd_c = np.zeros(dc.shape)
    for i in range(feats.shape[0]):
        for j in range(m.cond_dim):
            col = cs.start + j
            old = feats[i, col]
            feats[i, col] = old + h
            up = total_loss(m, feats, x_next, cfg)
            feats[i, col] = old - h
            down = total_loss(m, feats, x_next, cfg)
            feats[i, col] = old
            fd_c[i, j] = (up - down) / (2 * h)
    assert _rel_err(np.asarray(dc, dtype=float), fd_c) < 1e-5


def test_nll_cond_grad_matches_finite_differences():
    m = toy_model()
    feats, x_next = toy_batch(m, b=8)
    c = np.array([0.2, -0.4, 0.7])
    feats[:, m.cond_slice()] = c

    def f(cv):
        z = feats.copy()
        z[:, m.cond_slice()] = cv
        return nll_and_cond_grad(m, z, x_next)[0]

    _, g = nll_and_cond_grad(m, feats, x_next)
    fd = np.array([(f(c + 1e-6 * e) - f(c - 1e-6 * e)) / 2e-6 for e in np.eye(3)])
    np.testing.assert_allclose(g, fd, rtol=1e-5)


def test_duplicated_batch_keeps_mean_gradient():
    m = toy_model()
    feats, x_next = toy_batch(m)
    cfg = TrainConfig()
    _, g1, _ = gradients(m, feats, x_next, cfg)
    _, g2, _ = gradients(m, np.vstack([feats, feats]), np.vstack([x_next, x_next]), cfg)
    for k in g1:
        np.testing.assert_allclose(g2[k], g1[k], rtol=0, atol=1e-12 * max(1.0, np.abs(g1[k]).max()))


def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    opt = Adam(p, lr=0.1)
    for _ in range(3):
        opt.step(p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_size():
    p = {"w": np.array([1.0, -2.0])}
    Adam(p, lr=0.1).step(p, {"w": np.array([3.0, -0.5])})
    np.testing.assert_allclose(p["w"], [0.9, -1.9], atol=1e-7)


@pytest.fixture(scope="module")
def toy_data():
    params = SpacecraftParams(dt=0.05, horizon=2.0)
    cfg = DatasetConfig(n_train=10, n_val=2, scenario="type1", onset_range=(0.3, 1.5), base_seed=2)
    ds = generate_dataset(cfg, params)
    return ds.train_split(), ds.val_split()


def test_training_descends_and_is_deterministic(toy_data):
    tr, val = toy_data
    cfg = TrainConfig(epochs=2, batch=64, seed=5)
    runs = [train(model_for_scenario("type1", seed=1, hidden_dims=(32, 32)), tr, cfg, val) for _ in range(2)]
    (m1, h1), (m2, h2) = runs
    assert h1.train_loss[-1] < h1.initial_train_loss
    assert h1.train_loss == h2.train_loss and h1.val_loss == h2.val_loss
    for k in m1.param_names():
        np.testing.assert_array_equal(m1.params[k], m2.params[k])
    assert h1.to_csv().startswith("epoch,train_loss,val_loss\n1,")


def test_trained_film_is_conditioning_sensitive(toy_data):
    tr, _ = toy_data
    m, _ = train(model_for_scenario("type1", seed=1, hidden_dims=(32, 32)), tr, TrainConfig(epochs=1, batch=64))
    f = np.zeros((1, m.input_dim))
    f[0, 2:12] = tr.trajectories[0].states[5]
    a, b = f.copy(), f.copy()
    a[0, m.cond_slice()] = [1, 1, 1, 1, 0.2, 0.3, 0.4, 0.5]
    b[0, m.cond_slice()] = [0.1, 0.5, 0.9, 0.3, 0.2, 0.3, 0.4, 0.5]
    assert not np.array_equal(m.forward(a)[0], m.forward(b)[0])


def test_train_rejects_wrong_scenario(toy_data):
    tr, _ = toy_data
    with pytest.raises(DimensionError):
        train(model_for_scenario("type2", hidden_dims=(8,)), tr, TrainConfig(epochs=1))


def test_checkpoint_round_trip(tmp_path):
    m = toy_model()
    m.scenario = "type1"
    save_checkpoint(m, tmp_path / "m.ckpt", extra={"note": 1})
    back, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert extra == {"note": 1}
    assert back.bridge_sigma == m.bridge_sigma and back.hidden_dims == m.hidden_dims
    for k in m.param_names():
        np.testing.assert_array_equal(back.params[k], m.params[k])
    feats, _ = toy_batch(m)
    np.testing.assert_array_equal(back.forward(feats)[0], m.forward(feats)[0])
    save_checkpoint(back, tmp_path / "m2.ckpt", extra={"note": 1})
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(HeaderError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(lambda_mse=-1.0)
