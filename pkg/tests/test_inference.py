import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from dfdi.dynamics import FaultProfile, Trajectory
from dfdi.errors import ConfigError, DimensionError
from dfdi.flowmatch import FlowModel, nll_loss
from dfdi.inference import (
    InferenceConfig,
    classify_fault,
    estimate_fault,
    scoring_features,
    trajectory_nll,
)


def random_traj(n_times=40, seed=0):
    rng = np.random.default_rng(seed)
    states = np.cumsum(0.01 * rng.standard_normal((n_times, 10)), axis=0)
    return Trajectory(np.arange(n_times) * 0.1, states, FaultProfile.nominal(), seed)


def film_model(cond_dim, seed=0):
    m = FlowModel(cond_dim, (16, 16), seed=seed)
    rng = np.random.default_rng(seed + 7)
    for i in range(2):
        m.params[f"Wg{i}"] = 0.3 * rng.standard_normal(m.params[f"Wg{i}"].shape)
        m.params[f"Wb{i}"] = 0.3 * rng.standard_normal(m.params[f"Wb{i}"].shape)
    m.out_scale = np.full(10, 0.01)
    return m


@pytest.fixture
def model8():
    return film_model(8)


def test_nll_deterministic(model8):
    tr = random_traj()
    c = np.linspace(0.1, 0.9, 8)
    assert trajectory_nll(model8, tr, c) == trajectory_nll(model8, tr, c)


def test_nll_single_transition(model8):
    tr = random_traj(n_times=2)
    feats, target = scoring_features(model8, tr, np.ones(8))
    assert feats.shape[0] == 1
    mu, ls = model8.forward(feats)
    assert trajectory_nll(model8, tr, np.ones(8)) == pytest.approx(float(nll_loss(mu, ls, target)[0]), rel=1e-14)


def test_nll_additive_over_segments(model8):
    tr = random_traj(n_times=60)
    c = np.full(8, 0.5)
    feats, target = scoring_features(model8, tr, c)
    mu, ls = model8.forward(feats)
    per = nll_loss(mu, ls, target)
    k = 23
    assert per[:k].sum() + per[k:].sum() == pytest.approx(trajectory_nll(model8, tr, c), rel=1e-12)


def test_nll_rejects_wrong_conditioning(model8):
    with pytest.raises(DimensionError):
        trajectory_nll(model8, random_traj(), np.ones(11))


def test_classify_basic(model8):
    tr = random_traj()
    assert classify_fault(model8, tr, [np.ones(8)])[0] == 0
    with pytest.raises(ConfigError):
        classify_fault(model8, tr, [])
    c = np.full(8, 0.3)
    idx, nlls = classify_fault(model8, tr, [np.ones(8), c, c])
    if idx != 0:
        assert idx == 1 and nlls[1] == nlls[2]


def test_classify_tie_returns_first(model8):
    tr = random_traj()
    c = np.full(8, 0.3)
    idx, nlls = classify_fault(model8, tr, [c, c, c])
    assert idx == 0 and nlls[0] == nlls[1] == nlls[2]


def test_classify_permutation_invariant(model8):
    tr = random_traj(seed=3)
    rng = np.random.default_rng(0)
    cands = [rng.uniform(0, 1, 8) for _ in range(6)]
    idx, _ = classify_fault(model8, tr, cands)
    perm = rng.permutation(6)
    idx_p, _ = classify_fault(model8, tr, [cands[i] for i in perm])
    assert perm[idx_p] == idx


@pytest.mark.parametrize("scenario,cond_dim", [("type1", 8), ("type2", 11)])
def test_estimates_are_projected(scenario, cond_dim):
    m = film_model(cond_dim)
    est = estimate_fault(m, random_traj(), scenario, InferenceConfig(lr=0.2), iters=40)
    assert np.all((est.conditioning >= 0) & (est.conditioning <= 1))
    assert len(est.loss_trace) == 41
    if scenario == "type1":
        assert est.onset.shape == (4,) and est.gamma is None
    else:
        assert est.gamma.shape == (7,) and est.onset is None


def test_estimate_deterministic(model8):
    tr = random_traj()
    a = estimate_fault(model8, tr, "type1", iters=20)
    b = estimate_fault(model8, tr, "type1", iters=20)
    np.testing.assert_array_equal(a.conditioning, b.conditioning)
    assert a.loss_trace == b.loss_trace


def test_estimate_scenario_checks(model8):
    with pytest.raises(DimensionError):
        estimate_fault(model8, random_traj(), "type2", iters=1)
    with pytest.raises(ConfigError):
        estimate_fault(model8, random_traj(), "nominal", iters=1)


def test_dead_conditioning_path_is_stationary():
    """With reg 0 and a model that ignores c, the start point is already optimal."""
    m = FlowModel(8, (16, 16), seed=1)
    m.params["W0"][m.cond_slice()] = 0.0
    cfg = InferenceConfig(reg_weight=0.0)
    est = estimate_fault(m, random_traj(), "type1", cfg, iters=30)
    np.testing.assert_array_equal(est.eta, np.full(4, cfg.init_eta_type1))
    assert est.grad_norm < 1e-6


def test_regularizer_pulls_unidentified_entries_to_one():
    m = FlowModel(8, (16, 16), seed=1)
    m.params["W0"][m.cond_slice()] = 0.0
    est = estimate_fault(m, random_traj(), "type1", InferenceConfig(reg_weight=1.0, lr=0.05), iters=300)
    np.testing.assert_allclose(est.eta, 1.0, atol=1e-3)


def test_converges_to_one_dimensional_minimizer():
    """Only c_0 enters the model; the Adam estimate matches a scalar line search."""
    m = film_model(8, seed=2)
    cs = m.cond_slice()
    for i in range(2):
        m.params[f"Wg{i}"][1:] = 0.0
        m.params[f"Wb{i}"][1:] = 0.0
    m.params["W0"][cs] = 0.0
    tr = random_traj(seed=5)
    cfg = InferenceConfig(reg_weight=0.01, lr=5e-3)
    est = estimate_fault(m, tr, "type1", cfg, iters=2000)

    def objective(e):
        c = np.concatenate([[e], est.conditioning[1:]])
        return trajectory_nll(m, tr, c) + 0.01 * float(np.sum((1 - c[:4]) ** 2))

    ref = minimize_scalar(objective, bounds=(0.0, 1.0), method="bounded", options={"xatol": 1e-8})
    assert est.eta[0] == pytest.approx(ref.x, abs=5e-3)
    assert 0.05 < est.eta[0] < 0.95 and est.grad_norm < 1e-6


def test_config_validation():
    with pytest.raises(ConfigError):
        InferenceConfig(iters_type1=0)
    with pytest.raises(ConfigError):
        InferenceConfig(init_gamma=1.5)
    with pytest.raises(ConfigError):
        InferenceConfig(reg_weight=-0.1)
