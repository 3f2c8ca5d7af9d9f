import numpy as np
import pytest

from dfdi.dynamics import FaultProfile, SpacecraftParams, default_initial_state, simulate_trajectory
from dfdi.errors import ConfigError, DimensionError, NumericalError
from dfdi.ekf import (
    EkfConfig,
    EkfState,
    SpacecraftFilterModel,
    ekf_predict,
    ekf_update,
    numerical_jacobian,
    run_ekf,
    run_ekf_on_trajectory,
)

# dyadic matrices and a power-of-two step make the difference quotients exact
A = np.array([[1.0, 0.125, 0.0], [-0.0625, 0.875, 0.25], [0.0, -0.125, 0.75]])
H = np.array([[1.0, 0.0, 0.5], [0.0, 1.0, -0.25]])
H_STEP = 2.0**-20


def linear_state(mean, cov, q=0.0, r=1e-2):
    return EkfState(np.array(mean, dtype=float), np.array(cov, dtype=float), q * np.eye(3), r * np.eye(2))


def lin_transition(z, t):
    return A @ z


def lin_measurement(z):
    return H @ z, H


def test_predict_matches_linear_propagation(rng):
    m = np.array([1.0, -2.0, 0.5])
    b = rng.standard_normal((3, 3))
    p = b @ b.T + np.eye(3)
    s = ekf_predict(linear_state(m, p), 0.0, lin_transition, H_STEP)
    np.testing.assert_allclose(s.mean, A @ m, rtol=0, atol=1e-10)
    np.testing.assert_allclose(s.cov, A @ p @ A.T, rtol=0, atol=1e-10)
    assert np.max(np.abs(s.cov - s.cov.T)) == 0.0


def test_jacobian_central_difference():
    def f(z, t):
        return np.array([np.sin(z[0]) * z[1], z[1] ** 2])

    z = np.array([0.3, -1.1])
    exact = np.array([[np.cos(0.3) * -1.1, np.sin(0.3)], [0.0, -2.2]])
    np.testing.assert_allclose(numerical_jacobian(f, z, 0.0), exact, atol=1e-8)


def test_augmented_filter_equals_kalman_filter(rng):
    """Known faults, linear Gaussian system: the augmented EKF is a plain KF."""
    q, r = 1e-3, 1e-2
    x = np.array([1.0, 0.0, -1.0])
    ys = []
    for _ in range(50):
        x = A @ x + np.sqrt(q) * rng.standard_normal(3)
        ys.append(H @ x + np.sqrt(r) * rng.standard_normal(2))
    s = linear_state(np.zeros(3), np.eye(3), q, r)
    m_kf, p_kf = np.zeros(3), np.eye(3)
    for y in ys:
        s = ekf_update(ekf_predict(s, 0.0, lin_transition, H_STEP), y, lin_measurement)
        m_kf, p_kf = A @ m_kf, A @ p_kf @ A.T + q * np.eye(3)
        k = p_kf @ H.T @ np.linalg.inv(H @ p_kf @ H.T + r * np.eye(2))
        m_kf = m_kf + k @ (y - H @ m_kf)
        p_kf = (np.eye(3) - k @ H) @ p_kf
        np.testing.assert_allclose(s.mean, m_kf, rtol=0, atol=1e-10)
        np.testing.assert_allclose(s.cov, p_kf, rtol=0, atol=1e-10)


def test_uninformative_measurement_keeps_state():
    s = linear_state([1.0, 2.0, 3.0], np.eye(3), r=1e12)
    out = ekf_update(s, np.array([100.0, -50.0]), lin_measurement)
    np.testing.assert_allclose(out.mean, s.mean, atol=1e-6)


def test_update_clamps_fault_entries():
    def meas(z):
        return z[:1].copy(), np.array([[1.0, 0.0]])

    s = EkfState(np.array([0.5, 0.9]), np.array([[1.0, 0.9], [0.9, 1.0]]), np.zeros((2, 2)), np.eye(1) * 1e-4, 1)
    assert ekf_update(s, np.array([5.0]), meas).mean[1] == 1.0
    assert ekf_update(s, np.array([-5.0]), meas).mean[1] == 0.0


def test_predict_keeps_fault_mean_and_rejects_non_pd():
    def f(z, t):
        return np.array([2.0 * z[0], z[1] + 0.3])

    s = EkfState(np.array([1.0, 0.7]), np.eye(2), np.zeros((2, 2)), np.eye(1), 1)
    assert ekf_predict(s, 0.0, f).mean[1] == 0.7
    with pytest.raises(NumericalError):
        ekf_predict(s, 0.0, lambda z, t: np.zeros(2))


def test_measurement_jacobian_is_exact_derivative(rng):
    model = SpacecraftFilterModel(SpacecraftParams(), "type2")
    z = np.concatenate([rng.standard_normal(10), rng.uniform(0.2, 0.9, 11)])
    _, h = model.measurement(z)
    fd = np.stack(
        [(model.measurement(z + 1e-6 * e)[0] - model.measurement(z - 1e-6 * e)[0]) / 2e-6 for e in np.eye(21)], axis=1
    )
    np.testing.assert_allclose(h, fd, atol=1e-8)


def test_empty_and_malformed_sequences():
    p = SpacecraftParams()
    with pytest.raises(ConfigError):
        run_ekf(np.zeros((0, 7)), np.zeros(0), p, "type1", noise_std=0.001)
    with pytest.raises(DimensionError):
        run_ekf(np.zeros((3, 6)), np.arange(3) * 0.02, p, "type1", noise_std=0.001)
    with pytest.raises(ConfigError):
        run_ekf(np.zeros((3, 7)), np.arange(3) * 0.02, p, "type1")
    with pytest.raises(ConfigError):
        SpacecraftFilterModel(p, "nominal")


@pytest.fixture(scope="module")
def short_run_params():
    return SpacecraftParams(dt=0.05, horizon=10.0)


def test_nominal_noise_free_stays_nominal(short_run_params):
    p = short_run_params
    x0 = default_initial_state(p)
    tr = simulate_trajectory(x0, FaultProfile.nominal(), p, 0.0, 0, 0.0)
    res = run_ekf(tr.measurements, tr.times, p, "type1", EkfConfig(noise_std=0.0015), x0=x0)
    assert np.all(np.abs(res.fault_mean - 1.0) <= 0.02)


@pytest.mark.parametrize("scenario", ["type1", "type2"])
def test_covariance_stays_pd_and_run_is_deterministic(short_run_params, scenario):
    p = short_run_params
    prof = (
        FaultProfile.type1([0.3, 0.9, 0.6, 1.0], [2.0, 4.0, 6.0, 8.0])
        if scenario == "type1"
        else FaultProfile.type2([0.5, 1.0, 0.8, 1.0], [1.0, 0.7, 1.0, 1.0, 1.0, 0.6, 1.0])
    )
    tr = simulate_trajectory(default_initial_state(p), prof, p, 0.0015, 3, 0.0015)
    a = run_ekf_on_trajectory(tr, p, scenario)
    b = run_ekf_on_trajectory(tr, p, scenario)
    np.testing.assert_array_equal(a.fault_mean, b.fault_mean)
    assert np.all(np.linalg.eigvalsh(a.fault_cov) > 0)
    assert np.all((a.fault_mean >= 0) & (a.fault_mean <= 1))
    assert a.eta.shape == (4,)
    assert (a.gamma is None) == (scenario == "type1")


def test_config_validation():
    with pytest.raises(ConfigError):
        EkfConfig(p0_fault=0.0)
    with pytest.raises(ConfigError):
        EkfConfig(init_fault=2.0)
