"""Augmented extended Kalman filter baseline.

The fault parameters (eta for Type 1, eta || gamma for Type 2) are appended
to the 10-dimensional state and follow a random walk. The prediction Jacobian
is taken by central finite differences of the one-step map; the measurement
Jacobian is analytic.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Any, Callable

import numpy as np

from .dynamics import (
    N_SENSORS,
    N_WHEELS,
    STATE_DIM,
    THETA,
    WHEELS,
    FaultKind,
    SpacecraftParams,
    Trajectory,
    effectiveness_drift,
)
from .errors import ConfigError, DimensionError, NumericalError

N_FAULT = {FaultKind.TYPE1: N_WHEELS, FaultKind.TYPE2: N_WHEELS + N_SENSORS}


@dataclass
class EkfConfig:
    """Baseline tuning. ``noise_std`` None means: take R from the trajectory."""

    q_state: float = 1e-6
    q_fault: float = 1e-5
    p0_state: float = 1e-2
    p0_fault: float = 0.25
    init_fault: float = 1.0
    fd_step: float = 1e-6
    window: float = 5.0
    noise_std: float | None = None
    # feed the logged angle readings to the controller model instead of the estimate
    use_logged_inputs: bool = False

    def __post_init__(self) -> None:
        if min(self.q_state, self.q_fault) < 0 or min(self.p0_state, self.p0_fault) <= 0:
            raise ConfigError("noise intensities must be >= 0 and initial variances > 0")
        if self.fd_step <= 0 or self.window <= 0:
            raise ConfigError("fd_step and window must be positive")
        if not 0 <= self.init_fault <= 1:
            raise ConfigError("init_fault must lie in [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class EkfState:
    mean: np.ndarray
    cov: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    n_fault: int = 0

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        n = len(self.mean)
        if self.cov.shape != (n, n) or np.asarray(self.Q).shape != (n, n):
            raise DimensionError("covariance and Q must be square and match the mean")

    @property
    def fault_slice(self) -> slice:
        return slice(len(self.mean) - self.n_fault, len(self.mean))

    def copy(self) -> "EkfState":
        return EkfState(self.mean.copy(), self.cov.copy(), self.Q, self.R, self.n_fault)


Transition = Callable[[np.ndarray, float], np.ndarray]
Measurement = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


def _symmetrize_checked(p: np.ndarray, what: str) -> np.ndarray:
    p = 0.5 * (p + p.T)
    try:
        np.linalg.cholesky(p)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"covariance not positive definite after {what}") from exc
    return p


def numerical_jacobian(fn: Transition, z: np.ndarray, t: float, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``fn(., t)`` at z."""
    n = len(z)
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        cols.append((fn(z + e, t) - fn(z - e, t)) / (2 * h))
    return np.stack(cols, axis=1)


def ekf_predict(s: EkfState, t: float, transition: Transition, fd_step: float = 1e-6) -> EkfState:
    """Propagate mean through ``transition`` and covariance through its Jacobian."""
    f = numerical_jacobian(transition, s.mean, t, fd_step)
    mean = transition(s.mean, t)
    if s.n_fault:
        mean[s.fault_slice] = s.mean[s.fault_slice]  # random walk keeps the mean
    cov = _symmetrize_checked(f @ s.cov @ f.T + s.Q, "predict")
    return EkfState(mean, cov, s.Q, s.R, s.n_fault)


def ekf_update(s: EkfState, y_obs: np.ndarray, measurement: Measurement) -> EkfState:
    """Joseph-form measurement update; fault entries are clamped to [0, 1]."""
    y_pred, h = measurement(s.mean)
    innov = np.asarray(y_obs, dtype=float) - y_pred
    s_mat = h @ s.cov @ h.T + s.R
    try:
        gain = np.linalg.solve(s_mat.T, h @ s.cov.T).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError("innovation covariance is singular") from exc
    mean = s.mean + gain @ innov
    ikh = np.eye(len(mean)) - gain @ h
    cov = ikh @ s.cov @ ikh.T + gain @ s.R @ gain.T
    if s.n_fault:
        sl = s.fault_slice
        mean[sl] = np.clip(mean[sl], 0.0, 1.0)
    return EkfState(mean, _symmetrize_checked(cov, "update"), s.Q, s.R, s.n_fault)


class SpacecraftFilterModel:
    """One-step map and measurement model of the augmented spacecraft state."""

    def __init__(self, params: SpacecraftParams, scenario: FaultKind | str) -> None:
        self.params = params
        self.scenario = FaultKind(scenario)
        if self.scenario not in N_FAULT:
            raise ConfigError("the EKF baseline needs a type1 or type2 scenario")
        self.n_fault = N_FAULT[self.scenario]
        self.y_theta: np.ndarray | None = None  # logged controller input, if used

    def _gamma(self, z: np.ndarray) -> np.ndarray:
        if self.scenario is FaultKind.TYPE2:
            return z[STATE_DIM + N_WHEELS :]
        return np.ones(N_SENSORS)

    def transition(self, z: np.ndarray, t: float) -> np.ndarray:
        x = z[:STATE_DIM]
        eta = z[STATE_DIM : STATE_DIM + N_WHEELS]
        y_theta = self._gamma(z)[:3] * x[THETA] if self.y_theta is None else self.y_theta
        dx, _ = effectiveness_drift(x, t, eta, self.params, y_theta)
        out = z.copy()
        out[:STATE_DIM] = x + dx * self.params.dt
        return out

    def measurement(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = z[:STATE_DIM]
        g = self._gamma(z)
        y = np.concatenate([g[:3] * x[THETA], g[3:] * x[WHEELS]])
        h = np.zeros((N_SENSORS, len(z)))
        h[0:3, THETA] = np.diag(g[:3])
        h[3:7, WHEELS] = np.diag(g[3:])
        if self.scenario is FaultKind.TYPE2:
            gcols = STATE_DIM + N_WHEELS + np.arange(N_SENSORS)
            h[np.arange(3), gcols[:3]] = x[THETA]
            h[3 + np.arange(4), gcols[3:]] = x[WHEELS]
        return y, h


@dataclass
class EkfResult:
    times: np.ndarray
    fault_mean: np.ndarray  # (N+1, q) filtered estimates
    fault_cov: np.ndarray  # (N+1, q, q)
    state_mean: np.ndarray  # (N+1, 10)
    final: np.ndarray  # window mean of fault estimates
    scenario: FaultKind
    wall_time: float = 0.0

    @property
    def eta(self) -> np.ndarray:
        return self.final[:N_WHEELS]

    @property
    def gamma(self) -> np.ndarray | None:
        return self.final[N_WHEELS:] if self.scenario is FaultKind.TYPE2 else None

    def to_dict(self) -> dict[str, Any]:
        return {
            "method": "ekf",
            "eta": self.eta.tolist(),
            "gamma": None if self.gamma is None else self.gamma.tolist(),
            "wall_time": self.wall_time,
        }


def initial_state(x0: np.ndarray, n_fault: int, noise_std: float, config: EkfConfig) -> EkfState:
    mean = np.concatenate([np.asarray(x0, dtype=float), np.full(n_fault, config.init_fault)])
    p_diag = np.concatenate([np.full(STATE_DIM, config.p0_state), np.full(n_fault, config.p0_fault)])
    q_diag = np.concatenate([np.full(STATE_DIM, config.q_state), np.full(n_fault, config.q_fault)])
    r = max(noise_std, 1e-9) ** 2 * np.eye(N_SENSORS)
    return EkfState(mean, np.diag(p_diag), np.diag(q_diag), r, n_fault)


def run_ekf(
    measurements: np.ndarray,
    times: np.ndarray,
    params: SpacecraftParams,
    scenario: FaultKind | str,
    config: EkfConfig | None = None,
    noise_std: float | None = None,
    x0: np.ndarray | None = None,
) -> EkfResult:
    """Filter a measurement sequence (one 7-vector per grid time).

    The state mean starts from the first reading (angles as read, rates zero,
    wheel speeds as read) unless ``x0`` is given. The reported estimate is
    the mean over the final ``config.window`` seconds.
    """
    config = config or EkfConfig()
    y = np.atleast_2d(np.asarray(measurements, dtype=float))
    times = np.asarray(times, dtype=float)
    if y.size == 0 or len(times) == 0:
        raise ConfigError("empty measurement sequence")
    if y.shape[1] != N_SENSORS or len(times) != len(y):
        raise DimensionError(f"measurements must be ({len(times)}, {N_SENSORS}), got {y.shape}")
    std = config.noise_std if config.noise_std is not None else noise_std
    if std is None:
        raise ConfigError("measurement noise std unknown: set it in the config or pass noise_std")
    model = SpacecraftFilterModel(params, scenario)
    if x0 is None:
        x0 = np.zeros(STATE_DIM)
        x0[THETA] = y[0, :3]
        x0[WHEELS] = y[0, 3:]
    start = time.perf_counter()
    s = initial_state(x0, model.n_fault, std, config)
    n = len(y)
    fault_mean = np.empty((n, model.n_fault))
    fault_cov = np.empty((n, model.n_fault, model.n_fault))
    state_mean = np.empty((n, STATE_DIM))
    for k in range(n):
        try:
            s = ekf_update(s, y[k], model.measurement)
            fault_mean[k] = s.mean[s.fault_slice]
            fault_cov[k] = s.cov[s.fault_slice, s.fault_slice]
            state_mean[k] = s.mean[:STATE_DIM]
            if k + 1 < n:
                model.y_theta = y[k, :3] if config.use_logged_inputs else None
                s = ekf_predict(s, float(times[k]), model.transition, config.fd_step)
        except NumericalError as exc:
            raise NumericalError(f"EKF failed at step {k} (t={times[k]:.4g}): {exc}") from exc
    in_window = times >= times[-1] - config.window
    final = fault_mean[in_window].mean(axis=0)
    return EkfResult(times, fault_mean, fault_cov, state_mean, final, FaultKind(scenario), time.perf_counter() - start)


def run_ekf_on_trajectory(
    traj: Trajectory, params: SpacecraftParams, scenario: FaultKind | str, config: EkfConfig | None = None
) -> EkfResult:
    if traj.measurements is None:
        raise ConfigError("trajectory carries no measurements")
    return run_ekf(traj.measurements, traj.times, params, scenario, config, noise_std=traj.noise_std)
