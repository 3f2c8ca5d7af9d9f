"""Closed-loop spacecraft attitude simulation with reaction-wheel and sensor faults.

State layout (10 entries)::

    x = [theta (roll, pitch, yaw), omega (body rates), omega_w (4 wheel speeds)]

The controller is a PD law on measured Euler angles and true body rates.
Commanded body torque is allocated to the wheels through the pseudoinverse of
the wheel configuration and saturated per wheel. Actuator faults scale the
delivered wheel torques; sensor faults scale the Euler-angle and wheel-speed
measurements. The SDE is integrated with Euler-Maruyama and additive noise.
"""

from __future__ import annotations

import enum
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError, IntegrationError

STATE_DIM = 10
N_WHEELS = 4
N_SENSORS = 7
THETA = slice(0, 3)
OMEGA = slice(3, 6)
WHEELS = slice(6, 10)

DIVERGENCE_GUARD = 1e6


def tetrahedral_wheel_config() -> np.ndarray:
    """Return the 3x4 symmetric tetrahedron of unit wheel spin axes."""
    cols = np.array(
        [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]
    )
    cols /= np.linalg.norm(cols, axis=1, keepdims=True)
    return cols.T.copy()


@dataclass
class SpacecraftParams:
    """Rigid body, wheel and controller parameters.

    Defaults are the case-study values: I = diag(1, 1, 0.8) kg m^2,
    J_w = 0.01 kg m^2, Kp = diag(22.5, 18, 15), Kd = diag(12, 9, 7.5),
    0.14 N m wheel torque limit, dt = 0.02 s over a 60 s horizon.
    """

    inertia: np.ndarray = field(default_factory=lambda: np.diag([1.0, 1.0, 0.8]))
    wheel_inertia: float = 0.01
    kp: np.ndarray = field(default_factory=lambda: np.diag([22.5, 18.0, 15.0]))
    kd: np.ndarray = field(default_factory=lambda: np.diag([12.0, 9.0, 7.5]))
    torque_limit: float = 0.14
    wheel_config: np.ndarray = field(default_factory=tetrahedral_wheel_config)
    dt: float = 0.02
    horizon: float = 60.0

    def __post_init__(self) -> None:
        self.inertia = _as_diag(self.inertia, "inertia")
        self.kp = _as_diag(self.kp, "kp")
        self.kd = _as_diag(self.kd, "kd")
        self.wheel_inertia = float(self.wheel_inertia)
        self.torque_limit = float(self.torque_limit)
        self.dt = float(self.dt)
        self.horizon = float(self.horizon)
        self.wheel_config = np.array(self.wheel_config, dtype=float)

        if np.any(np.diag(self.inertia) <= 0):
            raise ConfigError("inertia diagonal entries must be positive")
        for name in ("wheel_inertia", "torque_limit", "dt", "horizon"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.wheel_config.shape != (3, N_WHEELS):
            raise ConfigError(f"wheel_config must be 3x{N_WHEELS}, got {self.wheel_config.shape}")
        norms = np.linalg.norm(self.wheel_config, axis=0)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ConfigError(f"wheel_config columns must have unit norm, got {norms}")
        if np.linalg.matrix_rank(self.wheel_config) < 3:
            raise ConfigError("wheel_config must have full row rank 3")

        # cached quantities used in the inner loop
        self._inertia_diag = np.diag(self.inertia).copy()
        self._kp_diag = np.diag(self.kp).copy()
        self._kd_diag = np.diag(self.kd).copy()
        self._pinv = np.linalg.pinv(self.wheel_config)

    @property
    def n_steps(self) -> int:
        """Number of integration steps over the horizon."""
        n = self.horizon / self.dt
        k = int(round(n))
        if abs(n - k) > 1e-9 * max(1.0, n):
            raise ConfigError(f"horizon/dt = {n} is not an integer")
        return k

    @property
    def wheel_pinv(self) -> np.ndarray:
        return self._pinv

    def input_matrix(self) -> np.ndarray:
        """Map from delivered wheel torques to the state derivative (10x4)."""
        g = np.zeros((STATE_DIM, N_WHEELS))
        g[OMEGA] = self.wheel_config / self._inertia_diag[:, None]
        g[WHEELS] = -np.eye(N_WHEELS) / self.wheel_inertia
        return g

    def replace(self, **changes: Any) -> "SpacecraftParams":
        d = self.to_dict()
        d.update(changes)
        return SpacecraftParams.from_dict(d)

    def to_dict(self) -> dict[str, Any]:
        return {
            "inertia": np.diag(self.inertia).tolist(),
            "wheel_inertia": self.wheel_inertia,
            "kp": np.diag(self.kp).tolist(),
            "kd": np.diag(self.kd).tolist(),
            "torque_limit": self.torque_limit,
            "wheel_config": self.wheel_config.tolist(),
            "dt": self.dt,
            "horizon": self.horizon,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SpacecraftParams":
        known = {"inertia", "wheel_inertia", "kp", "kd", "torque_limit", "wheel_config", "dt", "horizon"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown spacecraft parameters: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "SpacecraftParams":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data.get("spacecraft", data))


def _as_diag(value: Any, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1:
        arr = np.diag(arr)
    if arr.shape != (3, 3) or np.any(arr != np.diag(np.diag(arr))):
        raise ConfigError(f"{name} must be a 3x3 diagonal matrix or a length-3 diagonal")
    return arr


class FaultKind(str, enum.Enum):
    NOMINAL = "nominal"
    TYPE1 = "type1"
    TYPE2 = "type2"


@dataclass
class FaultProfile:
    """Multiplicative actuator (eta) and sensor (gamma) effectiveness.

    gamma holds 3 Euler-angle sensors followed by 4 wheel-speed sensors.
    Type 1 profiles switch wheel i from 1 to eta[i] at onset_times[i].
    """

    eta: np.ndarray
    gamma: np.ndarray
    onset_times: np.ndarray | None = None
    kind: FaultKind = FaultKind.TYPE2

    def __post_init__(self) -> None:
        self.eta = np.array(self.eta, dtype=float).reshape(-1)
        self.gamma = np.array(self.gamma, dtype=float).reshape(-1)
        self.kind = FaultKind(self.kind)
        if self.onset_times is not None:
            self.onset_times = np.array(self.onset_times, dtype=float).reshape(-1)
        if self.eta.shape != (N_WHEELS,) or self.gamma.shape != (N_SENSORS,):
            raise ConfigError("eta must have 4 entries and gamma 7")
        for name, v in (("eta", self.eta), ("gamma", self.gamma)):
            if not np.all(np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
                raise ConfigError(f"{name} entries must lie in [0, 1]: {v}")
        if self.kind is FaultKind.NOMINAL:
            if np.any(self.eta != 1) or np.any(self.gamma != 1):
                raise ConfigError("nominal profile requires eta = gamma = 1")
        if self.kind is FaultKind.TYPE1:
            if np.any(self.gamma != 1):
                raise ConfigError("type1 profile requires gamma = 1")
            if self.onset_times is None or self.onset_times.shape != (N_WHEELS,):
                raise ConfigError("type1 profile requires 4 onset times")
            if np.any(self.onset_times < 0):
                raise ConfigError("onset times must be nonnegative")

    @classmethod
    def nominal(cls) -> "FaultProfile":
        return cls(np.ones(N_WHEELS), np.ones(N_SENSORS), None, FaultKind.NOMINAL)

    @classmethod
    def type1(cls, eta: Sequence[float], onset_times: Sequence[float]) -> "FaultProfile":
        return cls(eta, np.ones(N_SENSORS), onset_times, FaultKind.TYPE1)

    @classmethod
    def type2(cls, eta: Sequence[float], gamma: Sequence[float]) -> "FaultProfile":
        return cls(eta, gamma, None, FaultKind.TYPE2)

    def actuator_effectiveness(self, t: float) -> np.ndarray:
        """Effective eta at time t (onset switching for Type 1)."""
        if self.kind is FaultKind.TYPE1:
            return np.where(t < self.onset_times, 1.0, self.eta)
        return self.eta

    def conditioning(self, scenario: FaultKind | str, horizon: float) -> np.ndarray:
        """Conditioning vector: eta || onset/horizon (Type 1) or eta || gamma (Type 2)."""
        scenario = FaultKind(scenario)
        if scenario is FaultKind.TYPE1:
            onset = self.onset_times if self.onset_times is not None else np.full(N_WHEELS, horizon)
            return np.concatenate([self.eta, onset / horizon])
        if scenario is FaultKind.TYPE2:
            return np.concatenate([self.eta, self.gamma])
        raise ConfigError("conditioning is defined for type1 and type2 scenarios only")

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "eta": self.eta.tolist(),
            "gamma": self.gamma.tolist(),
            "onset_times": None if self.onset_times is None else self.onset_times.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FaultProfile":
        return cls(d["eta"], d["gamma"], d.get("onset_times"), d.get("kind", "type2"))


@dataclass
class Trajectory:
    """Simulated trajectory on a uniform grid.

    ``measurements`` holds the faulted, noisy sensor readings (3 angles then
    4 wheel speeds) taken at each grid time; ``controls`` the saturated wheel
    torque commands applied over each step (one row fewer than states).
    """

    times: np.ndarray
    states: np.ndarray
    profile: FaultProfile
    seed: int
    measurements: np.ndarray | None = None
    controls: np.ndarray | None = None
    noise_std: float = 0.0

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or self.states.shape[1] != STATE_DIM:
            raise ConfigError(f"states must be (N, {STATE_DIM}), got {self.states.shape}")
        if len(self.times) != len(self.states) or len(self.times) < 2:
            raise ConfigError("times and states must have equal length >= 2")
        if np.any(np.diff(self.times) <= 0):
            raise ConfigError("times must be strictly increasing")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def __len__(self) -> int:
        return len(self.times)


def reference_attitude(t: float, horizon: float | None = None) -> np.ndarray:
    """Desired roll/pitch/yaw: two 0.05 rad sinusoids at 0.1 Hz and a pi/250 rad/s yaw ramp."""
    w = 0.2 * math.pi * t
    return np.array([0.05 * math.sin(w), 0.05 * math.cos(w), math.pi / 250.0 * t])


def nominal_control(x: np.ndarray, t: float, params: SpacecraftParams) -> np.ndarray:
    """Unsaturated PD body torque ``-Kp (theta - theta_d) - Kd omega``."""
    err = x[THETA] - reference_attitude(t)
    return -params._kp_diag * err - params._kd_diag * x[OMEGA]


def allocate_wheel_torques(u_nom: np.ndarray, params: SpacecraftParams) -> np.ndarray:
    """Pseudoinverse allocation clamped element-wise to the wheel torque limit."""
    lim = params.torque_limit
    return np.clip(params._pinv @ u_nom, -lim, lim)


def apply_sensor_fault(
    x: np.ndarray,
    profile: FaultProfile,
    rng: np.random.Generator | None = None,
    noise_std: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Faulted, noisy readings of Euler angles and wheel speeds.

    Seven standard normals are always drawn when ``rng`` is given so the random
    stream does not depend on the profile or noise level.
    """
    if rng is not None:
        noise = noise_std * rng.standard_normal(N_SENSORS)
    else:
        noise = np.zeros(N_SENSORS)
    g = profile.gamma
    y_theta = g[:3] * x[THETA] + noise[:3]
    y_wheel = g[3:] * x[WHEELS] + noise[3:]
    return y_theta, y_wheel


def closed_loop_drift(
    x: np.ndarray,
    t: float,
    profile: FaultProfile,
    params: SpacecraftParams,
    y_theta: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Drift given the Euler-angle measurement consumed by the controller."""
    return effectiveness_drift(x, t, profile.actuator_effectiveness(t), params, y_theta)


def effectiveness_drift(
    x: np.ndarray,
    t: float,
    eta: np.ndarray,
    params: SpacecraftParams,
    y_theta: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Closed-loop drift for an explicit effectiveness vector (not range-checked)."""
    err = y_theta - reference_attitude(t)
    omega = x[OMEGA]
    u_nom = -params._kp_diag * err - params._kd_diag * omega
    u_w = allocate_wheel_torques(u_nom, params)
    tau = eta * u_w

    a = params.wheel_config
    j = params._inertia_diag
    h_total = j * omega + params.wheel_inertia * (a @ x[WHEELS])
    dx = np.empty(STATE_DIM)
    dx[THETA] = omega
    dx[OMEGA] = (-np.cross(omega, h_total) + a @ tau) / j
    dx[WHEELS] = -tau / params.wheel_inertia
    return dx, u_w


def drift(
    x: np.ndarray,
    t: float,
    profile: FaultProfile,
    params: SpacecraftParams,
    rng: np.random.Generator | None = None,
    noise_std: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Closed-loop state derivative and commanded wheel torques.

    The wheels exert ``A tau`` on the body and spin up with ``-tau / J_w``
    (angular momentum is exchanged, not created).
    """
    if not np.all(np.isfinite(x)):
        raise IntegrationError(f"non-finite state at t={t}")
    y_theta, _ = apply_sensor_fault(x, profile, rng, noise_std)
    return closed_loop_drift(x, t, profile, params, y_theta)


def _em_update(x: np.ndarray, dx: np.ndarray, dt: float, sigma: float, xi: np.ndarray, t: float) -> np.ndarray:
    x_new = x + dx * dt + sigma * math.sqrt(dt) * xi
    norm = float(np.linalg.norm(x_new))
    if not math.isfinite(norm) or norm > DIVERGENCE_GUARD:
        raise IntegrationError(f"state diverged at t={t:.6g} (|x|={norm:.3g})")
    return x_new


def step_em(
    x: np.ndarray,
    t: float,
    profile: FaultProfile,
    params: SpacecraftParams,
    sigma_process: float,
    rng: np.random.Generator,
    noise_std: float | None = None,
) -> np.ndarray:
    """One Euler-Maruyama step with additive diffusion ``sigma_process * I``."""
    if noise_std is None:
        noise_std = sigma_process
    dx, _ = drift(x, t, profile, params, rng, noise_std)
    xi = rng.standard_normal(STATE_DIM)
    return _em_update(x, dx, params.dt, sigma_process, xi, t)


def default_initial_state(params: SpacecraftParams | None = None) -> np.ndarray:
    """On the reference at t = 0, at rest, wheels stopped."""
    x0 = np.zeros(STATE_DIM)
    x0[THETA] = reference_attitude(0.0)
    return x0


def simulate_trajectory(
    x0: np.ndarray,
    profile: FaultProfile,
    params: SpacecraftParams,
    sigma_process: float,
    seed: int,
    noise_std: float | None = None,
) -> Trajectory:
    """Integrate from x0 over ``params.horizon``; (x0, profile, params, seed) fix the result."""
    if noise_std is None:
        noise_std = sigma_process
    n = params.n_steps
    dt = params.dt
    rng = np.random.default_rng(seed)
    times = np.arange(n + 1) * dt
    states = np.empty((n + 1, STATE_DIM))
    meas = np.empty((n + 1, N_SENSORS))
    controls = np.empty((n, N_WHEELS))
    x = np.array(x0, dtype=float)
    if x.shape != (STATE_DIM,) or not np.all(np.isfinite(x)):
        raise IntegrationError("initial state must be a finite 10-vector")
    states[0] = x
    for k in range(n):
        t = float(times[k])
        y_theta, y_wheel = apply_sensor_fault(x, profile, rng, noise_std)
        meas[k, :3] = y_theta
        meas[k, 3:] = y_wheel
        dx, u_w = closed_loop_drift(x, t, profile, params, y_theta)
        controls[k] = u_w
        xi = rng.standard_normal(STATE_DIM)
        x = _em_update(x, dx, dt, sigma_process, xi, t)
        states[k + 1] = x
    y_theta, y_wheel = apply_sensor_fault(x, profile, rng, noise_std)
    meas[n, :3] = y_theta
    meas[n, 3:] = y_wheel
    return Trajectory(times, states, profile, int(seed), meas, controls, float(noise_std))


def derive_seed(base_seed: int, index: int) -> int:
    """Per-trajectory integer seed from (base_seed, index)."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1, np.uint64)[0] >> np.uint64(1))


def _simulate_member(args: tuple) -> Trajectory:
    x0_mean, init_std, profile, params, sigma, noise_std, seed = args
    x0 = np.asarray(x0_mean, dtype=float)
    if init_std > 0:
        x0 = x0 + init_std * np.random.default_rng([seed, 0]).standard_normal(STATE_DIM)
    return simulate_trajectory(x0, profile, params, sigma, seed, noise_std)


def simulate_ensemble(
    x0_mean: np.ndarray,
    profile: FaultProfile,
    params: SpacecraftParams,
    n: int,
    base_seed: int,
    sigma_process: float,
    init_std: float = 0.01,
    noise_std: float | None = None,
    workers: int = 1,
) -> list[Trajectory]:
    """``n`` trajectories from x0 = x0_mean + init_std * xi, one derived seed each.

    Results do not depend on ``workers``.
    """
    if n < 1:
        raise ConfigError("ensemble size must be >= 1")
    jobs = [
        (x0_mean, init_std, profile, params, sigma_process, noise_std, derive_seed(base_seed, i))
        for i in range(n)
    ]
    return run_parallel(_simulate_member, jobs, workers)


def run_parallel(fn, jobs: list, workers: int = 1) -> list:
    """Map ``fn`` over ``jobs`` preserving order, optionally in worker processes."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
