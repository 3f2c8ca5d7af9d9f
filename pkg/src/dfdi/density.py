"""Distributional distances between trajectory ensembles and Wasserstein bounds.

Empirical measures are matrices whose rows are flattened trajectories
(selected coordinates at selected timepoints). The 2-Wasserstein distance
between two equal-size sample sets is solved exactly as a linear assignment
problem; an entropic Sinkhorn approximation covers larger sets.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .dynamics import (
    STATE_DIM,
    FaultProfile,
    SpacecraftParams,
    Trajectory,
    default_initial_state,
    simulate_trajectory,
)
from .errors import BoundInapplicableError, ConfigError, DimensionError, NumericalError

logger = logging.getLogger(__name__)

EXACT_MAX_N = 2048
DEFAULT_TIMEPOINTS = 30
ATTITUDE_COORDS = tuple(range(6))


@dataclass
class EmpiricalMeasure:
    samples: np.ndarray
    timepoint_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    coordinate_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self) -> None:
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if self.samples.shape[0] < 1:
            raise DimensionError("empirical measure needs at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise NumericalError("empirical measure contains non-finite samples")
        self.timepoint_indices = np.asarray(self.timepoint_indices, dtype=int)
        self.coordinate_indices = np.asarray(self.coordinate_indices, dtype=int)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def d(self) -> int:
        return self.samples.shape[1]


def default_timepoints(n_times: int, count: int = DEFAULT_TIMEPOINTS) -> np.ndarray:
    """``count`` uniformly spaced grid indices spanning the whole trajectory."""
    return np.unique(np.round(np.linspace(0, n_times - 1, min(count, n_times))).astype(int))


def flatten(
    ensemble: Sequence[Trajectory],
    timepoint_indices: Sequence[int] | None = None,
    coordinate_indices: Sequence[int] | None = None,
) -> EmpiricalMeasure:
    """Stack selected coordinates at selected timepoints, one row per trajectory."""
    if len(ensemble) == 0:
        raise DimensionError("empty ensemble")
    lengths = {len(tr) for tr in ensemble}
    if len(lengths) != 1:
        raise DimensionError(f"ragged trajectories: lengths {sorted(lengths)}")
    n_times = lengths.pop()
    tp = default_timepoints(n_times) if timepoint_indices is None else np.asarray(timepoint_indices, dtype=int)
    coords = np.arange(STATE_DIM) if coordinate_indices is None else np.asarray(coordinate_indices, dtype=int)
    if tp.size == 0 or tp.min() < -n_times or tp.max() >= n_times:
        raise DimensionError("timepoint indices out of range")
    if coords.size == 0 or coords.min() < 0 or coords.max() >= STATE_DIM:
        raise DimensionError("coordinate indices out of range")
    rows = np.stack([tr.states[np.ix_(tp, coords)].ravel() for tr in ensemble])
    return EmpiricalMeasure(rows, tp, coords)


def standardize(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> tuple[EmpiricalMeasure, EmpiricalMeasure]:
    """Divide every column by its standard deviation over the pooled samples."""
    _check_comparable(mu, nu)
    pooled = np.vstack([mu.samples, nu.samples])
    scale = pooled.std(axis=0)
    scale[scale == 0] = 1.0
    return (
        EmpiricalMeasure(mu.samples / scale, mu.timepoint_indices, mu.coordinate_indices),
        EmpiricalMeasure(nu.samples / scale, nu.timepoint_indices, nu.coordinate_indices),
    )


def _check_comparable(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> None:
    if mu.d != nu.d:
        raise DimensionError(f"dimension mismatch: {mu.d} vs {nu.d}")


def squared_cost(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, clipped at zero."""
    c = np.sum(x * x, axis=1)[:, None] + np.sum(y * y, axis=1)[None, :] - 2.0 * x @ y.T
    return np.maximum(c, 0.0)


def _as_samples(m) -> np.ndarray:
    return m.samples if isinstance(m, EmpiricalMeasure) else np.atleast_2d(np.asarray(m, dtype=float))


def w2_empirical(mu, nu, method: str = "exact", epsilon: float = 1e-2) -> float:
    """2-Wasserstein distance between two equal-size sample sets.

    ``method="exact"`` solves the assignment problem on the squared-distance
    matrix (n <= 2048). ``method="sinkhorn"`` returns the transport cost of an
    entropic plan and is approximate.
    """
    x, y = _as_samples(mu), _as_samples(nu)
    if x.shape[1] != y.shape[1]:
        raise DimensionError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"sample counts differ ({x.shape[0]} vs {y.shape[0]}); no implicit subsampling")
    if method == "exact":
        if x.shape[0] > EXACT_MAX_N:
            raise ConfigError(f"exact mode supports n <= {EXACT_MAX_N}; use method='sinkhorn'")
        # differences taken directly so identical rows cost exactly zero
        cost = np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=2) if x.shape[0] <= 512 else squared_cost(x, y)
        rows, cols = linear_sum_assignment(cost)
        return math.sqrt(float(cost[rows, cols].mean()))
    if method == "sinkhorn":
        return math.sqrt(sinkhorn_cost(x, y, epsilon))
    raise ConfigError(f"unknown method {method!r}")


def sinkhorn_cost(x: np.ndarray, y: np.ndarray, epsilon: float = 1e-2, n_iter: int = 200, tol: float = 1e-9) -> float:
    """Transport cost <P, C> of the log-domain entropic plan between uniform weights.

    Epsilon is annealed geometrically from the cost scale down to
    ``epsilon * mean(C)``.
    """
    cost = squared_cost(x, y)
    n, m = cost.shape
    log_a = np.full(n, -math.log(n))
    log_b = np.full(m, -math.log(m))
    scale = float(cost.mean()) or 1.0
    target = epsilon * scale
    f = np.zeros(n)
    g = np.zeros(m)
    eps = max(scale, target)
    while True:
        for _ in range(n_iter):
            f_old = f
            f = -eps * logsumexp((g[None, :] - cost) / eps + log_b[None, :], axis=1)
            g = -eps * logsumexp((f[:, None] - cost) / eps + log_a[:, None], axis=0)
            if np.max(np.abs(f - f_old)) < tol * scale:
                break
        if eps <= target:
            break
        eps = max(eps * 0.5, target)
    log_p = (f[:, None] + g[None, :] - cost) / eps + log_a[:, None] + log_b[None, :]
    return float(np.sum(np.exp(log_p) * cost))


def _gaussian_moments(x: np.ndarray, ridge_scale: float) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    d = x.shape[1]
    cov = np.cov(x, rowvar=False, ddof=1).reshape(d, d) if x.shape[0] > 1 else np.zeros((d, d))
    lam = ridge_scale * float(np.trace(cov)) / d
    return mean, cov + lam * np.eye(d)


def kl_gaussian(mu, nu, ridge_scale: float = 1e-6) -> float:
    """KL(mu || nu) between Gaussians moment-matched to the two sample sets.

    Each covariance gets a ridge ``ridge_scale * trace(cov) / d``.
    """
    x, y = _as_samples(mu), _as_samples(nu)
    if x.shape[1] != y.shape[1]:
        raise DimensionError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    d = x.shape[1]
    m0, s0 = _gaussian_moments(x, ridge_scale)
    m1, s1 = _gaussian_moments(y, ridge_scale)
    try:
        l0 = np.linalg.cholesky(s0)
        l1 = np.linalg.cholesky(s1)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("covariance singular after ridge") from exc
    a = np.linalg.solve(l1, l0)  # L1^-1 L0
    diff = np.linalg.solve(l1, m1 - m0)
    trace_term = float(np.sum(a * a))
    maha = float(diff @ diff)
    logdet = 2.0 * float(np.sum(np.log(np.diag(l1))) - np.sum(np.log(np.diag(l0))))
    return max(0.5 * (trace_term + maha - d + logdet), 0.0)


def gaussian_w2(m1: np.ndarray, s1: np.ndarray, m2: np.ndarray, s2: np.ndarray) -> float:
    """Closed-form 2-Wasserstein distance between two Gaussians."""
    from scipy.linalg import sqrtm

    r2 = np.real(sqrtm(s2))
    cross = np.real(sqrtm(r2 @ s1 @ r2))
    val = float(np.sum((m1 - m2) ** 2) + np.trace(s1 + s2 - 2.0 * cross))
    return math.sqrt(max(val, 0.0))


# ------------------------------------------------------------------ bounds
@dataclass
class BoundConstants:
    """Constants of the stochastic contraction bounds.

    ``alpha_tilde`` is the contraction rate of the nominal closed loop (used
    as alpha in the single-noise bound too); ``g1`` only enters that bound.
    """

    m_lo: float = 1.0
    m_hi: float = 1.0
    m_x: float = 0.0
    m_xx: float = 0.0
    g2: float = 0.0
    G_bar: float = 0.0
    u_bar: float = 0.0
    Delta_bar: float = 0.0
    alpha_tilde: float = 1.0
    eps_c: float = 0.1
    eps_f: float = 0.1
    g1: float = 0.0

    def __post_init__(self) -> None:
        if not 0 < self.m_lo <= self.m_hi:
            raise ConfigError("require 0 < m_lo <= m_hi")
        if self.eps_c <= 0 or self.eps_f <= 0:
            raise ConfigError("eps_c and eps_f must be positive")
        for name in ("m_x", "m_xx", "g1", "g2", "G_bar", "u_bar", "Delta_bar"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be nonnegative")

    def to_dict(self) -> dict[str, float]:
        return dict(self.__dict__)


def contraction_terms(c: BoundConstants) -> tuple[float, float]:
    """(gamma_1, C_c) of the single-noise contraction bound."""
    noise = c.g1**2 + c.g2**2
    gamma = c.alpha_tilde - noise / (2 * c.m_lo) * (c.eps_c * c.m_x + c.m_xx / 2)
    c_c = (c.m_hi / c.m_lo + c.m_x / (c.eps_c * c.m_lo)) * noise
    return gamma, c_c


def wasserstein_contraction_bound(c: BoundConstants, w2_init_sq: float, t):
    """Upper bound on W2^2(mu_t, nu_t): C_c / (2 gamma_1) + (m_hi/m_lo) W2^2(mu_0, nu_0) exp(-2 gamma_1 t)."""
    gamma, c_c = contraction_terms(c)
    if gamma <= 0:
        raise BoundInapplicableError(f"gamma_1 = {gamma:.6g} <= 0")
    return c_c / (2 * gamma) + (c.m_hi / c.m_lo) * w2_init_sq * np.exp(-2 * gamma * np.asarray(t, dtype=float))


def fdi_terms(c: BoundConstants) -> tuple[float, float, float]:
    """(gamma_tilde, C_c_tilde, C_d_tilde) of the faulty-vs-nominal bound."""
    gamma = c.alpha_tilde - c.eps_f / 4 - c.g2**2 / (2 * c.m_lo) * (c.eps_c * c.m_x + c.m_xx / 2)
    c_c = (c.m_hi / c.m_lo + c.m_x / (c.eps_c * c.m_lo)) * c.g2**2
    c_d = 2 * c.m_hi**2 * c.G_bar**2 * c.Delta_bar**2 * c.u_bar**2 / (c.eps_f * c.m_lo)
    return gamma, c_c, c_d


def wasserstein_fdi_bound(c: BoundConstants, w2_init_sq: float, t):
    """Upper bound on W2^2 between nominal and faulty laws at time t.

    C~_c / (2 g) + C~_d / (2 g m_lo) + (m_hi/m_lo) W2^2(mu_0, nu_0) exp(-2 g t)
    with g = gamma_tilde. Take the square root for a distance bound.
    """
    gamma, c_c, c_d = fdi_terms(c)
    if gamma <= 0:
        raise BoundInapplicableError(f"gamma_tilde = {gamma:.6g} <= 0")
    decay = (c.m_hi / c.m_lo) * w2_init_sq * np.exp(-2 * gamma * np.asarray(t, dtype=float))
    return c_c / (2 * gamma) + c_d / (2 * gamma * c.m_lo) + decay


def wasserstein_fdi_bound_joint(c: BoundConstants, w2_init_sq: float, times: Sequence[float]) -> float:
    """Bound on W2^2 of the joint law at several times.

    The synchronous coupling behind the single-time bound is one coupling of
    the joint laws, so the per-time bounds add up.
    """
    return float(np.sum(wasserstein_fdi_bound(c, w2_init_sq, np.asarray(times, dtype=float))))


def fdi_bound_summary(c: BoundConstants, w2_init_sq: float, t: float) -> dict[str, float]:
    gamma, c_c, c_d = fdi_terms(c)
    sq = float(wasserstein_fdi_bound(c, w2_init_sq, t))
    return {
        "gamma_tilde": gamma,
        "C_c_tilde": c_c,
        "C_d_tilde": c_d,
        "bound_sq": sq,
        "bound": math.sqrt(sq),
    }


# ------------------------------------------------------- contraction rate
@dataclass
class ContractionEstimate:
    alpha: float
    rates: np.ndarray
    warning: bool
    coordinate_indices: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "rates": self.rates.tolist(),
            "warning": self.warning,
            "coordinate_indices": list(self.coordinate_indices),
        }


def fit_decay_rate(times: np.ndarray, separation: np.ndarray, floor: float = 1e-2) -> float:
    """Negative least-squares slope of log separation.

    The fit stops where the separation first falls below ``floor`` times its
    initial value.
    """
    sep = np.asarray(separation, dtype=float)
    if sep[0] <= 0:
        raise NumericalError("initial separation must be positive")
    below = np.nonzero(sep < floor * sep[0])[0]
    end = int(below[0]) if below.size else len(sep)
    end = max(end, 3)
    t = np.asarray(times[:end], dtype=float)
    y = np.log(np.maximum(sep[:end], np.finfo(float).tiny))
    slope = np.polyfit(t, y, 1)[0]
    return float(-slope)


def estimate_contraction_rate(
    params: SpacecraftParams | None = None,
    profile: FaultProfile | None = None,
    n_pairs: int = 8,
    perturb_scale: float = 1e-4,
    horizon: float | None = None,
    coordinate_indices: Sequence[int] = ATTITUDE_COORDS,
    seed: int = 0,
    floor: float = 1e-2,
    x0: np.ndarray | None = None,
    simulate: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]] | None = None,
) -> ContractionEstimate:
    """Median exponential decay rate of separation between perturbed deterministic trajectories.

    Each pair starts from x0 and x0 + perturb_scale * xi and is integrated
    without noise. Separation is measured on ``coordinate_indices``; the
    default restricts it to the attitude states, since wheel speeds are a
    neutrally stable (momentum-exchange) direction of the closed loop.
    ``simulate`` replaces the spacecraft model with any map x0 -> (times, states).
    """
    if simulate is None:
        params = params or SpacecraftParams()
        if horizon is not None:
            params = params.replace(horizon=horizon)
        profile = profile or FaultProfile.nominal()
        base = default_initial_state(params) if x0 is None else np.asarray(x0, dtype=float)

        def simulate(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            tr = simulate_trajectory(z, profile, params, 0.0, 0)
            return tr.times, tr.states

    elif x0 is None:
        raise ConfigError("x0 is required with a custom simulate function")
    else:
        base = np.asarray(x0, dtype=float)

    coords = tuple(int(i) for i in coordinate_indices)
    rng = np.random.default_rng(seed)
    times, ref = simulate(base)
    rates = []
    for _ in range(n_pairs):
        pert = perturb_scale * rng.standard_normal(base.shape)
        _, other = simulate(base + pert)
        sep = np.linalg.norm((np.asarray(other) - np.asarray(ref))[:, coords], axis=1)
        rates.append(fit_decay_rate(np.asarray(times), sep, floor))
    rates_arr = np.array(rates)
    alpha = float(np.median(rates_arr))
    warning = not alpha > 0
    if warning:
        logger.warning("separation does not decay (alpha = %.3g); trajectories are not contracting", alpha)
    return ContractionEstimate(alpha, rates_arr, warning, coords)
