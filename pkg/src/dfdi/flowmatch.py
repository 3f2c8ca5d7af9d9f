"""Conditional flow-matching transition density with FiLM conditioning.

The network maps a feature vector

    [t_k / t_N, tau, x_tau, x_{k-1}, ..., x_{k-M}, c]

to a diagonal Gaussian over the next state x_{k+1}. ``x_tau`` is a draw from
the Gaussian bridge between x_k and x_{k+1}; at scoring time tau = 0 so that
x_tau = x_k.

Each hidden layer computes ``gelu((h W + b) * (1 + gamma(c)) + beta(c))``
with affine FiLM generators gamma, beta. Everything is float64 numpy with
hand-written reverse mode.

Inside the model (fixed, not learned) the history slots are re-expressed
relative to x_tau, and state inputs and conditioning entries (the latter
also as seen by the FiLM generators) are standardized with statistics
fitted on the training data; the mean head is a residual on x_tau scaled by
sqrt(s^2 + sigma_bridge^2 tau (1 - tau)), where s is the per-coordinate
spread of one-step increments, so the output is well scaled at every tau.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from .dynamics import STATE_DIM, FaultKind
from .errors import ConfigError, DimensionError, NumericalError
from .faultgen import COND_DIM, Dataset, read_header

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DFDIFM01"
LOG_SIGMA_MIN = -7.0
LOG_SIGMA_MAX = 2.0
_GELU_K = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Tanh-approximated GELU and its derivative."""
    inner = _GELU_K * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)
    dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_K * (1.0 + 3 * 0.044715 * x * x)
    return y, dy


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch: int = 256
    epochs: int = 15
    sigma_bridge: float = 0.03
    lambda_mse: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.batch <= 0 or self.epochs < 0 or self.sigma_bridge < 0:
            raise ConfigError("lr, batch must be positive; epochs, sigma_bridge nonnegative")
        if self.lambda_mse < 0:
            raise ConfigError("lambda_mse must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("invalid Adam hyperparameters")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class BridgeSample:
    x_tau: np.ndarray
    tau: float
    k: int


def sample_bridge(
    x_k: np.ndarray, x_k1: np.ndarray, tau: float, sigma_bridge: float, rng: np.random.Generator, k: int = 0
) -> BridgeSample:
    """Gaussian bridge draw with mean (1-tau) x_k + tau x_k1 and variance sigma^2 tau (1-tau)."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must lie in [0, 1], got {tau}")
    x_k = np.asarray(x_k, dtype=float)
    x_k1 = np.asarray(x_k1, dtype=float)
    xi = rng.standard_normal(x_k.shape)
    return BridgeSample(_bridge(x_k, x_k1, tau, sigma_bridge, xi), float(tau), k)


def _bridge(x_k: np.ndarray, x_k1: np.ndarray, tau, sigma_bridge: float, xi: np.ndarray) -> np.ndarray:
    # endpoints are returned verbatim so tau in {0, 1} is bit-exact
    tau = np.asarray(tau, dtype=float)
    out = (1.0 - tau) * x_k + tau * x_k1 + sigma_bridge * np.sqrt(tau * (1.0 - tau)) * xi
    if tau.ndim == 0:
        if tau == 0.0:
            return x_k.copy()
        if tau == 1.0:
            return x_k1.copy()
        return out
    t = np.broadcast_to(tau, out.shape)
    out = np.where(t == 0.0, x_k, out)
    return np.where(t == 1.0, x_k1, out)


def feature_dim(cond_dim: int, memory: int = 4, state_dim: int = STATE_DIM) -> int:
    return 2 + state_dim + state_dim * memory + cond_dim


def build_features(
    states: np.ndarray,
    k: int,
    bridge: BridgeSample | np.ndarray,
    c: np.ndarray,
    horizon: float,
    times: np.ndarray,
    memory: int = 4,
    cond_dim: int | None = None,
) -> np.ndarray:
    """Feature vector for step k of one trajectory; history before x_0 repeats x_0."""
    if k < 0:
        raise ConfigError("step index must be nonnegative")
    c = np.asarray(c, dtype=float).reshape(-1)
    if cond_dim is not None and c.shape[0] != cond_dim:
        raise DimensionError(f"conditioning has {c.shape[0]} entries, model expects {cond_dim}")
    if isinstance(bridge, BridgeSample):
        x_tau, tau = bridge.x_tau, bridge.tau
    else:
        x_tau, tau = np.asarray(bridge, dtype=float), 0.0
    hist = [states[max(k - j, 0)] for j in range(1, memory + 1)]
    return np.concatenate([[times[k] / horizon, tau], x_tau, *hist, c])


def batch_features(
    states: np.ndarray,
    traj_idx: np.ndarray,
    k: np.ndarray,
    x_tau: np.ndarray,
    tau: np.ndarray,
    cond: np.ndarray,
    t_norm: np.ndarray,
    memory: int = 4,
) -> np.ndarray:
    """Vectorized ``build_features`` over (trajectory, step) pairs.

    ``states`` is (n_traj, n_times, n); ``cond`` holds one row per pair.
    """
    parts = [t_norm[:, None], tau[:, None], x_tau]
    for j in range(1, memory + 1):
        parts.append(states[traj_idx, np.maximum(k - j, 0)])
    parts.append(cond)
    return np.concatenate(parts, axis=1)


_LAYER_KEYS = ("W", "b", "Wg", "bg", "Wb", "bb")


class FlowModel:
    """FiLM-conditioned MLP giving (mu, log_sigma) for the next state."""

    def __init__(
        self,
        cond_dim: int,
        hidden_dims: tuple[int, ...] = (256, 256),
        memory: int = 4,
        state_dim: int = STATE_DIM,
        scenario: FaultKind | str | None = None,
        seed: int = 0,
    ) -> None:
        self.cond_dim = int(cond_dim)
        self.hidden_dims = tuple(int(h) for h in hidden_dims)
        self.memory = int(memory)
        self.state_dim = int(state_dim)
        self.scenario = None if scenario is None else FaultKind(scenario).value
        if self.memory < 1 or not self.hidden_dims:
            raise ConfigError("memory >= 1 and at least one hidden layer required")
        n = self.state_dim
        self.input_dim = feature_dim(self.cond_dim, self.memory, n)

        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        fan_in = self.input_dim
        for i, h in enumerate(self.hidden_dims):
            lim = 1.0 / math.sqrt(fan_in)
            self.params[f"W{i}"] = rng.uniform(-lim, lim, (fan_in, h))
            self.params[f"b{i}"] = rng.uniform(-lim, lim, h)
            self.params[f"Wg{i}"] = np.zeros((self.cond_dim, h))
            self.params[f"bg{i}"] = np.zeros(h)
            self.params[f"Wb{i}"] = np.zeros((self.cond_dim, h))
            self.params[f"bb{i}"] = np.zeros(h)
            fan_in = h
        lim = 1.0 / math.sqrt(fan_in)
        self.params["Wout"] = rng.uniform(-lim, lim, (fan_in, 2 * n))
        bout = rng.uniform(-lim, lim, 2 * n)
        bout[n:] = -2.0
        self.params["bout"] = bout

        # fixed normalization (identity until fit_normalization)
        self.in_shift = np.zeros(self.input_dim)
        self.in_scale = np.ones(self.input_dim)
        self.out_shift = np.zeros(n)
        self.out_scale = np.ones(n)
        self.bridge_sigma = 0.0

    # ------------------------------------------------------------------ layout
    def param_names(self) -> list[str]:
        names = [f"{key}{i}" for i in range(len(self.hidden_dims)) for key in _LAYER_KEYS]
        return names + ["Wout", "bout"]

    @property
    def n_params(self) -> int:
        return sum(self.params[k].size for k in self.param_names())

    def cond_slice(self) -> slice:
        return slice(self.input_dim - self.cond_dim, self.input_dim)

    def _state_cols(self) -> slice:
        return slice(2, 2 + self.state_dim * (1 + self.memory))

    # ----------------------------------------------------------- normalization
    def _preprocess(self, feats: np.ndarray) -> np.ndarray:
        z = feats.copy()
        n = self.state_dim
        x_tau = feats[:, 2 : 2 + n]
        for j in range(1, self.memory + 1):
            sl = slice(2 + n * j, 2 + n * (j + 1))
            z[:, sl] = feats[:, sl] - x_tau
        return (z - self.in_shift) / self.in_scale

    def _preprocess_backward(self, dz: np.ndarray) -> np.ndarray:
        dz = dz / self.in_scale
        dfeat = dz.copy()
        n = self.state_dim
        for j in range(1, self.memory + 1):
            dfeat[:, 2 : 2 + n] -= dz[:, 2 + n * j : 2 + n * (j + 1)]
        return dfeat

    def fit_normalization(self, feats: np.ndarray, targets: np.ndarray) -> None:
        """Standardize state-derived and conditioning inputs; scale the mean head by increment spread.

        Time and tau columns are left untouched. Conditioning columns that are
        (nearly) constant in the data keep unit scale.
        """
        self.in_shift = np.zeros(self.input_dim)
        self.in_scale = np.ones(self.input_dim)
        z = self._preprocess(feats)
        cols = self._state_cols()
        self.in_shift[cols] = z[:, cols].mean(axis=0)
        self.in_scale[cols] = np.maximum(z[:, cols].std(axis=0), 1e-6)
        cc = self.cond_slice()
        c_std = z[:, cc].std(axis=0)
        self.in_shift[cc] = z[:, cc].mean(axis=0)
        self.in_scale[cc] = np.where(c_std > 1e-3, c_std, 1.0)
        delta = targets - feats[:, 2 : 2 + self.state_dim]
        self.out_shift = delta.mean(axis=0)
        self.out_scale = np.maximum(delta.std(axis=0), 1e-6)

    # ---------------------------------------------------------------- forward
    def _check_features(self, feats: np.ndarray) -> np.ndarray:
        feats = np.asarray(feats)
        if feats.dtype.kind != "f":
            feats = feats.astype(float)
        if feats.ndim == 1:
            feats = feats[None, :]
        if feats.shape[1] != self.input_dim:
            raise DimensionError(f"feature length {feats.shape[1]} != model input_dim {self.input_dim}")
        return feats

    def forward(self, feats: np.ndarray, cache: bool = False):
        """Return (mu, log_sigma), each (B, n); with ``cache`` also the tape for backward."""
        feats = self._check_features(feats)
        p = self.params
        h = self._preprocess(feats)
        c = h[:, self.cond_slice()]  # FiLM sees the standardized conditioning
        tape = []
        for i in range(len(self.hidden_dims)):
            a = h @ p[f"W{i}"] + p[f"b{i}"]
            g = c @ p[f"Wg{i}"] + p[f"bg{i}"]
            beta = c @ p[f"Wb{i}"] + p[f"bb{i}"]
            m = a * (1.0 + g) + beta
            h_new, dgelu = gelu(m)
            tape.append((h, a, g, dgelu))
            h = h_new
        out = h @ p["Wout"] + p["bout"]
        n = self.state_dim
        x_tau = feats[:, 2 : 2 + n]
        scale = self._output_scale(feats[:, 1:2])
        mu = x_tau + self.out_shift + scale * out[:, :n]
        ls_pre = out[:, n:] + np.log(scale)
        log_sigma = np.clip(ls_pre, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(log_sigma))):
            raise NumericalError("non-finite network output")
        if cache:
            return mu, log_sigma, (feats, c, tape, h, ls_pre, out, scale)
        return mu, log_sigma

    def _output_scale(self, tau: np.ndarray) -> np.ndarray:
        return np.sqrt(self.out_scale**2 + self.bridge_sigma**2 * tau * (1.0 - tau))

    def backward(
        self, tape, d_mu: np.ndarray, d_log_sigma: np.ndarray, need_weights: bool = True
    ) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Reverse pass: gradients w.r.t. every weight and w.r.t. the input features."""
        feats, c, layers, h_last, ls_pre, out, scale = tape
        p = self.params
        n = self.state_dim
        inside = (ls_pre >= LOG_SIGMA_MIN) & (ls_pre <= LOG_SIGMA_MAX)
        d_ls = d_log_sigma * inside
        d_out = np.concatenate([d_mu * scale, d_ls], axis=1)
        grads: dict[str, np.ndarray] = {}
        if need_weights:
            grads["Wout"] = h_last.T @ d_out
            grads["bout"] = d_out.sum(axis=0)
        dh = d_out @ p["Wout"].T
        d_c = np.zeros_like(c)
        for i in reversed(range(len(self.hidden_dims))):
            h_in, a, g, dgelu = layers[i]
            dm = dh * dgelu
            da = dm * (1.0 + g)
            dg = dm * a
            if need_weights:
                grads[f"W{i}"] = h_in.T @ da
                grads[f"b{i}"] = da.sum(axis=0)
                grads[f"Wg{i}"] = c.T @ dg
                grads[f"bg{i}"] = dg.sum(axis=0)
                grads[f"Wb{i}"] = c.T @ dm
                grads[f"bb{i}"] = dm.sum(axis=0)
            d_c += dg @ p[f"Wg{i}"].T + dm @ p[f"Wb{i}"].T
            dh = da @ p[f"W{i}"].T
        dh[:, self.cond_slice()] += d_c
        d_feats = self._preprocess_backward(dh)
        d_feats[:, 2 : 2 + n] += d_mu
        # tau also enters through the output scale
        tau = feats[:, 1:2]
        d_scale = d_mu * out[:, :n] + d_ls / scale
        d_feats[:, 1] += np.sum(d_scale * self.bridge_sigma**2 * (1.0 - 2.0 * tau) / (2.0 * scale), axis=1)
        return grads, d_feats

    # ------------------------------------------------------------------ state
    def copy(self) -> "FlowModel":
        other = FlowModel.__new__(FlowModel)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        for key in ("in_shift", "in_scale", "out_shift", "out_scale"):
            setattr(other, key, getattr(self, key).copy())
        return other

    def metadata(self) -> dict[str, Any]:
        return {
            "cond_dim": self.cond_dim,
            "hidden_dims": list(self.hidden_dims),
            "memory": self.memory,
            "state_dim": self.state_dim,
            "input_dim": self.input_dim,
            "scenario": self.scenario,
            "activation": "gelu_tanh",
            "bridge_sigma": self.bridge_sigma,
        }


# ------------------------------------------------------------------- losses
def nll_loss(mu: np.ndarray, log_sigma: np.ndarray, x_next: np.ndarray) -> np.ndarray:
    """Diagonal Gaussian NLL summed over coordinates, without the (n/2) log 2 pi constant."""
    r = np.asarray(x_next) - mu
    return 0.5 * np.sum(r * r * np.exp(-2.0 * log_sigma) + 2.0 * log_sigma, axis=-1)


def _loss_and_output_grads(mu, log_sigma, x_next, lambda_mse, weights=None):
    r = x_next - mu
    inv_var = np.exp(-2.0 * log_sigma)
    per = 0.5 * np.sum(r * r * inv_var + 2.0 * log_sigma, axis=1) + lambda_mse * np.sum(r * r, axis=1)
    b = len(per)
    w = np.full(b, 1.0 / b, dtype=per.dtype) if weights is None else weights
    loss = per @ w
    d_mu = -(r * inv_var + 2.0 * lambda_mse * r) * w[:, None]
    d_ls = (1.0 - r * r * inv_var) * w[:, None]
    return loss, per, d_mu, d_ls


def total_loss(model: FlowModel, feats: np.ndarray, x_next: np.ndarray, config: TrainConfig) -> float:
    """Batch mean of NLL + lambda_mse * ||x_next - mu||^2."""
    if len(feats) == 0:
        raise ConfigError("empty batch")
    mu, ls = model.forward(feats)
    return _loss_and_output_grads(mu, ls, np.asarray(x_next, dtype=mu.dtype), config.lambda_mse)[0]


def gradients(
    model: FlowModel, feats: np.ndarray, x_next: np.ndarray, config: TrainConfig
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Loss, weight gradients and per-sample gradient w.r.t. the conditioning entries."""
    if len(feats) == 0:
        raise ConfigError("empty batch")
    mu, ls, tape = model.forward(feats, cache=True)
    loss, _, d_mu, d_ls = _loss_and_output_grads(mu, ls, np.asarray(x_next, dtype=float), config.lambda_mse)
    if not math.isfinite(loss):
        raise NumericalError("non-finite loss")
    grads, d_feats = model.backward(tape, d_mu, d_ls)
    return float(loss), grads, d_feats[:, model.cond_slice()]


def nll_and_cond_grad(model: FlowModel, feats: np.ndarray, x_next: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed NLL over rows and its gradient w.r.t. a conditioning vector shared by all rows."""
    mu, ls, tape = model.forward(feats, cache=True)
    r = x_next - mu
    inv_var = np.exp(-2.0 * ls)
    total = float(0.5 * np.sum(r * r * inv_var + 2.0 * ls))
    _, d_feats = model.backward(tape, -r * inv_var, 1.0 - r * r * inv_var, need_weights=False)
    return total, d_feats[:, model.cond_slice()].sum(axis=0)


class Adam:
    """Adam with bias correction over a dict of arrays, updated in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ----------------------------------------------------------------- training
@dataclass
class TransitionSet:
    """All (trajectory, step) transitions of a dataset, stacked for batching."""

    states: np.ndarray  # (n_traj, n_times, n)
    cond: np.ndarray  # (n_traj, cond_dim)
    t_norm: np.ndarray  # (n_times,)
    seeds: list[int]
    memory: int = 4
    pairs: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        n_traj, n_times = self.states.shape[:2]
        ti, kk = np.meshgrid(np.arange(n_traj), np.arange(n_times - 1), indexing="ij")
        self.pairs = np.stack([ti.ravel(), kk.ravel()], axis=1)

    @classmethod
    def from_dataset(cls, ds: Dataset, memory: int = 4) -> "TransitionSet":
        states = ds.state_array()
        horizon = ds.params.horizon
        t_norm = np.arange(states.shape[1]) * ds.params.dt / horizon
        return cls(states, ds.conditioning, t_norm, [tr.seed for tr in ds.trajectories], memory)

    def __len__(self) -> int:
        return len(self.pairs)

    def batch(self, idx: np.ndarray, tau: np.ndarray, xi: np.ndarray, sigma_bridge: float):
        ti, k = self.pairs[idx, 0], self.pairs[idx, 1]
        x_k = self.states[ti, k]
        x_k1 = self.states[ti, k + 1]
        x_tau = _bridge(x_k, x_k1, tau[:, None], sigma_bridge, xi)
        feats = batch_features(self.states, ti, k, x_tau, tau, self.cond[ti], self.t_norm[k], self.memory)
        return feats, x_k1


def _iter_batches(n: int, batch: int, order: np.ndarray) -> Iterator[np.ndarray]:
    for start in range(0, n, batch):
        yield order[start : start + batch]


def evaluate_loss(model: FlowModel, data: TransitionSet, config: TrainConfig, seed: int) -> float:
    """Mean loss over all transitions with a fixed, seeded draw of tau and bridge noise."""
    if len(data) == 0:
        return float("nan")
    rng = np.random.default_rng(seed)
    tau = rng.uniform(0.0, 1.0, len(data))
    xi = rng.standard_normal((len(data), model.state_dim))
    total = 0.0
    for idx in _iter_batches(len(data), 4096, np.arange(len(data))):
        feats, target = data.batch(idx, tau[idx], xi[idx], config.sigma_bridge)
        mu, ls = model.forward(feats)
        total += _loss_and_output_grads(mu, ls, target, config.lambda_mse)[0] * len(idx)
    return total / len(data)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    initial_train_loss: float = float("nan")

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss"]
        for i, (a, b) in enumerate(zip(self.train_loss, self.val_loss), start=1):
            lines.append(f"{i},{a!r},{b!r}")
        return "\n".join(lines) + "\n"


def train(
    model: FlowModel,
    dataset: Dataset,
    config: TrainConfig,
    val_dataset: Dataset | None = None,
    fit_norm: bool = True,
    progress: bool = False,
) -> tuple[FlowModel, TrainHistory]:
    """Adam training on bridge-interpolated transitions.

    Each epoch shuffles all (trajectory, step) pairs with a seeded generator and
    draws one tau ~ U(0, 1) per pair. Returns the trained model (a copy) and
    per-epoch mean train loss and validation loss.
    """
    if dataset.cond_dim != model.cond_dim:
        raise DimensionError(f"dataset cond_dim {dataset.cond_dim} != model cond_dim {model.cond_dim}")
    if len(dataset) == 0:
        raise ConfigError("empty training dataset")
    model = model.copy()
    if model.scenario is None:
        model.scenario = dataset.scenario.value
    data = TransitionSet.from_dataset(dataset, model.memory)
    val = TransitionSet.from_dataset(val_dataset, model.memory) if val_dataset is not None and len(val_dataset) else None
    rng = np.random.default_rng(config.seed)

    if fit_norm:
        sub = rng.permutation(len(data))[: min(len(data), 20000)]
        sub.sort()
        feats, target = data.batch(sub, np.zeros(len(sub)), np.zeros((len(sub), model.state_dim)), 0.0)
        model.fit_normalization(feats, target)
        model.bridge_sigma = config.sigma_bridge

    opt = Adam(model.params, config.lr, config.beta1, config.beta2, config.eps)
    history = TrainHistory()
    history.initial_train_loss = evaluate_loss(model, data, config, config.seed + 1)
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        tau = rng.uniform(0.0, 1.0, len(data))
        xi = rng.standard_normal((len(data), model.state_dim))
        running = 0.0
        for b, idx in enumerate(_iter_batches(len(data), config.batch, order)):
            feats, target = data.batch(idx, tau[idx], xi[idx], config.sigma_bridge)
            mu, ls, tape = model.forward(feats, cache=True)
            loss, _, d_mu, d_ls = _loss_and_output_grads(mu, ls, target, config.lambda_mse)
            if not math.isfinite(loss):
                seeds = sorted({data.seeds[i] for i in data.pairs[idx, 0]})
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}; trajectory seeds {seeds[:8]}")
            grads, _ = model.backward(tape, d_mu, d_ls)
            opt.step(model.params, grads)
            running += loss * len(idx)
        history.train_loss.append(running / len(data))
        history.val_loss.append(evaluate_loss(model, val, config, config.seed + 2) if val else float("nan"))
        msg = f"epoch {epoch + 1}/{config.epochs}: train {history.train_loss[-1]:.4f} val {history.val_loss[-1]:.4f}"
        logger.info(msg)
        if progress:
            print(msg, flush=True)
    return model, history


# --------------------------------------------------------------- checkpoint
_NORM_KEYS = ("in_shift", "in_scale", "out_shift", "out_scale")


def save_checkpoint(model: FlowModel, path: str | Path, extra: dict[str, Any] | None = None) -> None:
    """Write magic, length-prefixed JSON header, then float64 LE arrays in header order."""
    order = list(_NORM_KEYS) + model.param_names()
    arrays = [getattr(model, k) if k in _NORM_KEYS else model.params[k] for k in order]
    header = {
        "format": "dfdi-checkpoint/1",
        "model": model.metadata(),
        "arrays": [{"name": k, "shape": list(a.shape)} for k, a in zip(order, arrays)],
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[FlowModel, dict[str, Any]]:
    from .errors import HeaderError, TruncatedError

    blob = Path(path).read_bytes()
    header, offset = read_header(blob, CHECKPOINT_MAGIC)
    try:
        meta = header["model"]
        model = FlowModel(meta["cond_dim"], tuple(meta["hidden_dims"]), meta["memory"], meta["state_dim"], meta["scenario"])
        model.bridge_sigma = float(meta.get("bridge_sigma", 0.0))
        specs = header["arrays"]
    except (KeyError, TypeError, ValueError) as exc:
        raise HeaderError(f"incomplete checkpoint header: {exc}") from exc
    expected_names = list(_NORM_KEYS) + model.param_names()
    if [s["name"] for s in specs] != expected_names:
        raise DimensionError("checkpoint array list does not match the model layout")
    total = sum(int(np.prod(s["shape"])) for s in specs) * 8
    if len(blob) - offset != total:
        raise TruncatedError(f"checkpoint payload has {len(blob) - offset} bytes, expected {total}")
    pos = offset
    for s in specs:
        shape = tuple(s["shape"])
        ref = getattr(model, s["name"]) if s["name"] in _NORM_KEYS else model.params[s["name"]]
        if ref.shape != shape:
            raise DimensionError(f"array {s['name']} has shape {shape}, expected {ref.shape}")
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(float)
        pos += count * 8
        if s["name"] in _NORM_KEYS:
            setattr(model, s["name"], arr)
        else:
            model.params[s["name"]] = arr
    return model, header.get("extra", {})


def model_for_scenario(scenario: FaultKind | str, seed: int = 0, hidden_dims=(256, 256), memory: int = 4) -> FlowModel:
    scenario = FaultKind(scenario)
    return FlowModel(COND_DIM[scenario], hidden_dims, memory, STATE_DIM, scenario, seed)
