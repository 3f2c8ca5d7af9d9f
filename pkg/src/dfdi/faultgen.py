"""Fault-profile sampling and dataset generation / serialization.

Binary dataset layout (all integers and floats little-endian)::

    b"DFDIDS01"                     8-byte magic
    uint64                          header length in bytes
    JSON header                     config, scenario, params, dims, per-trajectory metadata
    float64 payload                 per trajectory: [conditioning | states row-major]
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .dynamics import (
    N_SENSORS,
    N_WHEELS,
    STATE_DIM,
    FaultKind,
    FaultProfile,
    SpacecraftParams,
    Trajectory,
    default_initial_state,
    derive_seed,
    run_parallel,
    simulate_trajectory,
)
from .errors import (
    ConfigError,
    DimensionError,
    HeaderError,
    IntegrationError,
    ScenarioMismatchError,
    TruncatedError,
)

DATASET_MAGIC = b"DFDIDS01"
COND_DIM = {FaultKind.TYPE1: N_WHEELS + N_WHEELS, FaultKind.TYPE2: N_WHEELS + N_SENSORS}


@dataclass
class DatasetConfig:
    """Sampling law and sizes for a training/validation dataset."""

    n_train: int = 1000
    n_val: int = 200
    scenario: FaultKind = FaultKind.TYPE2
    noise_std_range: tuple[float, float] = (0.001, 0.002)
    init_std: float = 0.01
    nominal_prob: float = 0.325
    beta_eta: tuple[float, float] = (0.7, 0.7)
    beta_gamma: tuple[float, float] = (1.0, 1.0)
    onset_range: tuple[float, float] = (8.0, 42.0)
    base_seed: int = 0

    def __post_init__(self) -> None:
        self.scenario = FaultKind(self.scenario)
        self.noise_std_range = tuple(float(v) for v in self.noise_std_range)
        self.beta_eta = tuple(float(v) for v in self.beta_eta)
        self.beta_gamma = tuple(float(v) for v in self.beta_gamma)
        self.onset_range = tuple(float(v) for v in self.onset_range)
        self.validate()

    def validate(self, horizon: float | None = None) -> None:
        if self.scenario is FaultKind.NOMINAL:
            raise ConfigError("dataset scenario must be type1 or type2")
        if self.n_train < 0 or self.n_val < 0:
            raise ConfigError("dataset sizes must be nonnegative")
        if not 0.0 <= self.nominal_prob <= 1.0:
            raise ConfigError("nominal_prob must lie in [0, 1]")
        if min(self.beta_eta + self.beta_gamma) <= 0:
            raise ConfigError("Beta shape parameters must be positive")
        lo, hi = self.noise_std_range
        if not 0 <= lo <= hi:
            raise ConfigError("noise_std_range must satisfy 0 <= lo <= hi")
        if self.init_std < 0:
            raise ConfigError("init_std must be nonnegative")
        t_lo, t_hi = self.onset_range
        if not 0 <= t_lo < t_hi:
            raise ConfigError("onset_range must satisfy 0 <= lo < hi")
        if horizon is not None and self.scenario is FaultKind.TYPE1 and t_hi > horizon:
            raise ConfigError(f"onset_range upper end {t_hi} exceeds horizon {horizon}")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["scenario"] = self.scenario.value
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DatasetConfig":
        return cls(**d)


@dataclass
class Dataset:
    """Trajectories with their conditioning vectors.

    The first ``n_train`` trajectories form the training split and the rest
    the validation split.
    """

    trajectories: list[Trajectory]
    conditioning: np.ndarray
    scenario: FaultKind
    config: DatasetConfig
    params: SpacecraftParams = field(default_factory=SpacecraftParams)
    n_train: int | None = None

    def __post_init__(self) -> None:
        self.scenario = FaultKind(self.scenario)
        cd = COND_DIM[self.scenario]
        self.conditioning = np.asarray(self.conditioning, dtype=float).reshape(-1, cd)
        if len(self.conditioning) != len(self.trajectories):
            raise DimensionError("one conditioning vector per trajectory required")
        if self.n_train is None:
            self.n_train = len(self.trajectories)

    @property
    def cond_dim(self) -> int:
        return COND_DIM[self.scenario]

    def __len__(self) -> int:
        return len(self.trajectories)

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset(
            [self.trajectories[i] for i in idx],
            self.conditioning[idx] if idx else np.zeros((0, self.cond_dim)),
            self.scenario,
            self.config,
            self.params,
        )

    def train_split(self) -> "Dataset":
        return self.subset(range(self.n_train))

    def val_split(self) -> "Dataset":
        return self.subset(range(self.n_train, len(self)))

    def state_array(self) -> np.ndarray:
        """All states stacked as (n_traj, n_times, 10); requires equal lengths."""
        if not self.trajectories:
            return np.zeros((0, self.params.n_steps + 1, STATE_DIM))
        lengths = {len(tr) for tr in self.trajectories}
        if len(lengths) != 1:
            raise DimensionError(f"ragged trajectories: lengths {sorted(lengths)}")
        return np.stack([tr.states for tr in self.trajectories])


def sample_profile(config: DatasetConfig, rng: np.random.Generator) -> FaultProfile:
    """Draw one fault profile: each channel nominal with ``nominal_prob``, else Beta-distributed."""
    p = config.nominal_prob
    nominal_eta = rng.random(N_WHEELS) < p
    eta = np.where(nominal_eta, 1.0, rng.beta(*config.beta_eta, size=N_WHEELS))
    if config.scenario is FaultKind.TYPE1:
        onset = rng.uniform(*config.onset_range, size=N_WHEELS)
        return FaultProfile.type1(eta, onset)
    nominal_gamma = rng.random(N_SENSORS) < p
    gamma = np.where(nominal_gamma, 1.0, rng.beta(*config.beta_gamma, size=N_SENSORS))
    if np.all(eta == 1) and np.all(gamma == 1):
        return FaultProfile.nominal()
    return FaultProfile.type2(eta, gamma)


def _generate_member(args: tuple) -> tuple[Trajectory, np.ndarray]:
    config, params, index = args
    seed = derive_seed(config.base_seed, index)
    rng = np.random.default_rng([seed, 1])
    profile = sample_profile(config, rng)
    noise_std = float(rng.uniform(*config.noise_std_range))
    x0 = default_initial_state(params)
    if config.init_std > 0:
        x0 = x0 + config.init_std * np.random.default_rng([seed, 0]).standard_normal(STATE_DIM)
    try:
        traj = simulate_trajectory(x0, profile, params, noise_std, seed, noise_std)
    except IntegrationError as exc:
        raise IntegrationError(f"trajectory {index} (seed {seed}): {exc}") from exc
    return traj, profile.conditioning(config.scenario, params.horizon)


def replay_trajectory(ds: Dataset, index: int) -> Trajectory:
    """Re-simulate stored trajectory ``index`` to recover its sensor readings and controls.

    Dataset files keep states only; the stored seed, initial state, profile
    and noise level determine the run, and the replayed states are checked
    against the stored ones bit for bit.
    """
    tr = ds.trajectories[index]
    out = simulate_trajectory(tr.states[0], tr.profile, ds.params, tr.noise_std, tr.seed, tr.noise_std)
    if not np.array_equal(out.states, tr.states):
        raise DimensionError(f"trajectory {index} does not replay to the stored states")
    return out


def generate_dataset(config: DatasetConfig, params: SpacecraftParams, workers: int = 1) -> Dataset:
    """Simulate ``n_train + n_val`` trajectories, one sampled profile each.

    Each trajectory gets a noise level drawn uniformly from ``noise_std_range``,
    used for both process and measurement noise.
    """
    config.validate(params.horizon)
    n = config.n_train + config.n_val
    jobs = [(config, params, i) for i in range(n)]
    results = run_parallel(_generate_member, jobs, workers)
    trajs = [r[0] for r in results]
    cond = np.array([r[1] for r in results]).reshape(n, COND_DIM[config.scenario])
    return Dataset(trajs, cond, config.scenario, config, params, config.n_train)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Write ``ds`` in the binary dataset format (bit-exact round trip)."""
    n_times = ds.params.n_steps + 1
    states = ds.state_array() if len(ds) else np.zeros((0, n_times, STATE_DIM))
    if len(ds) and states.shape[1] != n_times:
        raise DimensionError(f"trajectory length {states.shape[1]} != {n_times} from params")
    header = {
        "format": "dfdi-dataset/1",
        "scenario": ds.scenario.value,
        "n_traj": len(ds),
        "n_train": ds.n_train,
        "n_times": n_times,
        "state_dim": STATE_DIM,
        "cond_dim": ds.cond_dim,
        "config": ds.config.to_dict(),
        "params": ds.params.to_dict(),
        "trajectories": [
            {"seed": tr.seed, "noise_std": tr.noise_std, "profile": tr.profile.to_dict()}
            for tr in ds.trajectories
        ],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    rows = np.concatenate([ds.conditioning.reshape(len(ds), ds.cond_dim), states.reshape(len(ds), n_times * STATE_DIM)], axis=1)
    payload = np.ascontiguousarray(rows, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(payload)


def read_header(blob: bytes, magic: bytes) -> tuple[dict[str, Any], int]:
    """Parse magic + length-prefixed JSON header; return (header, payload offset)."""
    if len(blob) < 16 or blob[:8] != magic:
        raise HeaderError(f"bad magic bytes {blob[:8]!r}, expected {magic!r}")
    (n,) = struct.unpack("<Q", blob[8:16])
    if 16 + n > len(blob):
        raise TruncatedError("file ends inside the header")
    try:
        header = json.loads(blob[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"unparsable header: {exc}") from exc
    if not isinstance(header, dict):
        raise HeaderError("header is not a JSON object")
    return header, 16 + n


def load_dataset(path: str | Path, expect_scenario: FaultKind | str | None = None) -> Dataset:
    """Read a dataset file, validating magic, dimensions and payload size."""
    blob = Path(path).read_bytes()
    header, offset = read_header(blob, DATASET_MAGIC)
    try:
        scenario = FaultKind(header["scenario"])
        n_traj = int(header["n_traj"])
        n_times = int(header["n_times"])
        state_dim = int(header["state_dim"])
        cond_dim = int(header["cond_dim"])
        config = DatasetConfig.from_dict(header["config"])
        params = SpacecraftParams.from_dict(header["params"])
        meta = header["trajectories"]
    except (KeyError, TypeError, ValueError) as exc:
        raise HeaderError(f"incomplete header: {exc}") from exc
    if expect_scenario is not None and FaultKind(expect_scenario) is not scenario:
        raise ScenarioMismatchError(f"file holds {scenario.value}, expected {FaultKind(expect_scenario).value}")
    if state_dim != STATE_DIM or cond_dim != COND_DIM[scenario] or n_times != params.n_steps + 1:
        raise DimensionError(
            f"header dims (state {state_dim}, cond {cond_dim}, times {n_times}) inconsistent with scenario/params"
        )
    if len(meta) != n_traj:
        raise DimensionError(f"{len(meta)} trajectory records for n_traj={n_traj}")
    row = cond_dim + n_times * state_dim
    expected = n_traj * row * 8
    if len(blob) - offset != expected:
        raise TruncatedError(f"payload has {len(blob) - offset} bytes, expected {expected}")
    rows = np.frombuffer(blob, dtype="<f8", offset=offset).reshape(n_traj, row).astype(float)
    cond = rows[:, :cond_dim].copy()
    states = rows[:, cond_dim:].reshape(n_traj, n_times, state_dim)
    times = np.arange(n_times) * params.dt
    trajs = []
    for i, m in enumerate(meta):
        profile = FaultProfile.from_dict(m["profile"])
        trajs.append(Trajectory(times, states[i].copy(), profile, int(m["seed"]), noise_std=float(m["noise_std"])))
    return Dataset(trajs, cond, scenario, config, params, int(header.get("n_train", n_traj)))
