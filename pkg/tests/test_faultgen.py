import json
import struct

import numpy as np
import pytest

from dfdi.dynamics import FaultKind, SpacecraftParams
from dfdi.errors import ConfigError, DimensionError, HeaderError, ScenarioMismatchError, TruncatedError
from dfdi.faultgen import (
    DATASET_MAGIC,
    DatasetConfig,
    generate_dataset,
    load_dataset,
    replay_trajectory,
    sample_profile,
    save_dataset,
)

TINY = SpacecraftParams(dt=0.05, horizon=1.0)


def tiny_config(**kw):
    base = dict(n_train=3, n_val=2, scenario="type2", onset_range=(0.2, 0.8), base_seed=4)
    base.update(kw)
    return DatasetConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        DatasetConfig(nominal_prob=1.5)
    with pytest.raises(ConfigError):
        DatasetConfig(beta_eta=(0.0, 1.0))
    with pytest.raises(ConfigError):
        DatasetConfig(onset_range=(5.0, 5.0))
    with pytest.raises(ConfigError):
        DatasetConfig(scenario="nominal")
    with pytest.raises(ConfigError):
        tiny_config(scenario="type1", onset_range=(0.2, 3.0)).validate(horizon=1.0)
    tiny_config(onset_range=(0.2, 3.0)).validate(horizon=1.0)  # type2 has no onsets


def test_all_nominal_channels_give_nominal_profile(rng):
    prof = sample_profile(DatasetConfig(nominal_prob=1.0), rng)
    assert prof.kind is FaultKind.NOMINAL


def test_gamma_mixture_mean(rng):
    cfg = DatasetConfig()
    g = np.array([sample_profile(cfg, rng).gamma for _ in range(10_000)]).ravel()
    expected = cfg.nominal_prob + (1 - cfg.nominal_prob) * 0.5
    assert g.mean() == pytest.approx(expected, rel=0.01)


def test_eta_beta_moments(rng):
    cfg = DatasetConfig(nominal_prob=0.0)
    eta = np.array([sample_profile(cfg, rng).eta for _ in range(10_000)]).ravel()
    a = b = 0.7
    assert eta.mean() == pytest.approx(0.5, abs=0.01)
    assert eta.var() == pytest.approx(a * b / ((a + b) ** 2 * (a + b + 1)), rel=0.05)


def test_type1_onsets_in_range(rng):
    cfg = DatasetConfig(scenario="type1")
    for _ in range(200):
        prof = sample_profile(cfg, rng)
        assert np.all((prof.onset_times >= 8) & (prof.onset_times <= 42))
        assert np.all((prof.eta >= 0) & (prof.eta <= 1))
        assert np.all(prof.gamma == 1)


@pytest.mark.parametrize("scenario,cond_dim", [("type1", 8), ("type2", 11)])
def test_conditioning_dimension(scenario, cond_dim):
    ds = generate_dataset(tiny_config(scenario=scenario), TINY)
    assert ds.conditioning.shape == (5, cond_dim)
    assert len(ds.train_split()) == 3 and len(ds.val_split()) == 2


def test_type1_conditioning_normalizes_onsets():
    ds = generate_dataset(tiny_config(scenario="type1"), TINY)
    for tr, c in zip(ds.trajectories, ds.conditioning):
        np.testing.assert_array_equal(c[:4], tr.profile.eta)
        np.testing.assert_allclose(c[4:], tr.profile.onset_times / TINY.horizon)


def test_noise_levels_in_range():
    ds = generate_dataset(tiny_config(n_train=10), TINY)
    levels = [tr.noise_std for tr in ds.trajectories]
    assert min(levels) >= 0.001 and max(levels) <= 0.002


def test_empty_dataset_round_trip(tmp_path):
    ds = generate_dataset(tiny_config(n_train=0, n_val=0), TINY)
    save_dataset(ds, tmp_path / "e.bin")
    back = load_dataset(tmp_path / "e.bin")
    assert len(back) == 0


def test_round_trip_bit_exact(tmp_path):
    ds = generate_dataset(tiny_config(scenario="type1"), TINY)
    save_dataset(ds, tmp_path / "d.bin")
    back = load_dataset(tmp_path / "d.bin")
    assert back.scenario is FaultKind.TYPE1 and back.n_train == 3
    np.testing.assert_array_equal(back.conditioning, ds.conditioning)
    for a, b in zip(ds.trajectories, back.trajectories):
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.times, b.times)
        assert a.seed == b.seed and a.noise_std == b.noise_std
        np.testing.assert_array_equal(a.profile.onset_times, b.profile.onset_times)


def test_regeneration_is_byte_identical(tmp_path):
    for name in ("a.bin", "b.bin"):
        save_dataset(generate_dataset(tiny_config(), TINY), tmp_path / name)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_parallel_generation_matches_serial():
    a = generate_dataset(tiny_config(), TINY, workers=1)
    b = generate_dataset(tiny_config(), TINY, workers=2)
    for ta, tb in zip(a.trajectories, b.trajectories):
        np.testing.assert_array_equal(ta.states, tb.states)


@pytest.fixture
def saved(tmp_path):
    path = tmp_path / "d.bin"
    save_dataset(generate_dataset(tiny_config(), TINY), path)
    return path


def test_bad_magic(saved):
    blob = bytearray(saved.read_bytes())
    blob[:8] = b"XXXXXXXX"
    saved.write_bytes(bytes(blob))
    with pytest.raises(HeaderError):
        load_dataset(saved)


def test_truncated_payload(saved):
    blob = saved.read_bytes()
    saved.write_bytes(blob[:-8])
    with pytest.raises(TruncatedError):
        load_dataset(saved)


def test_scenario_mismatch(saved):
    with pytest.raises(ScenarioMismatchError):
        load_dataset(saved, expect_scenario="type1")


def _rewrite_header(path, mutate):
    blob = path.read_bytes()
    (n,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + n])
    mutate(header)
    head = json.dumps(header).encode()
    path.write_bytes(DATASET_MAGIC + struct.pack("<Q", len(head)) + head + blob[16 + n :])


def test_dimension_mismatch(saved):
    _rewrite_header(saved, lambda h: h.update(state_dim=9))
    with pytest.raises(DimensionError):
        load_dataset(saved)


def test_malformed_header(saved):
    _rewrite_header(saved, lambda h: h.pop("config"))
    with pytest.raises(HeaderError):
        load_dataset(saved)


def test_replay_recovers_measurements(tmp_path):
    ds = generate_dataset(tiny_config(), TINY)
    save_dataset(ds, tmp_path / "d.bin")
    back = load_dataset(tmp_path / "d.bin")
    assert back.trajectories[1].measurements is None
    tr = replay_trajectory(back, 1)
    np.testing.assert_array_equal(tr.measurements, ds.trajectories[1].measurements)
    back.trajectories[1].states[-1, 0] += 1e-9
    with pytest.raises(DimensionError):
        replay_trajectory(back, 1)
