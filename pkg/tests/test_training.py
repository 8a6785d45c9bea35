import json

import numpy as np
import pytest

from hetsim.data import PolicyRegime, generate_dataset, sample_agents, synthesize_prop1_dataset
from hetsim.envs import EnvKind, benchmark_agents
from hetsim.factor_model import FactorizedModel
from hetsim.training import (CheckpointError, Ensemble, TrainConfig, load_ensemble, load_model, rank_select,
                             save_ensemble, save_model, train_ensemble, train_model)

MC = EnvKind.MOUNTAIN_CAR
CP = EnvKind.CARTPOLE


@pytest.fixture(scope="module")
def mc_data():
    agents = sample_agents(MC, 6, np.random.default_rng(0), include=benchmark_agents(MC)[:2])
    return generate_dataset(MC, agents, PolicyRegime.random(), 0)


@pytest.fixture(scope="module")
def cp_data():
    return generate_dataset(CP, sample_agents(CP, 5, np.random.default_rng(0)), PolicyRegime.pure_eps(0.2), 0)


def small(env, **kw):
    return TrainConfig.for_env(env, hidden=(16,), epochs=kw.pop("epochs", 5), **kw)


def test_config_validation():
    for bad in (dict(epochs=0), dict(batch_size=0), dict(lr=0.0), dict(rank=0)):
        with pytest.raises(ValueError):
            TrainConfig.for_env(MC, **bad)
    cfg = TrainConfig.for_env(CP)
    assert (cfg.rank, cfg.batch_size, cfg.epochs, cfg.lr) == (5, 64, 300, 1e-3)
    assert TrainConfig.for_env(MC).batch_size == 512
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.digest() != TrainConfig.for_env(CP, seed=1).digest()


def test_training_reduces_loss(mc_data):
    _, hist = train_model(mc_data, small(MC, epochs=20))
    assert len(hist) == 20 and hist[-1] < hist[0]


def test_training_is_deterministic(cp_data):
    a, ha = train_model(cp_data, small(CP))
    b, hb = train_model(cp_data, small(CP))
    assert ha == hb
    assert all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


def test_env_mismatch_rejected(mc_data):
    with pytest.raises(ValueError):
        train_model(mc_data, small(CP))


def test_prop1_data_is_learnable_at_rank_three():
    ds = synthesize_prop1_dataset(np.linspace(0.0001, 0.0035, 8), seed=0, steps=200)
    _, hist = train_model(ds, TrainConfig.for_env(MC, epochs=60, batch_size=128))
    assert hist[-1] < 1e-5


def test_single_member_ensemble_equals_model(cp_data):
    cfg = small(CP, seed=3)
    ens = train_ensemble(cp_data, cfg, members=1)
    model, _ = train_model(cp_data, cfg)
    s = np.random.default_rng(0).normal(scale=0.05, size=(30, 4))
    np.testing.assert_array_equal(ens.predict_next(2, s, 1), model.predict_next(2, s, 1))


def test_threaded_ensemble_bitwise_equal(cp_data):
    cfg = small(CP, epochs=2)
    seq = train_ensemble(cp_data, cfg, members=3)
    par = train_ensemble(cp_data, cfg, members=3, threads=3)
    for a, b in zip(seq.members, par.members):
        assert all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    assert not np.array_equal(seq.members[0].agent_table.values, seq.members[1].agent_table.values)
    assert [m.meta["config"]["seed"] for m in seq.members] == [0, 1, 2]


def test_ensemble_rejects_mixed_members():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        Ensemble([FactorizedModel.init(MC, 3, 3, rng, (8,)), FactorizedModel.init(MC, 4, 3, rng, (8,))])
    with pytest.raises(ValueError):
        Ensemble([])


def test_checkpoint_round_trip(tmp_path, cp_data):
    model, _ = train_model(cp_data, small(CP))
    save_model(model, tmp_path / "m.json", provenance={"cmd": "test"})
    back = load_model(tmp_path / "m.json", expected_env="cartpole")
    rng = np.random.default_rng(1)
    s, n, k = rng.normal(size=(100, 4)), rng.integers(5, size=100), rng.integers(2, size=100)
    assert np.array_equal(model.predict_next(n, s, k), back.predict_next(n, s, k))
    assert back.meta["config_digest"] == model.meta["config_digest"]
    assert back.meta["dataset"]["n_agents"] == 5


def test_checkpoint_env_guard(tmp_path, cp_data):
    model, _ = train_model(cp_data, small(CP, epochs=1))
    save_model(model, tmp_path / "m.json")
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "m.json", expected_env=MC)


def test_checkpoint_version_and_corruption(tmp_path, cp_data):
    model, _ = train_model(cp_data, small(CP, epochs=1))
    path = tmp_path / "m.json"
    save_model(model, path)
    d = json.loads(path.read_text())
    d["format_version"] = 7
    path.write_text(json.dumps(d))
    with pytest.raises(CheckpointError):
        load_model(path)
    path.write_text("{not json")
    with pytest.raises(CheckpointError):
        load_model(path)


def test_ensemble_round_trip(tmp_path, mc_data):
    ens = train_ensemble(mc_data, small(MC, epochs=2), members=2)
    save_ensemble(ens, tmp_path / "e.json")
    back = load_ensemble(tmp_path / "e.json", expected_env=MC)
    s = np.random.default_rng(0).uniform(-1, 0.4, size=(50, 2))
    assert np.array_equal(ens.predict_next(1, s, 2), back.predict_next(1, s, 2))
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "e.json")


def test_rank_select_prefers_sufficient_rank():
    ds = synthesize_prop1_dataset(np.linspace(0.0001, 0.0035, 6), seed=1, steps=150)
    sel = rank_select(ds, [1, 3], TrainConfig.for_env(MC, epochs=40, batch_size=128))
    assert set(sel.val_mse) == {1, 3}
    assert sel.rank == 3 and sel.val_mse[3] < sel.val_mse[1]
