import numpy as np
import pytest
from scipy.stats import chisquare

from hetsim import envs
from hetsim.envs import AgentParams, EnvKind
from hetsim.factor_model import FactorizedModel
from hetsim.nn import DenseLayer, EmbeddingTable, Mlp
from hetsim.planner import (EnsembleOracle, MpcConfig, PlanningError, TrueEnvOracle, choose, mpc_select_action,
                            run_episode, sample_candidates, score_sequence)
from hetsim.training import Ensemble

MC = EnvKind.MOUNTAIN_CAR
CP = EnvKind.CARTPOLE


def doubling_model():
    """Rank-1 toy: delta = s for action 2, 0 for action 1, -s for action 0."""
    return FactorizedModel(MC, 1, EmbeddingTable([[1.0]]), EmbeddingTable([[-1.0], [0.0], [1.0]]),
                           Mlp([DenseLayer(np.eye(2), np.zeros(2))]))


def test_config_validation():
    assert (MpcConfig().horizon, MpcConfig().candidates) == (50, 1000)
    with pytest.raises(ValueError):
        MpcConfig(horizon=0)
    with pytest.raises(ValueError):
        MpcConfig(candidates=0)
    with pytest.raises(ValueError):
        MpcConfig(tie_break="random")


def test_sample_candidates_shape_and_uniformity():
    one = sample_candidates(MC, MpcConfig(horizon=1, candidates=1), np.random.default_rng(0))
    assert one.shape == (1, 1)
    draws = sample_candidates(MC, MpcConfig(horizon=100, candidates=1000), np.random.default_rng(0))
    counts = np.bincount(draws.ravel(), minlength=3)
    assert chisquare(counts).pvalue > 1e-3
    again = sample_candidates(MC, MpcConfig(horizon=100, candidates=1000), np.random.default_rng(0))
    assert np.array_equal(draws, again)


def test_true_env_score_past_goal():
    oracle = TrueEnvOracle(MC, AgentParams.mountain_car(0.0025))
    for k in range(3):
        assert score_sequence(oracle, [0.55, 0.0], [k]) == 1.0


def test_hand_built_toy_scores():
    oracle = EnsembleOracle(Ensemble([doubling_model()]), 0)
    s0 = [0.3, 0.1]
    # (0.3,0.1) -> (0.6,0.2) -> (1.2,0.4): two goal steps
    assert score_sequence(oracle, s0, [2, 2]) == 2.0
    assert score_sequence(oracle, s0, [1, 1]) == -2.0
    assert score_sequence(oracle, s0, [1, 2]) == 0.0
    assert score_sequence(oracle, s0, [0, 2]) == -2.0


def test_identical_members_score_like_one():
    rng = np.random.default_rng(0)
    m = FactorizedModel.init(CP, 2, 3, rng, hidden=(16,))
    s0 = np.array([0.01, 0.0, -0.02, 0.03])
    seq = rng.integers(2, size=20)
    one = score_sequence(EnsembleOracle(Ensemble([m]), 1), s0, seq)
    many = score_sequence(EnsembleOracle(Ensemble([m] * 4), 1), s0, seq)
    assert one == many


def test_imagined_rollout_is_iterated_prediction():
    rng = np.random.default_rng(1)
    members = [FactorizedModel.init(MC, 3, 3, rng, hidden=(8,)) for _ in range(2)]
    oracle = EnsembleOracle(Ensemble(members), 2)
    seqs = rng.integers(3, size=(4, 6))
    s0 = np.array([-0.5, 0.0])
    traj = oracle.rollout(s0, seqs)
    for m, model in enumerate(members):
        S = np.tile(s0, (4, 1))
        for t in range(6):
            S = model.predict_next(2, S, seqs[:, t])
            np.testing.assert_array_equal(traj[m, :, t], S)
        np.testing.assert_allclose(traj[m, 0], model.rollout(2, s0, seqs[0]), rtol=1e-12)


def test_one_step_greedy_with_exhaustive_candidates():
    g = 0.0025
    params = AgentParams.mountain_car(g)
    s = np.array([0.49, 0.0098])
    reach = [envs.step(MC, params, s, k, 0).reward for k in range(3)]
    assert reach == [-1.0, -1.0, 1.0]
    for mode in ("index", "reach"):
        k = mpc_select_action(TrueEnvOracle(MC, params), MpcConfig(1, 60, mode), s, np.random.default_rng(0))
        assert k == 2


def test_all_tied_index_mode_returns_first_candidate():
    params = AgentParams.mountain_car(0.0025)
    s = np.array([0.49, 0.02])
    cfg = MpcConfig(horizon=1, candidates=30, tie_break="index")
    seqs = sample_candidates(MC, cfg, np.random.default_rng(4))
    assert all(envs.step(MC, params, s, k, 0).reward == 1.0 for k in range(3))
    assert mpc_select_action(TrueEnvOracle(MC, params), cfg, s, np.random.default_rng(4)) == seqs[0, 0]


def test_partial_ties_go_to_lowest_index():
    scores = np.array([1.0, 3.0, 2.0, 3.0])
    traj = np.zeros((1, 4, 2, 2))
    assert choose(scores, traj, [0, 0], "reach") == 1
    assert choose(scores, traj, [0, 0], "index") == 1


def test_flat_scores_prefer_reach():
    traj = np.zeros((1, 3, 2, 2))
    traj[0, 1] = [[0.1, 0.0], [0.3, 0.0]]
    traj[0, 2] = [[0.05, 0.0], [0.1, 0.0]]
    assert choose(np.full(3, -2.0), traj, [0, 0], "reach") == 1
    assert choose(np.full(3, -2.0), traj, [0, 0], "index") == 0


def test_all_invalid_raises():
    with pytest.raises(PlanningError):
        choose(np.full(3, -np.inf), np.zeros((1, 3, 1, 2)), [0, 0], "index")


def test_diverging_member_scored_invalid():
    blowup = FactorizedModel(MC, 1, EmbeddingTable([[1e200]]), EmbeddingTable([[1e200]] * 3),
                             Mlp([DenseLayer(np.eye(2), np.zeros(2))]))
    oracle = EnsembleOracle(Ensemble([blowup]), 0)
    assert score_sequence(oracle, [0.3, 0.1], [1, 1]) == -np.inf


@pytest.mark.parametrize("shift, scale", [(5.0, 1.0), (0.0, 3.0), (-2.5, 0.5)])
def test_argmax_invariance(monkeypatch, shift, scale):
    rng = np.random.default_rng(0)
    members = [FactorizedModel.init(MC, 1, 3, rng, hidden=(8,)) for _ in range(2)]
    for m in members:
        m.agent_table.values *= 50
    oracle = EnsembleOracle(Ensemble(members), 0)
    cfg = MpcConfig(horizon=10, candidates=200, tie_break="index")
    states = [np.array([0.2, 0.03]), np.array([0.4, 0.01]), np.array([-0.5, 0.0])]
    base = [mpc_select_action(oracle, cfg, s, np.random.default_rng(i)) for i, s in enumerate(states)]
    original = envs.reward_batch
    monkeypatch.setattr(envs, "reward_batch", lambda kind, s: scale * original(kind, s) + shift)
    moved = [mpc_select_action(oracle, cfg, s, np.random.default_rng(i)) for i, s in enumerate(states)]
    assert base == moved


def test_planning_is_deterministic():
    oracle = TrueEnvOracle(CP, AgentParams.cartpole(10, 0.5))
    cfg = MpcConfig(horizon=10, candidates=50)
    s = np.array([0.0, 0.1, 0.05, -0.1])
    a = [mpc_select_action(oracle, cfg, s, np.random.default_rng(9)) for _ in range(3)]
    assert len(set(a)) == 1


def test_ensemble_oracle_rejects_unknown_agent():
    with pytest.raises(IndexError):
        EnsembleOracle(Ensemble([doubling_model()]), 1)


def test_episode_reward_is_sum_of_steps():
    params = AgentParams.cartpole(10, 0.5)
    res = run_episode(CP, params, TrueEnvOracle(CP, params), MpcConfig(horizon=8, candidates=40),
                      np.random.default_rng(0))
    assert res.total_reward == res.rewards.sum()
    assert len(res.states) == len(res.actions) + 1
    for t, (s, k) in enumerate(zip(res.states[:-1], res.actions)):
        np.testing.assert_array_equal(envs.step(CP, params, s, k, t).next_state, res.states[t + 1])
