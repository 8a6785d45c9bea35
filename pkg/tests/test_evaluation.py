import math

import numpy as np
import pytest

from hetsim import envs
from hetsim.data import scripted_policy
from hetsim.envs import AgentParams, EnvKind
from hetsim.evaluation import (TrueDynamics, eval_prediction, eval_reward, export_factors, fit_covariate_map,
                               infer_unseen, make_test_policy, pca_project, read_factors, rmse_r2,
                               rollout_rmse_r2, scripted_test_policy, spearman)
from hetsim.factor_model import FactorizedModel
from hetsim.nn import grad_check
from hetsim.planner import MpcConfig, TrueEnvOracle
from hetsim.training import Ensemble

MC = EnvKind.MOUNTAIN_CAR
CP = EnvKind.CARTPOLE


def test_rmse_r2_hand_example():
    rmse, r2 = rmse_r2([[0.0], [1.0], [2.0]], [[0.0], [1.0], [1.0]])
    assert r2 == 0.5
    assert rmse == pytest.approx(math.sqrt(1 / 3), rel=1e-15)


def test_rmse_r2_perfect_and_mean_predictors():
    y = np.random.default_rng(0).normal(size=(50, 4))
    assert rmse_r2(y, y) == (0.0, 1.0)
    assert rmse_r2(y, np.broadcast_to(y.mean(axis=0), y.shape))[1] == pytest.approx(0.0, abs=1e-14)


def test_rmse_r2_degenerate_and_errors():
    flat = np.ones((5, 2))
    assert rmse_r2(flat, flat) == (0.0, 1.0)
    assert rmse_r2(flat, flat + 0.1)[1] == -math.inf
    with pytest.raises(ValueError):
        rmse_r2(np.zeros((3, 2)), np.zeros((3, 3)))


def test_rmse_permutation_invariance_and_scaling():
    rng = np.random.default_rng(1)
    y = rng.normal(size=(10, 3))
    e = rng.normal(size=(10, 3))
    base = rmse_r2(y, y + e)[0]
    perm = rng.permutation(30)
    assert rmse_r2(y.ravel()[perm][:, None], (y + e).ravel()[perm][:, None])[0] == pytest.approx(base, rel=1e-14)
    assert rmse_r2(y, y + 3 * e)[0] == pytest.approx(3 * base, rel=1e-14)


def test_test_policies_differ_from_behaviour():
    assert scripted_test_policy(MC, [-0.3, 0.002]) == 0
    assert scripted_test_policy(MC, [-0.7, 0.002]) == 2
    assert scripted_test_policy(MC, [-0.7, 0.01]) == 2
    # theta + 0.5 theta_dot < 0 < theta + 0.25 theta_dot
    s = [0, 0, 0.03, -0.1]
    assert scripted_test_policy(CP, s) == 0 and scripted_policy(CP, s) == 1
    with pytest.raises(ValueError):
        make_test_policy(MC, "greedy")


@pytest.mark.parametrize("kind", [MC, CP])
def test_true_env_as_model_is_perfect(kind):
    agents = [envs.default_params(kind), *envs.benchmark_agents(kind)[:2]]
    rep = eval_prediction(TrueDynamics(kind, agents), kind, list(enumerate(agents)), trials=20)
    for row in rep.rows:
        assert row.mean_rmse == 0.0 and row.median_r2 == 1.0 and row.trials == 20


def test_rollout_rmse_r2_truncates_at_termination():
    p = AgentParams.cartpole(10, 0.5)
    rmse, r2 = rollout_rmse_r2(TrueDynamics(CP, [p]), 0, p, CP, np.zeros(4), [0] * 50)
    assert (rmse, r2) == (0.0, 1.0)


def test_identical_member_ensemble_matches_single_model():
    rng = np.random.default_rng(0)
    m = FactorizedModel.init(MC, 3, 3, rng, hidden=(16,))
    agents = list(enumerate(envs.benchmark_agents(MC)[:3]))
    one = eval_prediction(m, MC, agents, trials=10)
    three = eval_prediction(Ensemble([m, m, m]), MC, agents, trials=10)
    for a, b in zip(one.rows, three.rows):
        np.testing.assert_allclose(a.rmses, b.rmses, rtol=1e-12)
        np.testing.assert_allclose(a.r2s, b.r2s, rtol=1e-9)


def test_single_trial_median_is_that_trial():
    m = FactorizedModel.init(MC, 1, 3, np.random.default_rng(0), hidden=(8,))
    row = eval_prediction(m, MC, [(0, AgentParams.mountain_car(0.002))], trials=1).rows[0]
    assert row.median_r2 == row.r2s[0] and row.mean_rmse == row.rmses[0]
    assert row.median_r2 <= 1.0 and row.mean_rmse >= 0.0


def test_prediction_report_outputs(tmp_path):
    agents = [AgentParams.mountain_car(0.001)]
    rep = eval_prediction(TrueDynamics(MC, agents), MC, [(0, agents[0])], trials=3, test_policy="random")
    rep.to_csv(tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines()[0].startswith("agent,gravity,mean_rmse")
    assert "gravity=0.001" in rep.format_table()
    assert rep.notes["test_policy"] == "uniform random"


def test_eval_reward_protocol(tmp_path):
    p = AgentParams.cartpole(10, 0.5)
    cfg = MpcConfig(horizon=10, candidates=30)
    rep = eval_reward(CP, [("default", p, TrueEnvOracle(CP, p))], cfg, episodes=2, repeats=2, seed=0)
    row = rep.rows[0]
    assert len(row.per_repeat) == 2 and row.std >= 0
    assert row.mean == pytest.approx(np.mean(row.per_repeat))
    rep.to_csv(tmp_path / "r.csv")
    with pytest.raises(ValueError):
        eval_reward(CP, [("default", p, TrueEnvOracle(CP, p))], cfg, episodes=0)


def test_factor_export_round_trip(tmp_path):
    m = FactorizedModel.init(MC, 7, 3, np.random.default_rng(0), hidden=(8,))
    cov = np.linspace(0.0001, 0.0035, 7)[:, None]
    export_factors(m, cov, tmp_path / "f.csv")
    header, rows = read_factors(tmp_path / "f.csv")
    assert header == ["agent", "gravity", "factor_0", "factor_1", "factor_2"]
    assert rows.shape == (7, 5)
    np.testing.assert_array_equal(rows[:, 2:], m.agent_table.values)
    np.testing.assert_array_equal(rows[:, 1], cov[:, 0])
    export_factors(m, cov, tmp_path / "g.csv")
    assert read_factors(tmp_path / "g.csv")[0] == header
    with pytest.raises(ValueError):
        export_factors(m, cov[:3], tmp_path / "h.csv")


def test_pca_recovers_line():
    t = np.linspace(-1, 1, 40)
    X = np.outer(t, [0.6, -0.8, 0.0]) + [1.0, 2.0, 3.0]
    res = pca_project(X)
    assert res.explained_variance_ratio[0] == pytest.approx(1.0)
    assert abs(spearman(t, res.coords[:, 0])) == 1.0
    assert res.components[0, 0] > 0
    np.testing.assert_allclose(res.coords[:, 1], 0.0, atol=1e-12)


def test_pca_isotropic_and_structure():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20_000, 4))
    res = pca_project(X, dims=4)
    np.testing.assert_allclose(res.explained_variance_ratio, 0.25, atol=0.02)
    np.testing.assert_allclose(res.components @ res.components.T, np.eye(4), atol=1e-12)
    assert np.all(np.diff(res.coords.var(axis=0)) <= 1e-12)
    dup = pca_project(np.vstack([X[:10], X[:10]]))
    np.testing.assert_array_equal(dup.coords[:10], dup.coords[10:])
    with pytest.raises(ValueError):
        pca_project(X[:1], dims=2)


def _smooth_factor_model(n_agents=40, seed=0):
    """Agent rows set to the exact closed-form factors (1, g, 1), scaled so g is visible."""
    model = FactorizedModel.init(MC, n_agents, 3, np.random.default_rng(seed), hidden=(8,))
    g = np.linspace(0.0001, 0.0035, n_agents)
    model.agent_table.values[:] = np.column_stack([np.ones(n_agents), 300 * g, np.ones(n_agents)])
    return model, g[:, None]


@pytest.mark.parametrize("seed", range(10))
def test_covariate_map_gradients(seed):
    model, cov = _smooth_factor_model(12, seed)
    cmap = fit_covariate_map(model, cov, p=1.0, seed=seed, epochs=3)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0001, 0.0035, size=(6, 1))
    y = rng.normal(size=(6, 3))
    _, grads = cmap.loss_and_grads(x, y)
    report = grad_check(cmap.net.parameters(), lambda: cmap.loss_and_grads(x, y)[0], grads)
    assert report.passed, report


def test_covariate_map_generalizes_to_held_out_agents():
    model, cov = _smooth_factor_model()
    cmap = fit_covariate_map(model, cov, p=0.5, seed=0)
    assert cmap.rank == 3 and len(cmap.train_agents) == 20
    held = np.setdiff1d(np.arange(40), cmap.train_agents)
    target = model.agent_table.values[held]
    mse = np.mean((cmap(cov[held]) - target) ** 2, axis=0)
    var = model.agent_table.values.var(axis=0)
    # only the gravity coordinate varies
    assert mse[1] / var[1] < 0.1
    np.testing.assert_allclose(cmap(cov[held])[:, [0, 2]], 1.0, atol=1e-2)


def test_constant_covariates_predict_mean_factor():
    model = FactorizedModel.init(CP, 10, 2, np.random.default_rng(0), hidden=(8,))
    cov = np.tile([10.0, 0.5], (10, 1))
    cmap = fit_covariate_map(model, cov, p=1.0, seed=0, epochs=200)
    np.testing.assert_allclose(cmap(cov[:1])[0], model.agent_table.values.mean(axis=0), atol=0.02)


def test_covariate_map_argument_checks():
    model, cov = _smooth_factor_model(5)
    with pytest.raises(ValueError):
        fit_covariate_map(model, cov, p=0.0)
    with pytest.raises(ValueError):
        fit_covariate_map(model, cov[:3], p=1.0)
    assert len(fit_covariate_map(model, cov, p=0.01, epochs=1).train_agents) == 2


def test_unseen_agent_matches_table_agent_with_same_row():
    model, cov = _smooth_factor_model()
    cmap = fit_covariate_map(model, cov, p=1.0, seed=0)
    ext, idx = infer_unseen(cmap, model, cov[7:8])
    s = np.random.default_rng(0).uniform(-1, 0.4, size=(20, 2))
    virtual = ext.predict_delta(idx[0], s, 2)
    real = model.predict_delta(7, s, 2)
    scale = np.abs(real).max()
    assert np.abs(virtual - real).max() < 0.05 * scale
    exact, j = model.with_agent_rows(model.agent_table.values[7:8])
    np.testing.assert_array_equal(exact.predict_delta(j[0], s, 2), real)
