"""Prediction-error and reward protocols, latent-factor export/PCA, unseen agents."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import envs
from .envs import AgentParams, EnvKind
from .factor_model import FactorizedModel
from .nn import AdamState, Mlp, adam_step
from .planner import MpcConfig, run_episode
from .seeding import derive_rng
from .training import Ensemble

TEST_POLICY_NOTE = "scripted test controller (gains differ from the behaviour controller)"


# -- test policies -------------------------------------------------------------

def scripted_test_policy(kind: EnvKind, s) -> int:
    """Controller used to produce evaluation action sequences.

    MountainCar: follow the velocity outside a +-0.005 deadband; inside it,
    push away from the side of the valley the car is on. CartPole: push
    toward the falling side using theta + 0.25 * theta_dot.
    """
    if kind is EnvKind.MOUNTAIN_CAR:
        x, v = s[0], s[1]
        if abs(v) > 0.005:
            return 2 if v > 0 else 0
        return 0 if x >= -0.5 else 2
    return 0 if s[2] + 0.25 * s[3] > 0 else 1


def make_test_policy(kind: EnvKind, mode: str) -> Callable[[np.ndarray, np.random.Generator], int]:
    if mode == "scripted":
        return lambda s, rng: scripted_test_policy(kind, s)
    if mode == "random":
        return lambda s, rng: int(rng.integers(kind.n_actions))
    raise ValueError(f"unknown test policy {mode!r}")


def true_rollout(kind: EnvKind, params: AgentParams, s0, policy, horizon: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Run ``policy`` on the real env from ``s0``; returns (actions, next states).

    Stops early if the episode terminates.
    """
    s = np.asarray(s0, dtype=np.float64)
    actions, states = [], []
    for t in range(horizon):
        k = policy(s, rng)
        res = envs.step(kind, params, s, k, t)
        actions.append(k)
        states.append(res.next_state)
        s = res.next_state
        if res.done:
            break
    return np.array(actions, dtype=np.int64), np.array(states)


# -- metrics -------------------------------------------------------------------

def rmse_r2(true_states, pred_states) -> tuple[float, float]:
    """Pooled RMSE over steps and dims, and R^2 against the true per-dim mean.

    A true trajectory with zero variance gives R^2 = 1 when the prediction is
    exact and -inf otherwise.
    """
    y = np.asarray(true_states, dtype=np.float64)
    yhat = np.asarray(pred_states, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {yhat.shape}")
    err = yhat - y
    sse = float(np.sum(err * err))
    sst = float(np.sum((y - y.mean(axis=0)) ** 2))
    rmse = math.sqrt(sse / y.size)
    if sst == 0.0:
        return rmse, 1.0 if sse == 0.0 else -math.inf
    return rmse, 1.0 - sse / sst


class TrueDynamics:
    """The real environment exposed with the ``predict_next`` interface."""

    def __init__(self, kind: EnvKind, agents: Sequence[AgentParams]):
        self.kind = kind
        self.agents = list(agents)

    def predict_next(self, n, s, k) -> np.ndarray:
        return envs.next_state_batch(self.kind, self.agents[int(n)], s, k)


def compound(predictor, n: int, s0, actions) -> np.ndarray:
    """States predicted by iterating ``predictor.predict_next`` over ``actions``."""
    s = np.asarray(s0, dtype=np.float64)
    out = []
    for k in actions:
        s = predictor.predict_next(n, s, k)
        out.append(s)
    return np.array(out).reshape(len(out), -1)


def rollout_rmse_r2(predictor, n: int, params: AgentParams, kind: EnvKind, s0, actions) -> tuple[float, float]:
    """Compare open-loop predictions with the true trajectory under ``actions``."""
    true = []
    s = np.asarray(s0, dtype=np.float64)
    for t, k in enumerate(actions):
        res = envs.step(kind, params, s, int(k), t)
        true.append(res.next_state)
        s = res.next_state
        if res.done:
            break
    pred = compound(predictor, n, s0, list(actions)[:len(true)])
    return rmse_r2(np.array(true), pred)


# -- prediction protocol ---------------------------------------------------------

@dataclass
class PredictionRow:
    agent: int
    covariates: dict
    mean_rmse: float
    median_r2: float
    trials: int
    rmses: np.ndarray = field(repr=False)
    r2s: np.ndarray = field(repr=False)


@dataclass
class PredictionReport:
    env: EnvKind
    test_policy: str
    horizon: int
    rows: list[PredictionRow]
    notes: dict = field(default_factory=dict)

    def row(self, agent: int) -> PredictionRow:
        return next(r for r in self.rows if r.agent == agent)

    def to_csv(self, path) -> None:
        write_prediction_csv([self], path)

    def format_table(self) -> str:
        lines = [f"prediction error ({self.env.value}, test policy: {self.test_policy}, {self.horizon} steps)",
                 f"{'agent':>8}  {'covariates':<28}{'RMSE (median R2)':>20}"]
        for r in self.rows:
            cov = ", ".join(f"{k}={v:g}" for k, v in r.covariates.items())
            lines.append(f"{r.agent:>8}  {cov:<28}{r.mean_rmse:>11.4f} ({r.median_r2:.2f})")
        return "\n".join(lines)


def write_prediction_csv(reports: Sequence[PredictionReport], path) -> None:
    """One CSV for several reports on the same environment."""
    cov_names = list(reports[0].env.covariate_names)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["agent", *cov_names, "mean_rmse", "median_r2", "trials", "test_policy", "horizon"])
        for rep in reports:
            for r in rep.rows:
                w.writerow([r.agent, *(repr(r.covariates[c]) for c in cov_names), repr(r.mean_rmse),
                            repr(r.median_r2), r.trials, rep.test_policy, rep.horizon])


def eval_prediction(predictor, kind: EnvKind, agents: Sequence[tuple[int, AgentParams]], trials: int = 200,
                    test_policy: str = "scripted", horizon: int = 50, seed: int = 0) -> PredictionReport:
    """Mean RMSE and median R^2 of ``horizon``-step open-loop predictions.

    ``agents`` pairs a model agent index with the true physics for it. Each
    trial draws a start state and an action sequence from the test policy on
    the real env, then compounds ``predictor.predict_next`` under the same
    actions (all trials are predicted as one batch).
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    policy = make_test_policy(kind, test_policy)
    rows = []
    for n, params in agents:
        rng = derive_rng(seed, "pred", n, *np.round(params.covariates * 1e6).astype(int))
        starts, act_seqs, trues = [], [], []
        for _ in range(trials):
            s0 = envs.reset(kind, rng)
            acts, states = true_rollout(kind, params, s0, policy, horizon, rng)
            starts.append(s0)
            act_seqs.append(acts)
            trues.append(states)
        lengths = np.array([len(a) for a in act_seqs])
        A = np.zeros((trials, lengths.max()), dtype=np.int64)
        for i, a in enumerate(act_seqs):
            A[i, :len(a)] = a
        S = np.array(starts)
        preds = np.empty((trials, A.shape[1], kind.state_dim))
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(A.shape[1]):
                S = predictor.predict_next(n, S, A[:, t])
                preds[:, t] = S
        metrics = [rmse_r2(trues[i], preds[i, :lengths[i]]) for i in range(trials)]
        rmses = np.array([m[0] for m in metrics])
        r2s = np.array([m[1] for m in metrics])
        rows.append(PredictionRow(n, params.to_dict(), float(rmses.mean()), float(np.median(r2s)), trials,
                                  rmses, r2s))
    notes = {"test_policy": TEST_POLICY_NOTE if test_policy == "scripted" else "uniform random"}
    return PredictionReport(kind, test_policy, horizon, rows, notes)


# -- reward protocol -----------------------------------------------------------

@dataclass
class RewardRow:
    label: str
    covariates: dict
    mean: float
    std: float
    episodes: int
    repeats: int
    per_repeat: list[float]
    per_episode: list[list[float]] = field(default_factory=list)


@dataclass
class RewardReport:
    env: EnvKind
    method: str
    rows: list[RewardRow]
    mpc: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        cov_names = list(self.env.covariate_names)
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["agent", *cov_names, "method", "mean_reward", "std_reward", "episodes", "repeats"])
            for r in self.rows:
                w.writerow([r.label, *(repr(r.covariates[c]) for c in cov_names), self.method, repr(r.mean),
                            repr(r.std), r.episodes, r.repeats])

    def format_table(self) -> str:
        lines = [f"average reward ({self.env.value}, {self.method})"]
        for r in self.rows:
            cov = ", ".join(f"{k}={v:g}" for k, v in r.covariates.items())
            lines.append(f"  {r.label:>8}  {cov:<28}{r.mean:>9.2f} +- {r.std:.2f}")
        return "\n".join(lines)


def eval_reward(kind: EnvKind, agents: Sequence[tuple[str, AgentParams, object]], cfg: MpcConfig,
                episodes: int = 20, repeats: int = 5, seed: int = 0, method: str = "mpc") -> RewardReport:
    """Mean and std across repetitions of the per-repetition average episode reward.

    ``agents`` holds ``(label, true params, planning oracle)`` triples.
    """
    if episodes < 1 or repeats < 1:
        raise ValueError("episodes and repeats must be >= 1")
    rows = []
    for label, params, oracle in agents:
        per_rep, per_ep = [], []
        for rep in range(repeats):
            totals = [run_episode(kind, params, oracle, cfg, derive_rng(seed, "reward", label, rep, ep)).total_reward
                      for ep in range(episodes)]
            per_ep.append(totals)
            per_rep.append(float(np.mean(totals)))
        rows.append(RewardRow(str(label), params.to_dict(), float(np.mean(per_rep)), float(np.std(per_rep)),
                              episodes, repeats, per_rep, per_ep))
    mpc = {"horizon": cfg.horizon, "candidates": cfg.candidates, "tie_break": cfg.tie_break}
    return RewardReport(kind, method, rows, mpc)


# -- latent factors --------------------------------------------------------------

def export_factors(model: FactorizedModel, covariates, path, extra: dict | None = None) -> None:
    """CSV with one row per agent: index, covariates, the agent factor, then ``extra`` columns."""
    covariates = np.atleast_2d(np.asarray(covariates, dtype=np.float64))
    if len(covariates) != model.n_agents:
        raise ValueError("need one covariate row per agent")
    extra = {k: np.asarray(v, dtype=np.float64) for k, v in (extra or {}).items()}
    if any(len(v) != model.n_agents for v in extra.values()):
        raise ValueError("extra columns need one value per agent")
    names = list(model.kind.covariate_names)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["agent", *names, *(f"factor_{l}" for l in range(model.rank)), *extra])
        for n in range(model.n_agents):
            w.writerow([n, *map(repr, covariates[n].tolist()), *map(repr, model.agent_table.values[n].tolist()),
                        *(repr(float(v[n])) for v in extra.values())])


def read_factors(path) -> tuple[list[str], np.ndarray]:
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(x) for x in r] for r in rows[1:]])


@dataclass
class PcaResult:
    coords: np.ndarray
    components: np.ndarray  # (dims, r), rows orthonormal
    explained_variance_ratio: np.ndarray


def pca_project(factors, dims: int = 2) -> PcaResult:
    """Project centred rows onto the top ``dims`` covariance eigenvectors.

    Each component is signed so its first non-negligible loading is positive.
    """
    X = np.asarray(factors, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < dims or dims > X.shape[1]:
        raise ValueError(f"cannot take {dims} components of data shaped {X.shape}")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / max(1, X.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order[:dims]].T.copy()
    for row in evecs:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if len(nz) and row[nz[0]] < 0:
            row *= -1
    total = evals.sum()
    ratio = evals[:dims] / total if total > 0 else np.zeros(dims)
    return PcaResult(Xc @ evecs.T, evecs, ratio)


def spearman(a, b) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(a, b).statistic)


# -- unseen agents ---------------------------------------------------------------

@dataclass
class CovariateMap:
    """Standardized-input, standardized-output MLP from covariates to agent factors."""

    net: Mlp
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    y_scale: np.ndarray
    p: float
    train_agents: np.ndarray

    @property
    def rank(self) -> int:
        return self.net.out_dim

    def _x(self, covariates) -> np.ndarray:
        return (np.atleast_2d(np.asarray(covariates, dtype=np.float64)) - self.x_mean) / self.x_scale

    def __call__(self, covariates) -> np.ndarray:
        z = self.net(self._x(covariates))
        return z * self.y_scale + self.y_mean

    def loss_and_grads(self, covariates, factors) -> tuple[float, list[np.ndarray]]:
        """Mean over rows of the squared error in standardized factor units."""
        X = self._x(covariates)
        Y = (np.atleast_2d(factors) - self.y_mean) / self.y_scale
        out, tape = self.net.forward(X)
        resid = out - Y
        loss = float(np.sum(resid * resid) / len(X))
        grads, _ = self.net.backward(tape, 2.0 * resid / len(X))
        return loss, grads


def _scale(a: np.ndarray) -> np.ndarray:
    s = a.std(axis=0)
    return np.where(s > 0, s, 1.0)


def fit_covariate_map(model: FactorizedModel, covariates, p: float = 1.0, seed: int = 0, epochs: int = 500,
                      batch_size: int = 8, hidden: tuple[int, ...] = (64, 64)) -> CovariateMap:
    """Regress learned agent factors on covariates using a fraction ``p`` of agents."""
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    X = np.atleast_2d(np.asarray(covariates, dtype=np.float64))
    if len(X) != model.n_agents:
        raise ValueError("need one covariate row per agent")
    rng = derive_rng(seed, "covmap")
    count = max(2, int(round(p * model.n_agents)))
    if count > model.n_agents:
        raise ValueError("need at least two agents")
    chosen = np.sort(rng.choice(model.n_agents, count, replace=False))
    Xs, Ys = X[chosen], model.agent_table.values[chosen]
    net = Mlp.init([X.shape[1], *hidden, model.rank], rng)
    cmap = CovariateMap(net, Xs.mean(axis=0), _scale(Xs), Ys.mean(axis=0), _scale(Ys), p, chosen)
    params = net.parameters()
    opt = AdamState.for_params(params, lr=1e-3)
    for _ in range(epochs):
        order = rng.permutation(count)
        for start in range(0, count, batch_size):
            idx = order[start:start + batch_size]
            _, grads = cmap.loss_and_grads(Xs[idx], Ys[idx])
            adam_step(params, grads, opt)
    return cmap


def infer_unseen(cmap: CovariateMap, model: FactorizedModel, covariates) -> tuple[FactorizedModel, np.ndarray]:
    """Model with virtual agents appended for ``covariates``; returns (model, indices)."""
    rows = cmap(covariates)
    return model.with_agent_rows(rows)


def infer_unseen_ensemble(ens: Ensemble, covariates_table, unseen, p: float, seed: int = 0,
                          epochs: int = 500) -> tuple[Ensemble, np.ndarray]:
    """Fit one map per member (same covariate subset) and append the unseen agents."""
    members, idx = [], None
    for m in ens.members:
        cmap = fit_covariate_map(m, covariates_table, p=p, seed=seed, epochs=epochs)
        extended, idx = infer_unseen(cmap, m, unseen)
        members.append(extended)
    return Ensemble(members), idx


def covariate_map_to_dict(cmap: CovariateMap) -> dict:
    return {
        "sizes": cmap.net.sizes,
        "params": [p.tolist() for p in cmap.net.parameters()],
        "x_mean": cmap.x_mean.tolist(), "x_scale": cmap.x_scale.tolist(),
        "y_mean": cmap.y_mean.tolist(), "y_scale": cmap.y_scale.tolist(),
        "p": cmap.p, "train_agents": cmap.train_agents.tolist(),
    }


def covariate_map_from_dict(d: dict) -> CovariateMap:
    from .nn import DenseLayer

    ps = [np.array(p, dtype=np.float64) for p in d["params"]]
    net = Mlp([DenseLayer(W, b) for W, b in zip(ps[::2], ps[1::2])])
    arr = {k: np.array(d[k], dtype=np.float64) for k in ("x_mean", "x_scale", "y_mean", "y_scale")}
    return CovariateMap(net, p=float(d["p"]), train_agents=np.array(d["train_agents"], dtype=np.int64), **arr)


# -- data-scarcity ablation ---------------------------------------------------------

@dataclass
class ScarcityRow:
    n_agents: int
    median_rmse: float
    agent_rmse: dict
    rewards: list[float]

    @property
    def mean_reward(self) -> float:
        return float(np.mean(self.rewards))


@dataclass
class ScarcityReport:
    env: EnvKind
    rows: list[ScarcityRow]
    reward_agent: dict
    settings: dict = field(default_factory=dict)

    def format_table(self) -> str:
        cov = ", ".join(f"{k}={v:g}" for k, v in self.reward_agent.items())
        lines = [f"data scarcity ({self.env.value}); reward agent {cov}",
                 f"{'N':>6}{'median RMSE':>14}{'mean reward':>14}  episodes"]
        for r in self.rows:
            lines.append(f"{r.n_agents:>6}{r.median_rmse:>14.4f}{r.mean_reward:>14.2f}  {len(r.rewards)}")
        return "\n".join(lines)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n_agents", "median_rmse", "mean_reward", "episodes", "rewards"])
            for r in self.rows:
                w.writerow([r.n_agents, repr(r.median_rmse), repr(r.mean_reward), len(r.rewards),
                            " ".join(map(repr, r.rewards))])


def scarcity_sweep(kind: EnvKind, sizes: Sequence[int], train_cfg, members: int = 5, regime=None,
                   mpc: MpcConfig | None = None, episodes: int = 2, trials: int = 200,
                   reward_agent: AgentParams | None = None, seed: int = 0, threads: int = 1,
                   prebuilt: dict | None = None, log: Callable[[str], None] | None = None) -> ScarcityReport:
    """Retrain and re-evaluate at each population size.

    Populations are nested (benchmark agents first, then a shared draw
    stream). Prediction RMSE is the median over benchmark agents of their
    mean trial RMSE; reward is learned-model MPC on ``reward_agent``.
    ``prebuilt`` maps a size to an already trained ``(dataset, ensemble)``.
    """
    from .data import PolicyRegime, build_population, generate_dataset
    from .planner import EnsembleOracle
    from .training import train_ensemble

    regime = regime or PolicyRegime.random()
    mpc = mpc or MpcConfig()
    bench = envs.benchmark_agents(kind)
    reward_agent = reward_agent or envs.default_params(kind)
    if reward_agent not in bench:
        raise ValueError("reward agent must be one of the benchmark agents")
    if min(sizes) < len(bench):
        raise ValueError(f"population sizes must be >= {len(bench)} (the benchmark agents)")
    rows = []
    for size in sizes:
        if prebuilt and size in prebuilt:
            ds, ens = prebuilt[size]
        else:
            ds = generate_dataset(kind, build_population(kind, size, seed), regime, seed)
            ens = train_ensemble(ds, train_cfg, members=members, threads=threads)
        pred = eval_prediction(ens, kind, list(enumerate(bench)), trials=trials, seed=seed)
        idx = bench.index(reward_agent)
        rew = eval_reward(kind, [(f"N={size}", reward_agent, EnsembleOracle(ens, idx))], mpc,
                          episodes=episodes, repeats=1, seed=seed, method="learned")
        agent_rmse = {r.agent: r.mean_rmse for r in pred.rows}
        row = ScarcityRow(size, float(np.median(list(agent_rmse.values()))), agent_rmse,
                          [float(x) for x in rew.rows[0].per_episode[0]])
        rows.append(row)
        if log:
            log(f"N={size}: median RMSE {row.median_rmse:.4f}, reward {row.mean_reward:.1f}")
    settings = {"members": members, "regime": regime.label, "episodes": episodes, "trials": trials,
                "seed": seed, "train": train_cfg.to_dict()}
    return ScarcityReport(kind, rows, reward_agent.to_dict(), settings)
