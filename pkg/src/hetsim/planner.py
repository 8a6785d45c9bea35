"""Random-shooting MPC over an ensemble of learned simulators or the true env.

A candidate's score is the member-averaged, undiscounted sum of known
rewards along its imagined rollout. The executed action is the first action
of the best-scoring candidate, replanned every step.

With sparse rewards the scores can be completely flat: every MountainCar
candidate scores -h until the goal is within reach, and picking the lowest
index then degenerates into a uniformly random policy. With
``tie_break="reach"`` a flat landscape (all candidates tied) is resolved
toward the candidate whose imagined trajectory travels furthest from the
current state, measured per dimension in units of the spread of the
candidates' final states. Partial ties, and everything under
``tie_break="index"``, go to the lowest candidate index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import envs
from .envs import AgentParams, EnvKind
from .training import Ensemble

TIE_BREAKS = ("reach", "index")


class PlanningError(RuntimeError):
    """No candidate produced a finite score."""


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 50
    candidates: int = 1000
    tie_break: str = "reach"

    def __post_init__(self) -> None:
        if self.horizon < 1 or self.candidates < 1:
            raise ValueError("horizon and candidate count must be >= 1")
        if self.tie_break not in TIE_BREAKS:
            raise ValueError(f"tie_break must be one of {TIE_BREAKS}")


class TrueEnvOracle:
    """Real dynamics of one agent; reward accumulation stops at termination."""

    stops_at_termination = True

    def __init__(self, kind: EnvKind, params: AgentParams):
        self.kind = kind
        self.params = params

    @property
    def members(self) -> int:
        return 1

    def rollout(self, s0, seqs) -> np.ndarray:
        """States after each action, shape ``(1, C, h, D)``."""
        seqs = np.asarray(seqs)
        S = np.broadcast_to(np.asarray(s0, dtype=np.float64), (seqs.shape[0], self.kind.state_dim))
        out = np.empty((1, *seqs.shape, self.kind.state_dim))
        for t in range(seqs.shape[1]):
            S = envs.next_state_batch(self.kind, self.params, S, seqs[:, t])
            out[0, :, t] = S
        return out


class EnsembleOracle:
    """Learned simulators for a fixed agent index.

    Imagined MountainCar rollouts ignore termination; imagined CartPole
    rollouts stop collecting reward once the known failure rule fires.
    """

    def __init__(self, ensemble: Ensemble, agent: int):
        if not 0 <= agent < ensemble.n_agents:
            raise IndexError(f"agent {agent} not in model table of {ensemble.n_agents}")
        self.ensemble = ensemble
        self.kind = ensemble.kind
        self.agent = agent
        self.stops_at_termination = self.kind is EnvKind.CARTPOLE

    @property
    def members(self) -> int:
        return len(self.ensemble)

    def rollout(self, s0, seqs) -> np.ndarray:
        seqs = np.asarray(seqs)
        C, h = seqs.shape
        D = self.kind.state_dim
        out = np.empty((self.members, C, h, D))
        with np.errstate(over="ignore", invalid="ignore"):
            for m, model in enumerate(self.ensemble.members):
                S = np.broadcast_to(np.asarray(s0, dtype=np.float64), (C, D))
                for t in range(h):
                    S = model.predict_next(self.agent, S, seqs[:, t])
                    out[m, :, t] = S
        return out


def sample_candidates(kind: EnvKind, cfg: MpcConfig, rng: np.random.Generator) -> np.ndarray:
    """``(C, h)`` i.i.d. uniform action indices."""
    return rng.integers(kind.n_actions, size=(cfg.candidates, cfg.horizon))


def _scores(oracle, traj: np.ndarray) -> np.ndarray:
    """Member-averaged reward sums for rollouts ``(M, C, h, D)``; non-finite -> -inf."""
    kind = oracle.kind
    rewards = envs.reward_batch(kind, traj)  # (M, C, h)
    if oracle.stops_at_termination:
        term = envs.is_terminal_batch(kind, traj)
        # reward of the step that terminates counts; later steps do not
        ended_before = np.cumsum(term, axis=-1) - term > 0
        rewards = np.where(ended_before, 0.0, rewards)
    per_member = rewards.sum(axis=-1)
    bad = ~np.all(np.isfinite(traj), axis=(-1, -2))
    per_member = np.where(bad, -np.inf, per_member)
    return per_member.mean(axis=0)


def score_sequence(oracle, s0, seq) -> float:
    """Average over members of the summed reward of one action sequence."""
    seq = np.asarray(seq)[None, :]
    return float(_scores(oracle, oracle.rollout(s0, seq))[0])


def _reach(traj: np.ndarray, s0) -> np.ndarray:
    """Mean normalized distance of each candidate's imagined states from ``s0``."""
    mean_traj = traj.mean(axis=0)  # (C, h, D)
    scale = mean_traj[:, -1].std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return np.linalg.norm((mean_traj - np.asarray(s0)) / scale, axis=-1).mean(axis=-1)


def choose(scores: np.ndarray, traj: np.ndarray, s0, tie_break: str) -> int:
    """Index of the selected candidate."""
    best = scores.max()
    if not np.isfinite(best):
        raise PlanningError("all candidate sequences were invalid")
    tied = np.flatnonzero(scores == best)
    if tie_break == "index" or len(tied) < len(scores):
        return int(tied[0])
    with np.errstate(invalid="ignore", over="ignore"):
        reach = _reach(traj, s0)
    return int(np.argmax(np.where(np.isfinite(reach), reach, -np.inf)))


def mpc_select_action(oracle, cfg: MpcConfig, s, rng: np.random.Generator) -> int:
    seqs = sample_candidates(oracle.kind, cfg, rng)
    traj = oracle.rollout(s, seqs)
    i = choose(_scores(oracle, traj), traj, s, cfg.tie_break)
    return int(seqs[i, 0])


@dataclass
class EpisodeResult:
    total_reward: float
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    info: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.actions)


def run_episode(kind: EnvKind, params: AgentParams, oracle, cfg: MpcConfig,
                rng: np.random.Generator) -> EpisodeResult:
    """Reset, then plan and step the real environment until the episode ends."""
    s = envs.reset(kind, rng)
    states, actions, rewards = [s], [], []
    for t in range(kind.max_steps):
        k = mpc_select_action(oracle, cfg, s, rng)
        res = envs.step(kind, params, s, k, t)
        actions.append(k)
        rewards.append(res.reward)
        s = res.next_state
        states.append(s)
        if res.done:
            break
    rewards = np.array(rewards)
    return EpisodeResult(float(rewards.sum()), np.array(states), np.array(actions), rewards)
