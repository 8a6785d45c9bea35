"""Offline datasets: one behaviour-policy trajectory per heterogeneous agent.

Behaviour policies are scripted controllers (no trained policies), mixed
with uniform random actions according to a ``PolicyRegime``.

On-disk format is JSON lines. The first line is a header::

    {"format_version", "env", "n_agents", "n_transitions", "regime", "eps",
     "seed", "agents": [{covariate: value, ...}, ...], "metadata": {...}}

followed by one record per transition::

    {"n", "t", "s": [...], "k", "r", "sp": [...], "done"}

Floats are written with ``repr`` so a load reproduces them bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import envs
from .envs import AgentParams, EnvKind
from .factor_model import Prop1Model
from .seeding import derive_rng

FORMAT_VERSION = 1
BEHAVIOUR_NOTE = "scripted controllers stand in for trained behaviour policies"


class DatasetFormatError(ValueError):
    """Malformed, truncated or incompatible dataset file."""


@dataclass(frozen=True)
class PolicyRegime:
    name: str  # "pure" | "random" | "pure_eps"
    eps: float = 0.0

    def __post_init__(self) -> None:
        if self.name not in ("pure", "random", "pure_eps"):
            raise ValueError(f"unknown regime {self.name!r}")
        if self.name == "pure_eps" and not 0.0 <= self.eps < 1.0:
            raise ValueError("eps must lie in [0, 1)")

    @classmethod
    def pure(cls) -> "PolicyRegime":
        return cls("pure")

    @classmethod
    def random(cls) -> "PolicyRegime":
        return cls("random")

    @classmethod
    def pure_eps(cls, eps: float) -> "PolicyRegime":
        return cls("pure_eps", float(eps))

    @classmethod
    def parse(cls, name: str, eps: float | None = None) -> "PolicyRegime":
        key = name.lower().replace("-", "_")
        if key.startswith("pure_eps"):
            suffix = key[len("pure_eps"):].strip("_")
            if eps is None:
                eps = int(suffix) / 100 if suffix else 0.2
            return cls.pure_eps(eps)
        return cls(key)

    @property
    def explore_prob(self) -> float:
        return {"pure": 0.0, "random": 1.0}.get(self.name, self.eps)

    @property
    def label(self) -> str:
        if self.name == "pure_eps":
            return f"pure-eps-{round(self.eps * 100)}"
        return self.name


@dataclass(frozen=True)
class Transition:
    n: int
    t: int
    s: np.ndarray
    k: int
    r: float
    sp: np.ndarray
    done: bool


@dataclass
class Trajectory:
    agent: int
    states: np.ndarray       # (T, D)
    actions: np.ndarray      # (T,)
    rewards: np.ndarray      # (T,)
    next_states: np.ndarray  # (T, D)
    dones: np.ndarray        # (T,)

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())

    def transitions(self) -> Iterator[Transition]:
        for t in range(len(self)):
            yield Transition(self.agent, t, self.states[t], int(self.actions[t]), float(self.rewards[t]),
                             self.next_states[t], bool(self.dones[t]))


@dataclass
class OfflineDataset:
    kind: EnvKind
    agents: list[AgentParams]
    trajectories: list[Trajectory]
    regime: PolicyRegime
    seed: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.agents) != len(self.trajectories):
            raise ValueError("need exactly one trajectory per agent")
        for i, traj in enumerate(self.trajectories):
            if traj.agent != i:
                raise ValueError("trajectories must be ordered by agent index")

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def covariates(self) -> np.ndarray:
        return np.array([a.covariates for a in self.agents])

    def transitions(self) -> Iterator[Transition]:
        for traj in self.trajectories:
            yield from traj.transitions()

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Stacked ``(agent, state, action, next_state)`` over every transition."""
        n = np.concatenate([np.full(len(t), t.agent) for t in self.trajectories])
        s = np.concatenate([t.states for t in self.trajectories])
        k = np.concatenate([t.actions for t in self.trajectories])
        sp = np.concatenate([t.next_states for t in self.trajectories])
        return n, s, k, sp


def sample_agents(kind: EnvKind, count: int, rng: np.random.Generator,
                  include: list[AgentParams] | None = None) -> list[AgentParams]:
    """``count`` agents i.i.d. uniform over the covariate ranges.

    Agents in ``include`` are placed first, verbatim, and count towards ``count``.
    """
    if count < 1:
        raise ValueError("need at least one agent")
    agents = list(include or [])[:count]
    for _ in range(count - len(agents)):
        if kind is EnvKind.MOUNTAIN_CAR:
            agents.append(AgentParams.mountain_car(rng.uniform(*envs.MC_GRAVITY_RANGE)))
        else:
            agents.append(AgentParams.cartpole(rng.uniform(*envs.CP_FORCE_RANGE),
                                               rng.uniform(*envs.CP_LENGTH_RANGE)))
    return agents


def build_population(kind: EnvKind, count: int, seed: int) -> list[AgentParams]:
    """Benchmark agents first, then uniform draws from the ("agents",) sub-stream.

    The draw stream does not depend on ``count``, so smaller populations are
    prefixes of larger ones.
    """
    return sample_agents(kind, count, derive_rng(seed, "agents"), include=envs.benchmark_agents(kind))


def scripted_policy(kind: EnvKind, s) -> int:
    """Deterministic behaviour controller.

    MountainCar pumps energy by accelerating with the velocity; CartPole
    pushes toward the side the pole is falling to.
    """
    s = np.asarray(s)
    if kind is EnvKind.MOUNTAIN_CAR:
        return 2 if s[1] >= 0 else 0
    return 0 if s[2] + 0.5 * s[3] > 0 else 1


def behaviour_action(kind: EnvKind, s, regime: PolicyRegime, rng: np.random.Generator) -> tuple[int, bool]:
    """Action under ``regime`` plus whether it was a uniform random draw."""
    p = regime.explore_prob
    if p >= 1.0 or (p > 0.0 and rng.random() < p):
        return int(rng.integers(kind.n_actions)), True
    return scripted_policy(kind, s), False


def rollout_agent(kind: EnvKind, params: AgentParams, agent: int, regime: PolicyRegime,
                  rng: np.random.Generator) -> Trajectory:
    s = envs.reset(kind, rng)
    states, actions, rewards, nexts, dones = [], [], [], [], []
    for t in range(kind.max_steps):
        k, _ = behaviour_action(kind, s, regime, rng)
        res = envs.step(kind, params, s, k, t)
        states.append(s)
        actions.append(k)
        rewards.append(res.reward)
        nexts.append(res.next_state)
        dones.append(res.done)
        s = res.next_state
        if res.done:
            break
    return Trajectory(agent, np.array(states), np.array(actions, dtype=np.int64), np.array(rewards),
                      np.array(nexts), np.array(dones))


def generate_dataset(kind: EnvKind, agents: list[AgentParams], regime: PolicyRegime, seed: int) -> OfflineDataset:
    """Roll one episode per agent; agent ``n`` draws from sub-stream ("data", n)."""
    if not agents:
        raise ValueError("empty agent table")
    trajs = [rollout_agent(kind, p, n, regime, derive_rng(seed, "data", n)) for n, p in enumerate(agents)]
    meta = {"behaviour": BEHAVIOUR_NOTE}
    return OfflineDataset(kind, list(agents), trajs, regime, seed, meta)


def synthesize_prop1_dataset(gravities, seed: int, steps: int = 500) -> OfflineDataset:
    """MountainCar-style data from the exact rank-3 closed form (no clamping).

    Actions are uniform random; an episode ends at the goal or after ``steps``.
    """
    kind = EnvKind.MOUNTAIN_CAR
    agents = [AgentParams.mountain_car(g) for g in gravities]
    trajs = []
    for n, p in enumerate(agents):
        rng = derive_rng(seed, "prop1", n)
        sim = Prop1Model(p.gravity)
        s = envs.reset(kind, rng)
        rows = []
        for t in range(steps):
            k = int(rng.integers(kind.n_actions))
            sp = sim.predict(s, envs.action_to_force(kind, k))
            r = 1.0 if sp[0] >= envs.MC_GOAL else -1.0
            done = bool(sp[0] >= envs.MC_GOAL) or t + 1 == steps
            rows.append((s, k, r, sp, done))
            s = sp
            if done:
                break
        S, K, R, SP, Dn = zip(*rows)
        trajs.append(Trajectory(n, np.array(S), np.array(K, dtype=np.int64), np.array(R), np.array(SP), np.array(Dn)))
    meta = {"behaviour": "uniform random actions", "dynamics": "unclamped closed form"}
    return OfflineDataset(kind, agents, trajs, PolicyRegime.random(), seed, meta)


def save_dataset(ds: OfflineDataset, path, provenance: dict | None = None) -> None:
    if ds.n_agents < 1:
        raise ValueError("refusing to save a dataset with no agents")
    header = {
        "format_version": FORMAT_VERSION,
        "env": ds.kind.value,
        "n_agents": ds.n_agents,
        "n_transitions": ds.n_transitions,
        "regime": ds.regime.name,
        "eps": ds.regime.eps,
        "seed": ds.seed,
        "agents": [a.to_dict() for a in ds.agents],
        "metadata": ds.metadata,
    }
    if provenance is not None:
        header["provenance"] = provenance
    path = Path(path)
    with path.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for tr in ds.transitions():
            rec = {"n": tr.n, "t": tr.t, "s": tr.s.tolist(), "k": tr.k, "r": tr.r,
                   "sp": tr.sp.tolist(), "done": tr.done}
            fh.write(json.dumps(rec) + "\n")


def _parse_line(line: str, lineno: int) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise DatasetFormatError(f"line {lineno}: expected an object")
    return obj


def load_dataset(path) -> OfflineDataset:
    path = Path(path)
    with path.open() as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError("line 1: empty file")
    header = _parse_line(lines[0], 1)
    if header.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"line 1: unsupported format_version {header.get('format_version')!r}")
    try:
        kind = EnvKind.parse(header["env"])
        agents = [AgentParams.from_covariates(kind, [a[c] for c in kind.covariate_names]) for a in header["agents"]]
        regime = PolicyRegime(header["regime"], float(header["eps"]))
        n_expected = int(header["n_transitions"])
        seed = header["seed"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"line 1: bad header ({exc})") from None
    if len(agents) != header.get("n_agents"):
        raise DatasetFormatError("line 1: agent table does not match n_agents")

    D = kind.state_dim
    per_agent: list[list[tuple]] = [[] for _ in agents]
    for lineno, line in enumerate(lines[1:], start=2):
        rec = _parse_line(line, lineno)
        try:
            n, t, k = int(rec["n"]), int(rec["t"]), int(rec["k"])
            s = [float(x) for x in rec["s"]]
            sp = [float(x) for x in rec["sp"]]
            r, done = float(rec["r"]), bool(rec["done"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"line {lineno}: bad record ({exc})") from None
        if not 0 <= n < len(agents) or len(s) != D or len(sp) != D or not 0 <= k < kind.n_actions:
            raise DatasetFormatError(f"line {lineno}: record out of range")
        if t != len(per_agent[n]):
            raise DatasetFormatError(f"line {lineno}: step {t} out of order for agent {n}")
        per_agent[n].append((s, k, r, sp, done))

    total = sum(len(rows) for rows in per_agent)
    if total != n_expected:
        raise DatasetFormatError(f"line {len(lines) + 1}: expected {n_expected} transitions, found {total} (truncated?)")
    trajs = []
    for n, rows in enumerate(per_agent):
        if not rows:
            raise DatasetFormatError(f"agent {n} has no trajectory")
        if not rows[-1][4]:
            raise DatasetFormatError(f"agent {n} trajectory does not end in a terminal step (truncated?)")
        S, K, R, SP, Dn = zip(*rows)
        trajs.append(Trajectory(n, np.array(S), np.array(K, dtype=np.int64), np.array(R), np.array(SP), np.array(Dn)))
    return OfflineDataset(kind, agents, trajs, regime, seed, header.get("metadata", {}))


def replay_matches(ds: OfflineDataset) -> bool:
    """True when every stored transition is reproduced exactly by the env."""
    for tr in ds.transitions():
        res = envs.step(ds.kind, ds.agents[tr.n], tr.s, tr.k, tr.t)
        if not (np.array_equal(res.next_state, tr.sp) and res.reward == tr.r and res.done == tr.done):
            return False
    return True
