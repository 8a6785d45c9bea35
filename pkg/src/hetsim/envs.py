"""Parameterized MountainCar and CartPole with per-agent physics.

Every function here is pure: state lives in numpy arrays passed in and out,
and randomness only enters through an explicit ``numpy.random.Generator``.
The ``*_batch`` helpers operate on stacked states of shape ``(..., D)`` and
are what the planner uses to roll out many candidate sequences at once.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class EnvKind(str, enum.Enum):
    MOUNTAIN_CAR = "mountaincar"
    CARTPOLE = "cartpole"

    @property
    def state_dim(self) -> int:
        return 2 if self is EnvKind.MOUNTAIN_CAR else 4

    @property
    def n_actions(self) -> int:
        return 3 if self is EnvKind.MOUNTAIN_CAR else 2

    @property
    def max_steps(self) -> int:
        return 500 if self is EnvKind.MOUNTAIN_CAR else 200

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return ("gravity",) if self is EnvKind.MOUNTAIN_CAR else ("force", "length")

    @classmethod
    def parse(cls, value: "EnvKind | str") -> "EnvKind":
        if isinstance(value, EnvKind):
            return value
        key = str(value).lower().replace("-", "").replace("_", "")
        for kind in cls:
            if kind.value == key:
                return kind
        raise ValueError(f"unknown environment {value!r}")


# MountainCar constants (classic control)
MC_FORCE = 0.001
MC_MIN_POS, MC_MAX_POS = -1.2, 0.6
MC_MAX_SPEED = 0.07
MC_GOAL = 0.5
MC_GRAVITY_RANGE = (0.0001, 0.0035)
MC_DEFAULT_GRAVITY = 0.0025
MC_TEST_GRAVITIES = (0.0001, 0.0005, 0.001, 0.0025, 0.0035)

# CartPole constants
CP_GRAVITY = 9.8
CP_CART_MASS = 1.0
CP_POLE_MASS = 0.1
CP_TAU = 0.02
CP_THETA_LIMIT = 12 * 2 * math.pi / 360
CP_X_LIMIT = 2.4
CP_FORCE_RANGE = (2.0, 18.0)
CP_LENGTH_RANGE = (0.15, 0.85)
CP_DEFAULT = (10.0, 0.5)
CP_TEST_AGENTS = ((2.0, 0.5), (10.0, 0.5), (18.0, 0.5), (10.0, 0.85), (10.0, 0.15))


@dataclass(frozen=True)
class AgentParams:
    """Physical covariates of one agent.

    MountainCar agents use ``gravity``; CartPole agents use ``force`` and the
    half pole ``length``.
    """

    kind: EnvKind
    gravity: float | None = None
    force: float | None = None
    length: float | None = None

    def __post_init__(self) -> None:
        if self.kind is EnvKind.MOUNTAIN_CAR:
            if self.gravity is None or not math.isfinite(self.gravity):
                raise ValueError("MountainCar agent needs a finite gravity")
        else:
            if self.force is None or self.length is None:
                raise ValueError("CartPole agent needs force and length")
            if self.length <= 0:
                raise ValueError("pole length must be positive")

    @classmethod
    def mountain_car(cls, gravity: float) -> "AgentParams":
        return cls(EnvKind.MOUNTAIN_CAR, gravity=float(gravity))

    @classmethod
    def cartpole(cls, force: float, length: float) -> "AgentParams":
        return cls(EnvKind.CARTPOLE, force=float(force), length=float(length))

    @property
    def covariates(self) -> np.ndarray:
        if self.kind is EnvKind.MOUNTAIN_CAR:
            return np.array([self.gravity])
        return np.array([self.force, self.length])

    @classmethod
    def from_covariates(cls, kind: EnvKind, values) -> "AgentParams":
        values = [float(v) for v in values]
        if kind is EnvKind.MOUNTAIN_CAR:
            return cls.mountain_car(*values)
        return cls.cartpole(*values)

    def in_range(self) -> bool:
        if self.kind is EnvKind.MOUNTAIN_CAR:
            lo, hi = MC_GRAVITY_RANGE
            return lo <= self.gravity <= hi
        return (CP_FORCE_RANGE[0] <= self.force <= CP_FORCE_RANGE[1]
                and CP_LENGTH_RANGE[0] <= self.length <= CP_LENGTH_RANGE[1])

    def to_dict(self) -> dict:
        return dict(zip(self.kind.covariate_names, self.covariates.tolist()))


def default_params(kind: EnvKind) -> AgentParams:
    if kind is EnvKind.MOUNTAIN_CAR:
        return AgentParams.mountain_car(MC_DEFAULT_GRAVITY)
    return AgentParams.cartpole(*CP_DEFAULT)


def benchmark_agents(kind: EnvKind) -> list[AgentParams]:
    if kind is EnvKind.MOUNTAIN_CAR:
        return [AgentParams.mountain_car(g) for g in MC_TEST_GRAVITIES]
    return [AgentParams.cartpole(f, l) for f, l in CP_TEST_AGENTS]


@dataclass(frozen=True)
class StepResult:
    next_state: np.ndarray
    reward: float
    done: bool


class TerminalStateError(RuntimeError):
    """Raised when stepping an episode that has already ended."""


def mc_closed_form(s, a_cont, g):
    """Unclamped MountainCar transition.

    Works elementwise, so ``s`` may be a single state ``(2,)`` or a stack
    ``(..., 2)`` with broadcastable ``a_cont`` and ``g``.
    """
    s = np.asarray(s, dtype=np.float64)
    x, v = s[..., 0], s[..., 1]
    c = np.cos(3 * x)
    x_next = x + v - g * c / 2 + a_cont / 2
    v_next = v - g * c + a_cont
    return np.stack([x_next, v_next], axis=-1)


def action_to_force(kind: EnvKind, k, params: AgentParams | None = None):
    """Map discrete action index (or array of indices) to a continuous force."""
    k_arr = np.asarray(k)
    if not np.issubdtype(k_arr.dtype, np.integer) or np.any(k_arr < 0) or np.any(k_arr >= kind.n_actions):
        raise ValueError(f"invalid action {k!r} for {kind.value}")
    if kind is EnvKind.MOUNTAIN_CAR:
        out = (k_arr - 1) * MC_FORCE
    else:
        if params is None:
            raise ValueError("CartPole force needs agent params")
        out = np.where(k_arr == 0, params.force, -params.force)
    return float(out) if out.ndim == 0 else out


def _mc_clamp(s: np.ndarray) -> np.ndarray:
    x = np.clip(s[..., 0], MC_MIN_POS, MC_MAX_POS)
    v = np.clip(s[..., 1], -MC_MAX_SPEED, MC_MAX_SPEED)
    v = np.where(s[..., 0] < MC_MIN_POS, 0.0, v)
    return np.stack([x, v], axis=-1)


def _cp_dynamics(s: np.ndarray, force, length: float) -> np.ndarray:
    x, x_dot, theta, theta_dot = (s[..., i] for i in range(4))
    total_mass = CP_CART_MASS + CP_POLE_MASS
    polemass_length = CP_POLE_MASS * length
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    temp = (force + polemass_length * theta_dot**2 * sin_t) / total_mass
    theta_acc = (CP_GRAVITY * sin_t - cos_t * temp) / (
        length * (4.0 / 3.0 - CP_POLE_MASS * cos_t**2 / total_mass))
    x_acc = temp - polemass_length * theta_acc * cos_t / total_mass
    return np.stack([
        x + CP_TAU * x_dot,
        x_dot + CP_TAU * x_acc,
        theta + CP_TAU * theta_dot,
        theta_dot + CP_TAU * theta_acc,
    ], axis=-1)


def next_state_batch(kind: EnvKind, params: AgentParams, s, k) -> np.ndarray:
    """True next states for stacked states ``(..., D)`` and actions ``(...)``."""
    s = np.asarray(s, dtype=np.float64)
    force = action_to_force(kind, np.asarray(k), params)
    if kind is EnvKind.MOUNTAIN_CAR:
        return _mc_clamp(mc_closed_form(s, force, params.gravity))
    return _cp_dynamics(s, force, params.length)


def is_terminal_batch(kind: EnvKind, s) -> np.ndarray:
    """Termination by the state alone (the step cap is handled separately)."""
    s = np.asarray(s, dtype=np.float64)
    if kind is EnvKind.MOUNTAIN_CAR:
        return s[..., 0] >= MC_GOAL
    return (np.abs(s[..., 2]) > CP_THETA_LIMIT) | (np.abs(s[..., 0]) > CP_X_LIMIT)


def reward_batch(kind: EnvKind, s_next) -> np.ndarray:
    s_next = np.asarray(s_next, dtype=np.float64)
    if kind is EnvKind.MOUNTAIN_CAR:
        return np.where(s_next[..., 0] >= MC_GOAL, 1.0, -1.0)
    return np.where(is_terminal_batch(kind, s_next), 0.0, 1.0)


def reward_fn(kind: EnvKind, s, k, s_next) -> float:
    """Known reward of transition ``(s, k, s_next)``; only ``s_next`` matters."""
    return float(reward_batch(kind, s_next))


def step(kind: EnvKind, params: AgentParams, s, k: int, t: int) -> StepResult:
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (kind.state_dim,) or not np.all(np.isfinite(s)):
        raise ValueError(f"bad state {s!r}")
    if bool(is_terminal_batch(kind, s)) or t >= kind.max_steps:
        raise TerminalStateError(f"cannot step terminal state {s.tolist()} at t={t}")
    s_next = next_state_batch(kind, params, s, int(k))
    reward = reward_fn(kind, s, k, s_next)
    done = bool(is_terminal_batch(kind, s_next)) or t + 1 >= kind.max_steps
    return StepResult(s_next, reward, done)


def reset(kind: EnvKind, rng: np.random.Generator) -> np.ndarray:
    if kind is EnvKind.MOUNTAIN_CAR:
        return np.array([rng.uniform(-0.6, -0.4), 0.0])
    return rng.uniform(-0.05, 0.05, size=4)
