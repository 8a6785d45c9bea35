"""Rank-r agent x state x action factorization of transition dynamics.

The model predicts the per-coordinate state difference

    delta_d(n, s, k) = sum_l u_l(n) * V_{d,l}(s) * w_l(k)

where ``u`` is a learned row per agent, ``V`` is produced by an MLP on the
raw state and ``w`` is a learned row per discrete action.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import EnvKind
from .nn import DivergenceError, EmbeddingTable, Mlp

DEFAULT_RANK = {EnvKind.MOUNTAIN_CAR: 3, EnvKind.CARTPOLE: 5}
DEFAULT_HIDDEN = (256,)


def trilinear(u, V, w) -> np.ndarray:
    """``out[..., d] = sum_l u[..., l] * V[..., d, l] * w[..., l]``.

    Terms are accumulated in increasing ``l`` so the result is reproducible
    against a plain loop.
    """
    u = np.asarray(u, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if u.shape != w.shape or V.shape[:-2] != u.shape[:-1] or V.shape[-1] != u.shape[-1]:
        raise ValueError(f"shape mismatch: u{u.shape} V{V.shape} w{w.shape}")
    out = np.zeros(V.shape[:-1])
    for l in range(u.shape[-1]):
        out += (u[..., None, l] * V[..., l]) * w[..., None, l]
    return out


@dataclass
class FactorizedModel:
    kind: EnvKind
    rank: int
    agent_table: EmbeddingTable
    action_table: EmbeddingTable
    state_net: Mlp
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        D = self.kind.state_dim
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.agent_table.dim != self.rank or self.action_table.dim != self.rank:
            raise ValueError("embedding widths must equal the rank")
        if self.action_table.rows != self.kind.n_actions:
            raise ValueError("action table must have one row per action")
        if self.state_net.in_dim != D or self.state_net.out_dim != D * self.rank:
            raise ValueError(f"state encoder must map {D} -> {D * self.rank}")

    @classmethod
    def init(cls, kind: EnvKind, n_agents: int, rank: int, rng: np.random.Generator,
             hidden: tuple[int, ...] = DEFAULT_HIDDEN) -> "FactorizedModel":
        D = kind.state_dim
        state_net = Mlp.init([D, *hidden, D * rank], rng)
        agents = EmbeddingTable.init(n_agents, rank, rng)
        actions = EmbeddingTable.init(kind.n_actions, rank, rng)
        return cls(kind, rank, agents, actions, state_net)

    @property
    def n_agents(self) -> int:
        return self.agent_table.rows

    @property
    def state_dim(self) -> int:
        return self.kind.state_dim

    @property
    def n_actions(self) -> int:
        return self.kind.n_actions

    def parameters(self) -> list[np.ndarray]:
        return [self.agent_table.values, self.action_table.values, *self.state_net.parameters()]

    def parameter_names(self) -> list[str]:
        names = ["agent_table", "action_table"]
        for i in range(len(self.state_net.layers)):
            names += [f"state_net.{i}.W", f"state_net.{i}.b"]
        return names

    def _prepare(self, n, s, k):
        s = np.asarray(s, dtype=np.float64)
        single = s.ndim == 1
        S = s[None] if single else s
        B = S.shape[0]
        if S.shape[-1] != self.state_dim:
            raise ValueError(f"state width {S.shape[-1]} != {self.state_dim}")
        N = np.broadcast_to(np.asarray(n), (B,))
        K = np.broadcast_to(np.asarray(k), (B,))
        return S, N, K, single

    def factors(self, n, s, k):
        """Agent, state and action factors for a batch: ``(B,r)``, ``(B,D,r)``, ``(B,r)``."""
        S, N, K, _ = self._prepare(n, s, k)
        U = self.agent_table.lookup(N)
        W = self.action_table.lookup(K)
        out, tape = self.state_net.forward(S)
        V = out.reshape(S.shape[0], self.state_dim, self.rank)
        return U, V, W, tape

    def predict_delta(self, n, s, k) -> np.ndarray:
        _, _, _, single = self._prepare(n, s, k)
        U, V, W, _ = self.factors(n, s, k)
        delta = trilinear(U, V, W)
        return delta[0] if single else delta

    def predict_next(self, n, s, k) -> np.ndarray:
        return np.asarray(s, dtype=np.float64) + self.predict_delta(n, s, k)

    def rollout(self, n: int, s0, actions) -> np.ndarray:
        """Compound ``predict_next`` over ``actions``; returns states after each step."""
        s = np.asarray(s0, dtype=np.float64)
        out = []
        for k in actions:
            s = self.predict_next(n, s, k)
            out.append(s)
        return np.array(out)

    def loss_and_grads(self, n, s, k, s_next) -> tuple[float, list[np.ndarray]]:
        """Mean over the batch of the squared error on state differences.

        Gradients are returned in ``parameters()`` order.
        """
        S, N, K, _ = self._prepare(n, s, k)
        target = np.asarray(s_next, dtype=np.float64).reshape(S.shape) - S
        B = S.shape[0]
        if B == 0:
            raise ValueError("empty batch")
        U, V, W, tape = self.factors(N, S, K)
        resid = target - trilinear(U, V, W)
        loss = float(np.sum(resid * resid) / B)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss}")
        G = -2.0 * resid / B                       # dL/dpred, (B, D)
        GV = np.einsum("bd,bdl->bl", G, V)         # sum_d G_bd V_bdl
        dU = GV * W
        dW = GV * U
        dV = G[:, :, None] * (U * W)[:, None, :]
        net_grads, _ = self.state_net.backward(tape, dV.reshape(B, -1))
        grads = [self.agent_table.backward(N, dU), self.action_table.backward(K, dW), *net_grads]
        return loss, grads

    def loss(self, n, s, k, s_next) -> float:
        S, _, _, _ = self._prepare(n, s, k)
        resid = (np.asarray(s_next, dtype=np.float64).reshape(S.shape) - S) - self.predict_delta(n, S, k)
        return float(np.sum(resid * resid) / S.shape[0])

    def with_agent_rows(self, rows) -> tuple["FactorizedModel", np.ndarray]:
        """Copy of the model with extra agent rows appended; returns (model, new indices).

        Encoders are shared with ``self``, so the returned model must be treated
        as read-only.
        """
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        if rows.shape[1] != self.rank:
            raise ValueError(f"agent rows must have width {self.rank}")
        table = EmbeddingTable(np.vstack([self.agent_table.values, rows]))
        model = FactorizedModel(self.kind, self.rank, table, self.action_table, self.state_net, dict(self.meta))
        return model, np.arange(self.n_agents, table.rows)


@dataclass(frozen=True)
class Prop1Model:
    """Exact rank-3 factorization of the unclamped MountainCar transition.

    Unlike ``FactorizedModel`` it predicts the next state itself. ``gravity``
    may be an array, broadcast against the leading axes of the states.
    """

    gravity: float | np.ndarray

    def agent_factor(self) -> np.ndarray:
        g = np.asarray(self.gravity, dtype=np.float64)
        one = np.ones_like(g)
        return np.stack([one, g, one], axis=-1)

    @staticmethod
    def action_factor(a_cont) -> np.ndarray:
        a = np.asarray(a_cont, dtype=np.float64)
        return np.stack(np.broadcast_arrays(np.ones_like(a), np.ones_like(a), a), axis=-1)

    @staticmethod
    def state_factors(s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        x, v = s[..., 0], s[..., 1]
        c = np.cos(3 * x)
        one = np.ones_like(x)
        row1 = np.stack([x + v, -c / 2, one / 2], axis=-1)
        row2 = np.stack([v, -c, one], axis=-1)
        return np.stack([row1, row2], axis=-2)

    def predict(self, s, a_cont) -> np.ndarray:
        V = self.state_factors(s)
        w = self.action_factor(a_cont)
        u = self.agent_factor()
        lead = np.broadcast_shapes(V.shape[:-2], w.shape[:-1], u.shape[:-1])
        V = np.broadcast_to(V, lead + V.shape[-2:])
        return trilinear(np.broadcast_to(u, lead + (3,)), V, np.broadcast_to(w, lead + (3,)))


def prop1_predict(p: Prop1Model, s, a_cont) -> np.ndarray:
    return p.predict(s, a_cont)
