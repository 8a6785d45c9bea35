"""Small numpy neural-network kit: dense layers, ReLU MLPs, embeddings, Adam.

Everything is float64 and batched along the leading axis. Backward passes
are hand-written for these fixed architectures; ``grad_check`` compares them
against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class DenseLayer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)

    def __post_init__(self) -> None:
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError(f"inconsistent layer shapes W{self.W.shape} b{self.b.shape}")

    @property
    def fan_in(self) -> int:
        return self.W.shape[1]

    @property
    def fan_out(self) -> int:
        return self.W.shape[0]

    @classmethod
    def init(cls, fan_in: int, fan_out: int, rng: np.random.Generator) -> "DenseLayer":
        bound = np.sqrt(1.0 / fan_in)
        return cls(rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out))


@dataclass
class MlpTape:
    owner: int
    inputs: list[np.ndarray]  # input to each layer; hidden ones are post-ReLU
    out_shape: tuple
    squeeze: bool


class Mlp:
    """ReLU on hidden layers, identity on the output layer."""

    def __init__(self, layers: Sequence[DenseLayer]):
        if not layers:
            raise ValueError("an Mlp needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.fan_out != b.fan_in:
                raise ValueError(f"layer shapes do not chain: {a.fan_out} -> {b.fan_in}")
        self.layers = list(layers)

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator) -> "Mlp":
        return cls([DenseLayer.init(i, o, rng) for i, o in zip(sizes, sizes[1:])])

    @property
    def in_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def out_dim(self) -> int:
        return self.layers[-1].fan_out

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [layer.fan_out for layer in self.layers]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        return out

    def forward(self, x) -> tuple[np.ndarray, MlpTape]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.ndim != 2 or h.shape[1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got shape {x.shape}")
        inputs = []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            inputs.append(h)
            z = h @ layer.W.T
            z += layer.b
            if i != last:
                np.maximum(z, 0.0, out=z)
            h = z
        tape = MlpTape(id(self), inputs, h.shape, squeeze)
        return (h[0] if squeeze else h), tape

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, tape: MlpTape, dy) -> tuple[list[np.ndarray], np.ndarray]:
        """Return ``([dW0, db0, dW1, db1, ...], dx)`` for output gradient ``dy``."""
        if tape.owner != id(self) or len(tape.inputs) != len(self.layers):
            raise ValueError("tape was not produced by this network")
        g = np.asarray(dy, dtype=np.float64)
        if tape.squeeze:
            g = g[None, :]
        if g.shape != tape.out_shape:
            raise ValueError(f"output gradient shape {g.shape} does not match tape")
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            x = tape.inputs[i]
            grads[2 * i] = g.T @ x
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ layer.W
            if i > 0:
                g *= x > 0
        return grads, (g[0] if tape.squeeze else g)


@dataclass
class EmbeddingTable:
    values: np.ndarray  # (rows, dim)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("embedding values must be a matrix")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @classmethod
    def init(cls, rows: int, dim: int, rng: np.random.Generator, scale: float = 0.1) -> "EmbeddingTable":
        return cls(rng.uniform(-scale, scale, size=(rows, dim)))

    def lookup(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        if not np.issubdtype(idx.dtype, np.integer):
            raise TypeError("embedding indices must be integers")
        if np.any(idx < 0) or np.any(idx >= self.rows):
            raise IndexError(f"embedding index out of range [0, {self.rows})")
        return self.values[idx]

    def backward(self, idx, d_rows) -> np.ndarray:
        grad = np.zeros_like(self.values)
        np.add.at(grad, np.asarray(idx), d_rows)
        return grad


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **hyper)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], st: AdamState) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(st.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient")
    st.t += 1
    c1 = 1.0 - st.beta1**st.t
    c2 = 1.0 - st.beta2**st.t
    for p, g, m, v in zip(params, grads, st.m, st.v):
        m *= st.beta1
        m += (1.0 - st.beta1) * g
        v *= st.beta2
        v += (1.0 - st.beta2) * g * g
        p -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: int
    worst_index: tuple
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def grad_check(params: Sequence[np.ndarray], loss: Callable[[], float], grads: Sequence[np.ndarray],
               tolerance: float = 1e-4, h: float = 1e-5, floor: float = 1e-6,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic ``grads`` with central differences of ``loss``.

    ``loss`` is re-evaluated after perturbing each entry of ``params`` in
    place. ``max_entries`` subsamples entries per parameter array when given.
    The relative error is ``|g - fd| / max(floor * max(1, |loss|), |fd|)``.
    Differencing noise grows with the loss value, so the floor does too.
    """
    floor = floor * max(1.0, abs(loss()))
    worst = (0.0, -1, ())
    count = 0
    for pi, (p, g) in enumerate(zip(params, grads)):
        flat_idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            flat_idx = (rng or np.random.default_rng(0)).choice(p.size, max_entries, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, p.shape)
            orig = p[idx]
            p[idx] = orig + h
            up = loss()
            p[idx] = orig - h
            down = loss()
            p[idx] = orig
            fd = (up - down) / (2 * h)
            err = abs(g[idx] - fd) / max(floor, abs(fd))
            count += 1
            if err > worst[0]:
                worst = (err, pi, tuple(int(i) for i in idx))
    return GradCheckReport(worst[0], worst[1], worst[2], count, tolerance)
