"""Self-contained oracle suites: closed-form factorization, gradients, trilinear sum.

Each suite returns a ``CheckResult``; the CLI maps a failed result to exit 1.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import envs
from .envs import EnvKind
from .factor_model import FactorizedModel, Prop1Model
from .nn import grad_check
from .seeding import derive_rng


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float
    threshold: float
    instances: int
    seconds: float

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max error {self.max_error:.3e} (threshold {self.threshold:g}) "
                f"over {self.instances} instances in {self.seconds:.2f}s")


def check_prop1(draws: int = 100_000, seed: int = 0, threshold: float = 1e-12) -> CheckResult:
    """Rank-3 closed-form factors against the direct MountainCar update on random (s, a, g)."""
    t0 = time.perf_counter()
    rng = derive_rng(seed, "check", "prop1")
    s = np.column_stack([rng.uniform(envs.MC_MIN_POS, envs.MC_MAX_POS, draws),
                         rng.uniform(-envs.MC_MAX_SPEED, envs.MC_MAX_SPEED, draws)])
    a = (rng.integers(3, size=draws) - 1) * envs.MC_FORCE
    g = rng.uniform(*envs.MC_GRAVITY_RANGE, draws)
    err = float(np.max(np.abs(Prop1Model(g).predict(s, a) - envs.mc_closed_form(s, a, g))))
    return CheckResult("prop1", err < threshold, err, threshold, draws, time.perf_counter() - t0)


def _covariate_map_instance(rng: np.random.Generator):
    from .evaluation import fit_covariate_map  # evaluation imports the planner; keep checks light

    n_agents = 12
    model = FactorizedModel.init(EnvKind.CARTPOLE, n_agents, 3, rng, hidden=(8,))
    cov = np.column_stack([rng.uniform(*envs.CP_FORCE_RANGE, n_agents), rng.uniform(*envs.CP_LENGTH_RANGE, n_agents)])
    cmap = fit_covariate_map(model, cov, p=1.0, seed=int(rng.integers(2**31)), epochs=2)
    x = cov[rng.permutation(n_agents)[:6]]
    y = rng.normal(size=(6, 3))
    _, grads = cmap.loss_and_grads(x, y)
    return cmap.net.parameters(), (lambda: cmap.loss_and_grads(x, y)[0]), grads


def _factor_model_instance(rng: np.random.Generator, kind: EnvKind):
    model = FactorizedModel.init(kind, 5, int(rng.integers(1, 6)), rng, hidden=(12,))
    model.state_net.layers[0].b[:] = rng.normal(scale=0.1, size=12)
    B = 16
    n = rng.integers(5, size=B)
    s = rng.normal(size=(B, kind.state_dim))
    k = rng.integers(kind.n_actions, size=B)
    sp = s + rng.normal(scale=0.1, size=s.shape)
    _, grads = model.loss_and_grads(n, s, k, sp)
    return model.parameters(), (lambda: model.loss(n, s, k, sp)), grads


def check_grads(instances: int = 10, seed: int = 0, threshold: float = 1e-4) -> CheckResult:
    """Central differences on ``instances`` factor models and ``instances`` covariate maps."""
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(instances):
        kind = EnvKind.CARTPOLE if i % 2 else EnvKind.MOUNTAIN_CAR
        builders = (lambda r: _factor_model_instance(r, kind), _covariate_map_instance)
        for j, build in enumerate(builders):
            params, loss, grads = build(derive_rng(seed, "check", "grads", i, j))
            worst = max(worst, grad_check(params, loss, grads, tolerance=threshold).max_rel_err)
    return CheckResult("grads", worst < threshold, worst, threshold, 2 * instances, time.perf_counter() - t0)


def naive_trilinear(U, V, W) -> np.ndarray:
    """Triple loop over batch, state dimension and rank."""
    B, D, r = V.shape
    out = np.zeros((B, D))
    for b in range(B):
        for d in range(D):
            acc = 0.0
            for l in range(r):
                acc += float(U[b, l]) * float(V[b, d, l]) * float(W[b, l])
            out[b, d] = acc
    return out


def check_trilinear(instances: int = 1000, seed: int = 0, max_ulp: int = 4) -> CheckResult:
    """``predict_delta`` against a naive loop over the model's own factors, in ulps."""
    t0 = time.perf_counter()
    rng = derive_rng(seed, "check", "trilinear")
    worst = 0.0
    models = [FactorizedModel.init(kind, 4, r, rng, hidden=(16,))
              for kind in EnvKind for r in range(1, 7)]
    for i in range(instances):
        model = models[i % len(models)]
        s = rng.normal(size=model.state_dim)
        n, k = int(rng.integers(model.n_agents)), int(rng.integers(model.n_actions))
        got = model.predict_delta(n, s, k)
        U, V, W, _ = model.factors(n, s, k)
        want = naive_trilinear(U, V, W)[0]
        ulp = np.spacing(np.maximum(np.abs(want), np.finfo(float).tiny))
        worst = max(worst, float(np.max(np.abs(got - want) / ulp)))
    return CheckResult("trilinear", worst <= max_ulp, worst, max_ulp, instances, time.perf_counter() - t0)


SUITES = {"prop1": check_prop1, "grads": check_grads, "trilinear": check_trilinear}
