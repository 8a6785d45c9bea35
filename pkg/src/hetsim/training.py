"""Mini-batch Adam training of factorized dynamics models, ensembles, checkpoints."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import OfflineDataset
from .envs import EnvKind
from .factor_model import DEFAULT_HIDDEN, DEFAULT_RANK, FactorizedModel
from .nn import AdamState, DenseLayer, EmbeddingTable, Mlp, adam_step
from .seeding import derive_rng

CHECKPOINT_VERSION = 1
DEFAULT_BATCH = {EnvKind.MOUNTAIN_CAR: 512, EnvKind.CARTPOLE: 64}


class CheckpointError(ValueError):
    """Checkpoint has the wrong version, shape or environment."""


@dataclass(frozen=True)
class TrainConfig:
    env: EnvKind
    rank: int
    lr: float = 1e-3
    batch_size: int = 512
    epochs: int = 300
    seed: int = 0
    hidden: tuple[int, ...] = DEFAULT_HIDDEN

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")

    @classmethod
    def for_env(cls, env: EnvKind, **overrides) -> "TrainConfig":
        base = dict(env=env, rank=DEFAULT_RANK[env], batch_size=DEFAULT_BATCH[env])
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["env"] = self.env.value
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["env"] = EnvKind.parse(d["env"])
        d["hidden"] = tuple(d.get("hidden", DEFAULT_HIDDEN))
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Ensemble:
    members: list[FactorizedModel]

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError("empty ensemble")
        m0 = self.members[0]
        for m in self.members[1:]:
            if (m.kind, m.n_agents, m.rank) != (m0.kind, m0.n_agents, m0.rank):
                raise ValueError("ensemble members disagree on env, agent count or rank")

    def __len__(self) -> int:
        return len(self.members)

    @property
    def kind(self) -> EnvKind:
        return self.members[0].kind

    @property
    def n_agents(self) -> int:
        return self.members[0].n_agents

    @property
    def rank(self) -> int:
        return self.members[0].rank

    @property
    def agents(self) -> list:
        """Agent covariates recorded at training time, if any."""
        return self.members[0].meta.get("agents", [])

    def predict_next(self, n, s, k) -> np.ndarray:
        """Mean of the members' next-state predictions."""
        return np.mean([m.predict_next(n, s, k) for m in self.members], axis=0)


def _check_dataset(ds: OfflineDataset, cfg: TrainConfig) -> None:
    if ds.kind is not cfg.env:
        raise ValueError(f"dataset is {ds.kind.value} but config is {cfg.env.value}")
    if ds.n_transitions == 0:
        raise ValueError("empty dataset")


def fit(model: FactorizedModel, n, s, k, sp, cfg: TrainConfig, rng: np.random.Generator) -> list[float]:
    """Run ``cfg.epochs`` of shuffled mini-batch Adam on the given arrays in place."""
    params = model.parameters()
    opt = AdamState.for_params(params, lr=cfg.lr)
    total = len(k)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(total)
        weighted = 0.0
        for start in range(0, total, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = model.loss_and_grads(n[idx], s[idx], k[idx], sp[idx])
            adam_step(params, grads, opt)
            weighted += loss * len(idx)
        history.append(weighted / total)
    return history


def train_model(ds: OfflineDataset, cfg: TrainConfig) -> tuple[FactorizedModel, list[float]]:
    """Train one model; returns it with the per-epoch mean training loss."""
    _check_dataset(ds, cfg)
    model = FactorizedModel.init(ds.kind, ds.n_agents, cfg.rank, derive_rng(cfg.seed, "init"), cfg.hidden)
    n, s, k, sp = ds.arrays()
    history = fit(model, n, s, k, sp, cfg, derive_rng(cfg.seed, "shuffle"))
    model.meta = {"config": cfg.to_dict(), "config_digest": cfg.digest(), "dataset": dataset_summary(ds),
                  "agents": [a.to_dict() for a in ds.agents], "final_loss": history[-1]}
    return model, history


def train_ensemble(ds: OfflineDataset, cfg: TrainConfig, members: int = 5, threads: int = 1) -> Ensemble:
    """Members use seeds ``cfg.seed + m``; results do not depend on ``threads``."""
    if members < 1:
        raise ValueError("ensemble needs at least one member")
    cfgs = [replace(cfg, seed=cfg.seed + m) for m in range(members)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            models = list(pool.map(lambda c: train_model(ds, c)[0], cfgs))
    else:
        models = [train_model(ds, c)[0] for c in cfgs]
    return Ensemble(models)


@dataclass
class RankSelection:
    rank: int
    val_mse: dict[int, float] = field(default_factory=dict)


def rank_select(ds: OfflineDataset, candidates, cfg: TrainConfig, val_fraction: float = 0.2) -> RankSelection:
    """Hold out ``val_fraction`` of transitions and pick the rank with lowest validation MSE.

    Ties go to the smaller rank.
    """
    candidates = sorted(set(int(r) for r in candidates))
    if not candidates:
        raise ValueError("no candidate ranks")
    _check_dataset(ds, cfg)
    n, s, k, sp = ds.arrays()
    perm = derive_rng(cfg.seed, "rank-split").permutation(len(k))
    n_val = max(1, int(round(val_fraction * len(k))))
    val, tr = perm[:n_val], perm[n_val:]
    scores = {}
    for r in candidates:
        c = replace(cfg, rank=r)
        model = FactorizedModel.init(ds.kind, ds.n_agents, r, derive_rng(c.seed, "init"), c.hidden)
        fit(model, n[tr], s[tr], k[tr], sp[tr], c, derive_rng(c.seed, "shuffle"))
        scores[r] = model.loss(n[val], s[val], k[val], sp[val])
    best = min(candidates, key=lambda r: (scores[r], r))
    return RankSelection(best, scores)


def dataset_summary(ds: OfflineDataset) -> dict:
    return {"env": ds.kind.value, "n_agents": ds.n_agents, "n_transitions": ds.n_transitions,
            "regime": ds.regime.label, "seed": ds.seed, **ds.metadata}


# -- checkpoints -------------------------------------------------------------

def model_to_dict(model: FactorizedModel) -> dict:
    params = {name: p.tolist() for name, p in zip(model.parameter_names(), model.parameters())}
    return {
        "format_version": CHECKPOINT_VERSION,
        "env": model.kind.value,
        "rank": model.rank,
        "n_agents": model.n_agents,
        "state_net_sizes": model.state_net.sizes,
        "config": model.meta.get("config"),
        "meta": model.meta,
        "params": params,
    }


def model_from_dict(d: dict) -> FactorizedModel:
    if d.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {d.get('format_version')!r}")
    try:
        kind = EnvKind.parse(d["env"])
        rank, n_agents = int(d["rank"]), int(d["n_agents"])
        p = d["params"]
        agents = EmbeddingTable(np.array(p["agent_table"], dtype=np.float64))
        actions = EmbeddingTable(np.array(p["action_table"], dtype=np.float64))
        layers = []
        for i in range(len(d["state_net_sizes"]) - 1):
            layers.append(DenseLayer(np.array(p[f"state_net.{i}.W"]), np.array(p[f"state_net.{i}.b"])))
        model = FactorizedModel(kind, rank, agents, actions, Mlp(layers), d.get("meta", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    if model.n_agents != n_agents:
        raise CheckpointError("agent table does not match n_agents")
    return model


def save_model(model: FactorizedModel, path, provenance: dict | None = None) -> None:
    d = model_to_dict(model)
    if provenance is not None:
        d["provenance"] = provenance
    Path(path).write_text(json.dumps(d))


def save_ensemble(ens: Ensemble, path, provenance: dict | None = None) -> None:
    d = {"format_version": CHECKPOINT_VERSION, "kind": "ensemble", "env": ens.kind.value,
         "rank": ens.rank, "n_agents": ens.n_agents, "members": [model_to_dict(m) for m in ens.members]}
    if provenance is not None:
        d["provenance"] = provenance
    Path(path).write_text(json.dumps(d))


def _read(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc.msg})") from None


def _expect_env(kind: EnvKind, expected: EnvKind | str | None) -> None:
    if expected is not None and kind is not EnvKind.parse(expected):
        raise CheckpointError(f"checkpoint is for {kind.value}, expected {EnvKind.parse(expected).value}")


def load_model(path, expected_env: EnvKind | str | None = None) -> FactorizedModel:
    d = _read(path)
    if d.get("kind") == "ensemble":
        raise CheckpointError("file holds an ensemble; use load_ensemble")
    model = model_from_dict(d)
    _expect_env(model.kind, expected_env)
    return model


def load_ensemble(path, expected_env: EnvKind | str | None = None) -> Ensemble:
    """Load an ensemble checkpoint; a single-model checkpoint loads as M=1."""
    d = _read(path)
    if d.get("kind") == "ensemble":
        if d.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {d.get('format_version')!r}")
        ens = Ensemble([model_from_dict(m) for m in d["members"]])
    else:
        ens = Ensemble([model_from_dict(d)])
    _expect_env(ens.kind, expected_env)
    return ens
