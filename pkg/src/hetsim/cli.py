"""Command-line entry point: ``hetsim <command> [options]``.

Every command accepts ``--config file.json``; keys are option names (with
underscores) and explicit flags override them. Exit codes: 0 success,
1 an oracle check failed, 2 invalid usage or input.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__, envs
from .envs import AgentParams, EnvKind

log = logging.getLogger("hetsim")


class UsageError(Exception):
    pass


# -- argument helpers -------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _env(text: str) -> EnvKind:
    try:
        return EnvKind.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def parse_agents(kind: EnvKind, text: str) -> list[AgentParams]:
    """``"0.0025,0.0035"`` for MountainCar, ``"10:0.5,2:0.5"`` (force:length) for CartPole."""
    agents = []
    for item in str(text).split(","):
        item = item.strip()
        if not item:
            continue
        try:
            values = [float(v) for v in item.split(":")]
            agents.append(AgentParams.from_covariates(kind, values))
        except (TypeError, ValueError):
            raise UsageError(f"cannot parse agent {item!r} for {kind.value}") from None
    if not agents:
        raise UsageError("no agents given")
    return agents


def _version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def provenance(args: argparse.Namespace) -> dict:
    config = {k: (v.value if isinstance(v, EnvKind) else v) for k, v in vars(args).items()
              if k not in ("func", "config", "out", "out_csv")}
    return {"command": args.command, "config": config, "seed": getattr(args, "seed", None),
            "version": _version(), "numpy": np.__version__}


def _write_sidecar(path, args) -> None:
    Path(str(path) + ".provenance.json").write_text(json.dumps(provenance(args), indent=2, default=str))


def _table_agents(ens, data_path) -> tuple[EnvKind, list[AgentParams]]:
    kind = ens.kind
    if data_path:
        from .data import load_dataset

        ds = load_dataset(data_path)
        if ds.kind is not kind or ds.n_agents != ens.n_agents:
            raise UsageError("dataset does not match the model's environment or agent count")
        return kind, ds.agents
    if not ens.agents:
        raise UsageError("checkpoint has no agent table; pass --data")
    return kind, [AgentParams.from_covariates(kind, [a[c] for c in kind.covariate_names]) for a in ens.agents]


def _resolve(table: list[AgentParams], wanted: list[AgentParams]) -> list[tuple[int, AgentParams]]:
    cov = np.array([a.covariates for a in table])
    out = []
    for a in wanted:
        hits = np.flatnonzero(np.all(np.isclose(cov, a.covariates, rtol=1e-9, atol=0), axis=1))
        if len(hits) == 0:
            raise UsageError(f"agent {a.to_dict()} is not in the model's table (see the 'unseen' command)")
        out.append((int(hits[0]), table[hits[0]]))
    return out


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .data import PolicyRegime, build_population, generate_dataset, sample_agents, save_dataset
    from .seeding import derive_rng

    regime = PolicyRegime.parse(args.regime, args.eps)
    if args.benchmark_agents:
        agents = build_population(args.env, args.n_agents, args.seed)
    else:
        agents = sample_agents(args.env, args.n_agents, derive_rng(args.seed, "agents"))
    ds = generate_dataset(args.env, agents, regime, args.seed)
    save_dataset(ds, args.out, provenance=provenance(args))
    log.info("wrote %d agents, %d transitions to %s", ds.n_agents, ds.n_transitions, args.out)
    return 0


def cmd_train(args) -> int:
    from .data import load_dataset
    from .training import TrainConfig, rank_select, save_ensemble, train_ensemble

    ds = load_dataset(args.data)
    hidden = tuple(args.hidden) if args.hidden else None
    overrides = dict(lr=args.lr, batch_size=args.batch, epochs=args.epochs, seed=args.seed, hidden=hidden)
    if args.rank == "auto":
        cfg = TrainConfig.for_env(ds.kind, **overrides)
        sel = rank_select(ds, args.rank_candidates, cfg)
        for r, mse in sorted(sel.val_mse.items()):
            print(f"rank {r}: validation MSE {mse:.3e}")
        print(f"selected rank {sel.rank}")
        rank = sel.rank
    else:
        try:
            rank = int(args.rank) if args.rank is not None else None
        except ValueError:
            raise UsageError(f"--rank must be an integer or 'auto', got {args.rank!r}") from None
    cfg = TrainConfig.for_env(ds.kind, rank=rank, **overrides)
    ens = train_ensemble(ds, cfg, members=args.ensemble, threads=args.threads)
    for i, m in enumerate(ens.members):
        print(f"member {i} (seed {m.meta['config']['seed']}): final loss {m.meta['final_loss']:.4e}")
    save_ensemble(ens, args.out, provenance=provenance(args))
    log.info("wrote %d-member ensemble to %s", len(ens), args.out)
    return 0


def cmd_eval_pred(args) -> int:
    from .evaluation import eval_prediction, write_prediction_csv
    from .training import load_ensemble

    ens = load_ensemble(args.model)
    kind, table = _table_agents(ens, args.data)
    if args.agents == "all":
        agents = list(enumerate(table))
    else:
        wanted = parse_agents(kind, args.agents) if args.agents else envs.benchmark_agents(kind)
        agents = _resolve(table, wanted)
    policies = ["scripted", "random"] if args.test_policy == "both" else [args.test_policy]
    reports = [eval_prediction(ens, kind, agents, trials=args.trials, test_policy=p, horizon=args.horizon,
                               seed=args.seed) for p in policies]
    for rep in reports:
        print(rep.format_table())
    if args.out_csv:
        write_prediction_csv(reports, args.out_csv)
        _write_sidecar(args.out_csv, args)
    return 0


def cmd_eval_reward(args) -> int:
    from .evaluation import eval_reward
    from .planner import EnsembleOracle, MpcConfig, TrueEnvOracle
    from .training import load_ensemble

    mpc = MpcConfig(args.horizon, args.candidates, args.tie_break)
    if args.true_env:
        if args.env is None:
            raise UsageError("--true-env needs --env")
        kind = args.env
        wanted = parse_agents(kind, args.agents) if args.agents else [envs.default_params(kind)]
        triples = [(f"{i}", a, TrueEnvOracle(kind, a)) for i, a in enumerate(wanted)]
        method = "true env + MPC"
    else:
        ens = load_ensemble(args.model, expected_env=args.env)
        kind, table = _table_agents(ens, args.data)
        wanted = parse_agents(kind, args.agents) if args.agents else [envs.default_params(kind)]
        triples = [(f"{n}", a, EnsembleOracle(ens, n)) for n, a in _resolve(table, wanted)]
        method = "learned model + MPC"
    rep = eval_reward(kind, triples, mpc, episodes=args.episodes, repeats=args.repeats, seed=args.seed,
                      method=method)
    print(rep.format_table())
    if args.out_csv:
        rep.to_csv(args.out_csv)
        _write_sidecar(args.out_csv, args)
    return 0


def cmd_export_factors(args) -> int:
    from .evaluation import export_factors, pca_project, spearman
    from .training import load_ensemble

    ens = load_ensemble(args.model)
    if not 0 <= args.member < len(ens):
        raise UsageError(f"--member must be in [0, {len(ens)})")
    model = ens.members[args.member]
    kind, table = _table_agents(ens, args.data)
    cov = np.array([a.covariates for a in table])
    extra = {}
    if args.pca:
        res = pca_project(model.agent_table.values, dims=min(args.pca, model.rank))
        for j in range(res.coords.shape[1]):
            extra[f"pc_{j + 1}"] = res.coords[:, j]
        ratios = ", ".join(f"{r:.3f}" for r in res.explained_variance_ratio)
        print(f"explained variance ratio: {ratios}")
        for c, name in enumerate(kind.covariate_names):
            print(f"spearman({name}, pc_1) = {spearman(cov[:, c], res.coords[:, 0]):+.3f}")
    export_factors(model, cov, args.out_csv, extra)
    _write_sidecar(args.out_csv, args)
    return 0


def cmd_unseen(args) -> int:
    from .evaluation import covariate_map_to_dict, eval_prediction, fit_covariate_map, infer_unseen
    from .training import Ensemble, load_ensemble

    ens = load_ensemble(args.model)
    kind, table = _table_agents(ens, args.data)
    unseen = parse_agents(kind, args.covariates)
    cov = np.array([a.covariates for a in table])
    result = {"provenance": provenance(args), "unseen": [a.to_dict() for a in unseen], "runs": []}
    for p in args.p:
        maps, members, idx = [], [], None
        for m in ens.members:
            cmap = fit_covariate_map(m, cov, p=p, seed=args.seed, epochs=args.epochs)
            ext, idx = infer_unseen(cmap, m, [a.covariates for a in unseen])
            maps.append(covariate_map_to_dict(cmap))
            members.append(ext)
        rep = eval_prediction(Ensemble(members), kind, list(zip(idx.tolist(), unseen)), trials=args.trials,
                              test_policy=args.test_policy, seed=args.seed)
        print(f"p = {p}")
        print(rep.format_table())
        result["runs"].append({"p": p, "maps": maps, "rows": [
            {"covariates": r.covariates, "mean_rmse": r.mean_rmse, "median_r2": r.median_r2} for r in rep.rows]})
    if args.out:
        Path(args.out).write_text(json.dumps(result))
    return 0


def cmd_check(args) -> int:
    from .checks import SUITES

    names = list(SUITES) if args.suite == "all" else [args.suite]
    ok = True
    for name in names:
        res = SUITES[name](seed=args.seed)
        print(res.summary())
        ok &= res.passed
    return 0 if ok else 1


def cmd_sweep(args) -> int:
    from .data import PolicyRegime
    from .evaluation import scarcity_sweep
    from .planner import MpcConfig
    from .training import TrainConfig

    kind = args.env
    hidden = tuple(args.hidden) if args.hidden else None
    cfg = TrainConfig.for_env(kind, epochs=args.epochs, seed=args.seed, hidden=hidden)
    reward_agent = parse_agents(kind, args.reward_agent)[0] if args.reward_agent else None
    rep = scarcity_sweep(kind, args.n_agents, cfg, members=args.ensemble,
                         regime=PolicyRegime.parse(args.regime, args.eps),
                         mpc=MpcConfig(args.horizon, args.candidates, args.tie_break), episodes=args.episodes,
                         trials=args.trials, reward_agent=reward_agent, seed=args.seed, threads=args.threads,
                         log=log.info)
    print(rep.format_table())
    if args.out_csv:
        rep.to_csv(args.out_csv)
        _write_sidecar(args.out_csv, args)
    return 0


# -- parser -------------------------------------------------------------------------

def _mpc_flags(p) -> None:
    p.add_argument("--horizon", type=int, default=50)
    p.add_argument("--candidates", type=int, default=1000)
    p.add_argument("--tie-break", choices=["reach", "index"], default="reach",
                   help="how to resolve a candidate set whose scores are all equal")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults; flags override it")
    common.add_argument("--seed", type=int, default=0, help="root seed for all random sub-streams")
    common.add_argument("--threads", type=int, default=1, help="cap on worker threads")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="hetsim", description="Simulate heterogeneous agents with factorized dynamics models.",
                                     epilog="Exit codes: 0 success, 1 failed oracle check, 2 invalid usage or input.")
    parser.add_argument("--version", action="version", version=f"hetsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="roll one trajectory per agent")
    p.add_argument("--env", type=_env, required=True)
    p.add_argument("--n-agents", type=int, default=100)
    p.add_argument("--regime", default="random", help="pure, random or pure-eps")
    p.add_argument("--eps", type=float, default=None, help="exploration rate for pure-eps (default 0.2)")
    p.add_argument("--no-benchmark-agents", dest="benchmark_agents", action="store_false",
                   help="do not place the fixed benchmark agents first")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train an ensemble of factorized models")
    p.add_argument("--data", required=True)
    p.add_argument("--rank", default=None, help="integer rank, or 'auto' to pick by validation error")
    p.add_argument("--rank-candidates", type=_int_list, default=[1, 2, 3, 4, 5, 6])
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--hidden", type=_int_list, default=None, help="state-encoder hidden widths, e.g. 256")
    p.add_argument("--ensemble", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-pred", parents=[common], help="open-loop prediction error")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="dataset whose agent table the model was trained on")
    p.add_argument("--agents", help="agents to evaluate, or 'all' (default: benchmark agents)")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--horizon", type=int, default=50)
    p.add_argument("--test-policy", choices=["scripted", "random", "both"], default="both")
    p.add_argument("--out-csv")
    p.set_defaults(func=cmd_eval_pred)

    p = sub.add_parser("eval-reward", parents=[common], help="average episode reward under MPC")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--true-env", action="store_true", help="plan with the real dynamics")
    p.add_argument("--env", type=_env)
    p.add_argument("--data")
    p.add_argument("--agents", help="default: the environment's default agent")
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--repeats", type=int, default=5)
    _mpc_flags(p)
    p.add_argument("--out-csv")
    p.set_defaults(func=cmd_eval_reward)

    p = sub.add_parser("export-factors", parents=[common], help="write agent factors (and PCA) to CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--member", type=int, default=0)
    p.add_argument("--pca", type=int, default=2, help="number of principal components to append (0: none)")
    p.add_argument("--out-csv", required=True)
    p.set_defaults(func=cmd_export_factors)

    p = sub.add_parser("unseen", parents=[common], help="simulate agents absent from training")
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--covariates", required=True, help="unseen agents, same syntax as --agents")
    p.add_argument("--p", type=_float_list, default=[1.0], help="fractions of training agents for the map")
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--test-policy", choices=["scripted", "random"], default="scripted")
    p.add_argument("--out")
    p.set_defaults(func=cmd_unseen)

    p = sub.add_parser("check", parents=[common], help="run an oracle suite")
    p.add_argument("suite", choices=["prop1", "grads", "trilinear", "all"])
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("sweep", parents=[common], help="retrain and evaluate across population sizes")
    p.add_argument("kind", choices=["scarcity"])
    p.add_argument("--env", type=_env, default=EnvKind.MOUNTAIN_CAR)
    p.add_argument("--n-agents", type=_int_list, default=[25, 50, 100, 250])
    p.add_argument("--regime", default="random")
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--ensemble", type=int, default=5)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--hidden", type=_int_list, default=None)
    p.add_argument("--episodes", type=int, default=2)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--reward-agent", help="benchmark agent used for the reward column")
    _mpc_flags(p)
    p.add_argument("--out-csv")
    p.set_defaults(func=cmd_sweep)
    return parser


def _subparsers(parser: argparse.ArgumentParser) -> dict:
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return action.choices


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Install ``--config`` values as defaults of the chosen subcommand."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    subs = _subparsers(parser)
    command = next((a for a in argv if a in subs), None)
    if command is None:
        return
    try:
        cfg = json.loads(Path(known.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read config {known.config}: {exc}")
    if not isinstance(cfg, dict):
        parser.error("config must be a JSON object")
    sub = subs[command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None or dest in ("config", "help"):
            parser.error(f"unknown config key for {command}: {key}")
        if action.type is not None and isinstance(value, (str, int, float)) and not isinstance(value, bool):
            try:
                value = action.type(str(value))
            except (argparse.ArgumentTypeError, ValueError, TypeError) as exc:
                parser.error(f"config key {key}: {exc}")
        if action.choices is not None and value not in action.choices:
            parser.error(f"config key {key}: {value!r} is not one of {list(action.choices)}")
        defaults[dest] = value
        action.required = False
    sub.set_defaults(**defaults)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    from .data import DatasetFormatError
    from .training import CheckpointError

    try:
        return args.func(args)
    except (UsageError, DatasetFormatError, CheckpointError, FileNotFoundError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
