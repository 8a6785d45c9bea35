"""Average MPC reward with the true simulator and with a learned ensemble, per agent.

    python scripts/reward_table.py --env cartpole --regime pure --episodes 20 --repeats 5
"""

import argparse
from pathlib import Path

from hetsim import envs
from hetsim.data import PolicyRegime, build_population, generate_dataset
from hetsim.envs import EnvKind
from hetsim.evaluation import eval_reward
from hetsim.planner import EnsembleOracle, MpcConfig, TrueEnvOracle
from hetsim.training import TrainConfig, train_ensemble


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--env", type=EnvKind.parse, default=EnvKind.CARTPOLE)
    ap.add_argument("--regime", default="random")
    ap.add_argument("--n-agents", type=int, default=100)
    ap.add_argument("--ensemble", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--episodes", type=int, default=20)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--candidates", type=int, default=1000)
    ap.add_argument("--horizon", type=int, default=50)
    ap.add_argument("--skip-learned", action="store_true", help="only run the true-simulator baseline")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", default="results")
    args = ap.parse_args()

    kind = args.env
    mpc = MpcConfig(args.horizon, args.candidates)
    bench = envs.benchmark_agents(kind)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    true = eval_reward(kind, [(str(i), p, TrueEnvOracle(kind, p)) for i, p in enumerate(bench)], mpc,
                       episodes=args.episodes, repeats=args.repeats, seed=args.seed, method="true env + MPC")
    print(true.format_table())
    true.to_csv(out / f"reward_{kind.value}_true.csv")
    if args.skip_learned:
        return

    regime = PolicyRegime.parse(args.regime)
    ds = generate_dataset(kind, build_population(kind, args.n_agents, args.seed), regime, args.seed)
    ens = train_ensemble(ds, TrainConfig.for_env(kind, epochs=args.epochs, seed=args.seed), members=args.ensemble)
    learned = eval_reward(kind, [(str(i), p, EnsembleOracle(ens, i)) for i, p in enumerate(bench)], mpc,
                          episodes=args.episodes, repeats=args.repeats, seed=args.seed,
                          method=f"learned ({regime.label})")
    print(learned.format_table())
    learned.to_csv(out / f"reward_{kind.value}_{args.regime}.csv")


if __name__ == "__main__":
    main()
