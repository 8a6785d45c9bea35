"""Retrain MountainCar ensembles on shrinking agent populations and track prediction error and reward.

    python scripts/scarcity_sweep.py --sizes 25,50,100,250 --episodes 5
"""

import argparse

from hetsim.envs import AgentParams, EnvKind
from hetsim.evaluation import scarcity_sweep
from hetsim.training import TrainConfig

MC = EnvKind.MOUNTAIN_CAR


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="25,50,100,250")
    ap.add_argument("--ensemble", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--episodes", type=int, default=2)
    ap.add_argument("--trials", type=int, default=200)
    ap.add_argument("--reward-gravity", type=float, default=0.0025)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/scarcity.csv")
    args = ap.parse_args()

    res = scarcity_sweep(MC, [int(x) for x in args.sizes.split(",")],
                         TrainConfig.for_env(MC, epochs=args.epochs, seed=args.seed), members=args.ensemble,
                         episodes=args.episodes, trials=args.trials,
                         reward_agent=AgentParams.mountain_car(args.reward_gravity), seed=args.seed, log=print)
    print(res.format_table())
    res.to_csv(args.out)


if __name__ == "__main__":
    main()
