"""Prediction on agents absent from training, via a covariate-to-factor map fitted on a fraction p of agents.

    python scripts/unseen_sweep.py --unseen 0.002,0.003 --p 1,0.5,0.25,0.1
"""

import argparse
import csv
from pathlib import Path

from hetsim.data import PolicyRegime, build_population, generate_dataset
from hetsim.envs import AgentParams, EnvKind
from hetsim.evaluation import eval_prediction, infer_unseen_ensemble
from hetsim.training import TrainConfig, train_ensemble

MC = EnvKind.MOUNTAIN_CAR


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--unseen", default="0.002", help="comma-separated gravities")
    ap.add_argument("--p", default="1,0.5,0.25,0.1")
    ap.add_argument("--n-agents", type=int, default=100)
    ap.add_argument("--ensemble", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--map-epochs", type=int, default=500)
    ap.add_argument("--trials", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/unseen.csv")
    args = ap.parse_args()

    ds = generate_dataset(MC, build_population(MC, args.n_agents, args.seed), PolicyRegime.random(), args.seed)
    ens = train_ensemble(ds, TrainConfig.for_env(MC, epochs=args.epochs, seed=args.seed), members=args.ensemble)
    unseen = [AgentParams.mountain_car(float(g)) for g in args.unseen.split(",")]
    rows = []
    for p in (float(x) for x in args.p.split(",")):
        ext, idx = infer_unseen_ensemble(ens, ds.covariates(), [a.covariates for a in unseen], p=p, seed=args.seed,
                                         epochs=args.map_epochs)
        rep = eval_prediction(ext, MC, list(zip(idx.tolist(), unseen)), trials=args.trials, seed=args.seed)
        print(f"p = {p}\n{rep.format_table()}")
        rows += [[p, a.gravity, r.mean_rmse, r.median_r2] for a, r in zip(unseen, rep.rows)]

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p", "gravity", "mean_rmse", "median_r2"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
