"""Project learned agent factors onto two principal components and correlate them with the covariates.

Works on a saved checkpoint (``hetsim train --out``); writes one CSV per member.

    python scripts/factor_pca.py --model runs/mc.npz --out-dir results
"""

import argparse
from pathlib import Path

from hetsim.evaluation import export_factors, pca_project, spearman
from hetsim.training import load_ensemble


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", required=True)
    ap.add_argument("--out-dir", default="results")
    args = ap.parse_args()

    ens = load_ensemble(args.model)
    if not ens.agents:
        raise SystemExit("checkpoint has no agent table")
    names = ens.kind.covariate_names
    cov = [[a[c] for c in names] for a in ens.agents]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for m, model in enumerate(ens.members):
        pca = pca_project(model.agent_table.values)
        ratio = ", ".join(f"{x:.3f}" for x in pca.explained_variance_ratio)
        corr = ", ".join(f"{c}: {spearman([row[j] for row in cov], pca.coords[:, 0]):+.3f}" for j, c in enumerate(names))
        print(f"member {m}: explained variance {ratio}; spearman with pc_1 {corr}")
        export_factors(model, cov, out / f"factors_{m}.csv",
                       extra={f"pc_{i + 1}": pca.coords[:, i] for i in range(pca.coords.shape[1])})


if __name__ == "__main__":
    main()
