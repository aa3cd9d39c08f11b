#!/usr/bin/env python3
"""Prior-scale sensitivity: F1 versus retained sample count per prior std.

For each prior standard deviation in the sweep, runs last-layer NUTS on the
two-moons pipeline and evaluates the cumulative F1 as draws accrue, mirroring
the sensitivity study protocol (target acceptance 0.7, 100 burn-in draws).
Writes a long-format CSV (prior_std, count, f1_mean, f1_std).

Usage:
    python scripts/prior_sweep.py --out runs/prior_sweep.csv --seeds 0 1 2
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from lastlayer.data import LatentDataset
from lastlayer.harness import dependent_sample_curve
from lastlayer.mlp import MlpSpec, OptimizerConfig, extract_features, train_mlp
from lastlayer.nuts import SamplerConfig, run_chains
from lastlayer.rng import RngState
from lastlayer.targets import GaussianPrior, draw_from_prior, posterior_target_classification
from lastlayer.toydata import two_moons

PRIOR_GRID = [0.01, 0.1, 1.0, 2.5, 5.0, 10.0]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/prior_sweep.csv")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--n", type=int, default=200)
    parser.add_argument("--noise", type=float, default=0.2)
    parser.add_argument("--samples", type=int, default=50)
    parser.add_argument("--priors", type=float, nargs="+", default=PRIOR_GRID)
    args = parser.parse_args()

    rows = ["prior_std,count,f1_mean,f1_std"]
    for prior_std in args.priors:
        prior = GaussianPrior(prior_std)
        per_seed_curves = []
        for seed in args.seeds:
            root = RngState(seed)
            train = two_moons(args.n, args.noise, root.child(0))
            test = two_moons(args.n, args.noise, root.child(1))
            spec = MlpSpec((2, 20, 20, 2))
            opt = OptimizerConfig(method="adam", learning_rate=0.02, epochs=150,
                                  batch_size=32, seed=seed)
            mlp, _ = train_mlp(train, spec, opt, root.child(2))
            latent = LatentDataset(extract_features(mlp, train.features), train.labels, 2)
            target = posterior_target_classification(latent, prior)
            config = SamplerConfig(burn_in=100, samples=args.samples, chains=1,
                                   target_accept=0.7, seed=seed)
            init = draw_from_prior(prior, target.dim, root.child(3))
            sample_set = run_chains(target, config, [init])
            # each chain is scored against its own backbone's projection
            curve = dependent_sample_curve(sample_set, extract_features(mlp, test.features),
                                           test.labels, seeds=[seed])
            per_seed_curves.append(curve["f1_mean"])
        stacked = list(zip(*per_seed_curves))
        for count, values in enumerate(stacked, start=1):
            mean = sum(values) / len(values)
            std = (sum((v - mean) ** 2 for v in values) / len(values)) ** 0.5
            rows.append(f"{prior_std},{count},{mean:.6f},{std:.6f}")
        print(f"prior_std={prior_std}: final F1 {stacked[-1] and sum(stacked[-1]) / len(stacked[-1]):.2f}")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
