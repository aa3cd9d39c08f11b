#!/usr/bin/env python3
"""Two-moons uncertainty maps for every method at several sample counts.

Reproduces the toy classification comparison at desk scale: a deterministic
softmax map, a sub-ensemble, last-layer NUTS, and full-network NUTS, each
scored on a 2-D grid and written as plot-ready CSV heatmaps
(x, y, prob_class1, entropy, entropy_norm).

Usage:
    python scripts/two_moons_maps.py --out runs/moons_maps --seed 0
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from lastlayer.baselines import fit_map_softmax, fit_sub_ensemble, sample_predictions
from lastlayer.data import LatentDataset
from lastlayer.harness import emit_uncertainty_grid
from lastlayer.mlp import MlpSpec, OptimizerConfig, extract_features, mlp_from_flat, softmax, train_mlp
from lastlayer.nuts import SamplerConfig, run_chains
from lastlayer.rng import RngState
from lastlayer.targets import (
    GaussianPrior,
    PredictiveBundle,
    draw_from_prior,
    posterior_target_classification,
    posterior_target_full_network,
    predict_proba,
)
from lastlayer.toydata import make_grid, two_moons


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/moons_maps")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--n", type=int, default=200)
    parser.add_argument("--noise", type=float, default=0.1)
    parser.add_argument("--prior-std", type=float, default=1.0)
    parser.add_argument("--counts", type=int, nargs="+", default=[5, 50, 100])
    parser.add_argument("--resolution", type=int, default=60)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    root = RngState(args.seed)
    train = two_moons(args.n, args.noise, root.child(0))
    grid = make_grid((-2.0, 3.0), (-1.5, 2.0), args.resolution)

    spec = MlpSpec((2, 20, 20, 2))
    opt = OptimizerConfig(method="adam", learning_rate=0.02, epochs=150, batch_size=32, seed=args.seed)
    mlp, _ = train_mlp(train, spec, opt, root.child(2))
    feats = extract_features(mlp, train.features)
    latent = LatentDataset(feats, train.labels, 2)
    grid_feats = extract_features(mlp, grid.points)
    prior = GaussianPrior(args.prior_std)

    max_count = max(args.counts)

    # deterministic softmax
    clf = fit_map_softmax(latent, prior)
    emit_uncertainty_grid(lambda pts: predict_proba(clf, extract_features(mlp, pts)),
                          grid, out / "map.csv")
    print("wrote map.csv")

    # sub-ensemble of independently trained heads
    ens_opt = OptimizerConfig(method="adam", learning_rate=0.05, epochs=60, batch_size=32)
    ensemble = fit_sub_ensemble(latent, max_count, prior, ens_opt, root.child(3))
    for count in args.counts:
        bundle = sample_predictions(ensemble, grid_feats, count, root.child(4))
        emit_uncertainty_grid(lambda pts, b=bundle: b, grid, out / f"subensemble_{count}.csv")
        print(f"wrote subensemble_{count}.csv")

    # last-layer NUTS
    target = posterior_target_classification(latent, prior)
    config = SamplerConfig(burn_in=100, samples=max_count, chains=1, target_accept=0.7, seed=args.seed)
    draws = run_chains(target, config, [draw_from_prior(prior, target.dim, root.child(5))]).all_draws()
    for count in args.counts:
        bundle = predict_proba(draws[:count], grid_feats)
        emit_uncertainty_grid(lambda pts, b=bundle: b, grid, out / f"llhmc_{count}.csv")
        print(f"wrote llhmc_{count}.csv")

    # full-network NUTS on the same architecture
    full_target = posterior_target_full_network(spec, train, prior)
    full_config = SamplerConfig(burn_in=200, samples=max_count, chains=1, target_accept=0.8,
                                seed=args.seed + 1)
    full_draws = run_chains(full_target, full_config,
                            [draw_from_prior(prior, full_target.dim, root.child(6))]).all_draws()
    for count in args.counts:
        members = np.stack([softmax(mlp_from_flat(spec, theta).forward(grid.points))
                            for theta in full_draws[:count]])
        bundle = PredictiveBundle(members)
        emit_uncertainty_grid(lambda pts, b=bundle: b, grid, out / f"full_hmc_{count}.csv")
        print(f"wrote full_hmc_{count}.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
