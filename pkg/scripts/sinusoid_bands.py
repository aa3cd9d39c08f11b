#!/usr/bin/env python3
"""Regression toy: predictive bands from last-layer and full-network NUTS.

Noisy observations of a sinusoid come from two disjoint x ranges; the gap in
between is where the uncertainty estimates should widen. Writes one CSV per
method with columns (x, mean, std) over a dense x grid, plus the training
observations.

The default architecture follows the toy regression setup (five hidden
layers of 50 units), which makes full-network sampling take a few minutes;
--quick switches to a small network for a fast look.

Usage:
    python scripts/sinusoid_bands.py --out runs/sinusoid --seed 0 --quick
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from lastlayer.data import RegressionDataset
from lastlayer.mlp import MlpSpec, OptimizerConfig, extract_features, mlp_from_flat, train_mlp
from lastlayer.nuts import SamplerConfig, run_chains
from lastlayer.rng import RngState
from lastlayer.targets import (
    GaussianPrior,
    RegressionHead,
    draw_from_prior,
    posterior_target_full_network,
    posterior_target_regression,
)
from lastlayer.toydata import sinusoid_regression


def write_band(path: Path, xs: np.ndarray, members: np.ndarray) -> None:
    mean = members.mean(axis=0)
    std = members.std(axis=0)
    lines = ["x,mean,std"]
    lines += [f"{x:.10g},{m:.10g},{s:.10g}" for x, m, s in zip(xs, mean, std)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/sinusoid")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--n", type=int, default=200)
    parser.add_argument("--noise", type=float, default=0.1)
    parser.add_argument("--prior-std", type=float, default=1.0)
    parser.add_argument("--noise-std", type=float, default=0.1, help="likelihood observation noise")
    parser.add_argument("--samples", type=int, default=50)
    parser.add_argument("--quick", action="store_true", help="small network, short chains")
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    root = RngState(args.seed)
    data = sinusoid_regression(args.n, args.noise, root.child(0))
    obs_lines = ["x,y"] + [f"{x:.10g},{y:.10g}" for x, y in zip(data.inputs[:, 0], data.targets)]
    (out / "observations.csv").write_text("\n".join(obs_lines) + "\n", encoding="utf-8")

    widths = (32, 32) if args.quick else (50, 50, 50, 50, 50)
    burn_in = 100 if args.quick else 200
    spec = MlpSpec((1, *widths, 1), activation="tanh", task="regression")
    opt = OptimizerConfig(method="adam", learning_rate=0.01, epochs=400, batch_size=32, seed=args.seed)
    mlp, trace = train_mlp(data, spec, opt, root.child(1))
    print(f"backbone trained, final MSE {trace[-1]:.5f}")

    xs = np.linspace(-0.6, 1.7, 300)
    grid_inputs = xs[:, None]
    prior = GaussianPrior(args.prior_std)

    # last-layer NUTS over the frozen features
    feats = extract_features(mlp, data.inputs)
    ll_target = posterior_target_regression(
        RegressionDataset(feats, data.targets), prior, noise_std=args.noise_std)
    config = SamplerConfig(burn_in=burn_in, samples=args.samples, chains=1,
                           target_accept=0.8, seed=args.seed)
    draws = run_chains(ll_target, config,
                       [draw_from_prior(prior, ll_target.dim, root.child(2))]).all_draws()
    grid_feats = extract_features(mlp, grid_inputs)
    heads = [RegressionHead.from_flat(theta, args.noise_std) for theta in draws]
    ll_members = np.stack([head.predict(grid_feats) for head in heads])
    write_band(out / "llhmc.csv", xs, ll_members)
    print("wrote llhmc.csv")

    # full-network NUTS
    full_target = posterior_target_full_network(spec, data, prior, noise_std=args.noise_std)
    print(f"sampling the full network ({full_target.dim} parameters)...")
    full_config = SamplerConfig(burn_in=burn_in, samples=args.samples, chains=1,
                                target_accept=0.8, seed=args.seed + 1)
    full_draws = run_chains(full_target, full_config,
                            [draw_from_prior(prior, full_target.dim, root.child(3))]).all_draws()
    full_members = np.stack([mlp_from_flat(spec, theta).forward(grid_inputs) for theta in full_draws])
    write_band(out / "full_hmc.csv", xs, full_members)
    print("wrote full_hmc.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
