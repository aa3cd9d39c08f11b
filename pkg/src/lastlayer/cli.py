"""Command-line driver for the experiment pipeline.

Subcommands mirror the pipeline stages: generate toys, train a backbone,
extract features, sample or fit a last layer, evaluate, build OOD splits,
sweep a grid, trace dependent-sample curves, and dump uncertainty heatmaps.
Every stochastic command requires --seed. Exit code is 0 only when all
requested work completed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness, metrics
from .baselines import (
    fit_bbb_last_layer,
    fit_gda,
    fit_map_softmax,
    fit_sub_ensemble,
    gda_scores,
    method_from_json,
    method_to_json,
    sample_predictions,
)
from .data import (
    LatentDataset,
    load_latent_dataset,
    save_latent_dataset,
    save_regression_dataset,
)
from .mlp import MlpSpec, OptimizerConfig, TrainedMlp, extract_features, train_mlp
from .nuts import PosteriorSampleSet, SamplerConfig, run_chains
from .rng import RngState
from .targets import (
    GaussianPrior,
    PredictiveBundle,
    draw_from_prior,
    posterior_target_classification,
    predict_proba,
)
from .toydata import make_grid, sinusoid_regression, two_moons


def _widths(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _seeds(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p.strip()]


def cmd_toy(args) -> int:
    rng = RngState(args.seed)
    if args.kind == "moons":
        data = two_moons(args.n, args.noise, rng)
        save_latent_dataset(data, args.out)
    else:
        data = sinusoid_regression(args.n, args.noise, rng, amplitude=args.amplitude)
        save_regression_dataset(data, args.out)
    print(f"wrote {args.out} ({args.kind}, n={args.n})")
    return 0


def cmd_train_backbone(args) -> int:
    data = load_latent_dataset(args.data)
    spec = MlpSpec((data.dim, *args.widths, data.num_classes), activation=args.activation)
    opt = OptimizerConfig(method=args.optimizer, learning_rate=args.lr, epochs=args.epochs,
                          batch_size=args.batch_size, weight_decay=args.weight_decay, seed=args.seed)
    mlp, trace = train_mlp(data, spec, opt, RngState(args.seed))
    mlp.to_json(args.out)
    if args.loss_out:
        Path(args.loss_out).write_text("\n".join("%.17g" % v for v in trace) + "\n", encoding="utf-8")
    print(f"wrote {args.out} (final loss {trace[-1]:.6g})")
    return 0


def cmd_extract(args) -> int:
    mlp = TrainedMlp.from_json(args.model)
    data = load_latent_dataset(args.data)
    feats = extract_features(mlp, data.features)
    out = LatentDataset(feats, data.labels, data.num_classes, splits=data.splits)
    save_latent_dataset(out, args.out)
    print(f"wrote {args.out} ({feats.shape[0]} x {feats.shape[1]} features)")
    return 0


def cmd_sample(args) -> int:
    data = load_latent_dataset(args.features)
    prior = GaussianPrior(args.prior_std)
    target = posterior_target_classification(data, prior)
    config = SamplerConfig(
        burn_in=args.burn_in, samples=args.samples, chains=args.chains,
        target_accept=args.target_accept, max_tree_depth=args.max_tree_depth,
        init_step_size="auto" if args.step_size == "auto" else float(args.step_size),
        seed=args.seed,
    )
    init_rng = RngState(args.seed).child(3)
    inits = [draw_from_prior(prior, target.dim, r) for r in init_rng.split(args.chains)]
    sample_set = run_chains(target, config, inits)
    sample_set.to_json(args.out)
    print(f"wrote {args.out} ({sample_set.total_draws} draws, "
          f"{sample_set.divergence_count()} divergences, "
          f"mean accept {sample_set.mean_accept_stat():.3f})")
    return 0


def cmd_fit(args) -> int:
    data = load_latent_dataset(args.features)
    prior = GaussianPrior(args.prior_std)
    rng = RngState(args.seed)
    if args.method == "map":
        model = fit_map_softmax(data, prior, OptimizerConfig(method="sgd", learning_rate=1.0,
                                                             epochs=args.epochs * 100, seed=args.seed))
    elif args.method == "bbb":
        opt = OptimizerConfig(method="adam", learning_rate=args.lr, epochs=args.epochs,
                              batch_size=args.batch_size, seed=args.seed)
        model, _ = fit_bbb_last_layer(data, prior, opt, args.mc_samples, rng)
    elif args.method == "subensemble":
        opt = OptimizerConfig(method="adam", learning_rate=args.lr, epochs=args.epochs,
                              batch_size=args.batch_size, seed=args.seed)
        model = fit_sub_ensemble(data, args.members, prior, opt, rng)
    elif args.method == "gda":
        model = fit_gda(data, args.gda_ridge)
    else:
        raise ValueError(f"unknown method {args.method}")
    method_to_json(model, args.out)
    print(f"wrote {args.out} ({args.method})")
    return 0


def _bundle_from_model(path: str, features: np.ndarray, n_members: int, rng: RngState):
    """Loads a samples.json or fitted-method json and produces predictions."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if "chains" in payload:
        sample_set = PosteriorSampleSet.from_json(path)
        if n_members and n_members != sample_set.total_draws:
            return sample_predictions(sample_set, features, n_members, rng), sample_set
        return predict_proba(sample_set, features), sample_set
    model = method_from_json(path)
    if payload["method"] == "map":
        return predict_proba(model, features), None
    if payload["method"] == "gda":
        scores = gda_scores(model, features)
        return PredictiveBundle(scores.posteriors[None]), model
    if payload["method"] == "subensemble" and n_members == 0:
        n_members = model.num_members
    if payload["method"] == "bbb" and n_members == 0:
        n_members = 10
    return sample_predictions(model, features, n_members, rng), None


def cmd_evaluate(args) -> int:
    data = load_latent_dataset(args.features)
    rng = RngState(args.seed).child(9)
    bundle, extra = _bundle_from_model(args.model, data.features, args.n_members, rng)
    report = metrics.evaluate_classification(bundle.mean_probs, data.labels)
    out = {"metrics": report.to_dict()}
    if args.ood_features:
        ood = load_latent_dataset(args.ood_features)
        payload = json.loads(Path(args.model).read_text(encoding="utf-8"))
        if payload.get("method") == "gda":
            id_scores = -gda_scores(extra, data.features).log_density
            out_scores = -gda_scores(extra, ood.features).log_density
        else:
            # same rng child as the ID bundle, so both see the same members
            ood_bundle, _ = _bundle_from_model(args.model, ood.features, args.n_members,
                                               RngState(args.seed).child(9))
            id_scores = bundle.entropy
            out_scores = ood_bundle.entropy
        scores = np.concatenate([id_scores, out_scores])
        flags = np.concatenate([np.zeros(id_scores.size, dtype=bool), np.ones(out_scores.size, dtype=bool)])
        out["ood"] = metrics.roc_pr_fpr95(scores, flags).to_dict()
    text = json.dumps(out, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_ood(args) -> int:
    data = load_latent_dataset(args.data)
    scenario = harness.build_ood_scenario(data, args.mode, args.threshold)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    save_latent_dataset(scenario.train, f"{prefix}_train.csv")
    save_latent_dataset(scenario.test_id, f"{prefix}_test.csv")
    ood_labels = np.zeros(scenario.ood_features.shape[0], dtype=np.int64)
    save_latent_dataset(
        LatentDataset(scenario.ood_features, ood_labels, scenario.train.num_classes),
        f"{prefix}_ood.csv",
    )
    mapping = {
        "mode": scenario.mode,
        "removed_classes": list(scenario.removed_classes),
        "label_mapping": {str(k): v for k, v in scenario.label_mapping.items()},
    }
    Path(f"{prefix}_mapping.json").write_text(json.dumps(mapping, sort_keys=True), encoding="utf-8")
    print(f"wrote {prefix}_train.csv / _test.csv / _ood.csv / _mapping.json "
          f"(removed {list(scenario.removed_classes)})")
    return 0


def cmd_grid(args) -> int:
    overrides = dict(kv.split("=", 1) for kv in args.set or [])
    config = harness.load_config_file(args.config, overrides)
    if args.space:
        space = json.loads(Path(args.space).read_text(encoding="utf-8"))
    else:
        space = {}
        for kv in args.vary or []:
            key, _, values = kv.partition("=")
            space[key] = [harness._coerce(key, part) for part in values.split("/")]
    if not space:
        space = {"prior_std": [config.prior_std]}
    result = harness.grid_search(config, space, _seeds(args.seeds), args.out)
    print(f"{len(result.records)} records, {len(result.failures)} failures")
    print("summary B cell:", json.dumps({k: result.summary_b['cell'][k] for k in sorted(space)}, sort_keys=True))
    return 0 if not result.failures else 1


def cmd_curve(args) -> int:
    data = load_latent_dataset(args.features)
    sample_sets = [PosteriorSampleSet.from_json(p) for p in args.samples]
    ood = load_latent_dataset(args.ood_features).features if args.ood_features else None
    curve = harness.dependent_sample_curve(sample_sets, data.features, data.labels,
                                           seeds=list(range(len(sample_sets))), ood_features=ood)
    text = json.dumps(curve, sort_keys=True)
    Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(f"wrote {args.out} (counts 1..{curve['counts'][-1]})")
    return 0


def cmd_heatmap(args) -> int:
    mlp = TrainedMlp.from_json(args.model)
    grid = make_grid(tuple(args.x_bounds), tuple(args.y_bounds), args.resolution)
    rng = RngState(args.seed).child(9)

    def predict(points: np.ndarray) -> PredictiveBundle:
        feats = extract_features(mlp, points)
        bundle, _ = _bundle_from_model(args.samples, feats, args.n_members, rng)
        return bundle

    harness.emit_uncertainty_grid(predict, grid, args.out)
    print(f"wrote {args.out} ({args.resolution}x{args.resolution})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lastlayer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy", help="generate a toy dataset CSV")
    p.add_argument("kind", choices=["moons", "sinusoid"])
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("train-backbone", help="phase-1 deterministic training")
    p.add_argument("--data", required=True)
    p.add_argument("--widths", type=_widths, default=(20, 20))
    p.add_argument("--activation", choices=["relu", "tanh"], default="relu")
    p.add_argument("--optimizer", choices=["sgd", "adam"], default="adam")
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-out")
    p.set_defaults(func=cmd_train_backbone)

    p = sub.add_parser("extract", help="extract penultimate-layer features")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("sample", help="NUTS over the last-layer posterior")
    p.add_argument("--features", required=True)
    p.add_argument("--prior-std", type=float, default=1.0)
    p.add_argument("--burn-in", type=int, default=100)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--target-accept", type=float, default=0.7)
    p.add_argument("--max-tree-depth", type=int, default=10)
    p.add_argument("--step-size", default="auto")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("fit", help="fit a non-HMC last-layer baseline")
    p.add_argument("--method", choices=["map", "bbb", "subensemble", "gda"], required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--prior-std", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--members", type=int, default=10)
    p.add_argument("--mc-samples", type=int, default=1)
    p.add_argument("--gda-ridge", type=float, default=None)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="score a sampled or fitted method")
    p.add_argument("--model", required=True, help="samples.json or fitted-method json")
    p.add_argument("--features", required=True, help="test features CSV")
    p.add_argument("--ood-features")
    p.add_argument("--n-members", type=int, default=0, help="0 = use every member")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ood", help="build a class-removal OOD scenario")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["min", "max"], required=True)
    p.add_argument("--threshold", type=int, default=None)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_ood)

    p = sub.add_parser("grid", help="seeded grid search over a config space")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--vary", action="append", metavar="KEY=V1/V2/...", help="grid axis")
    p.add_argument("--space", help="JSON file: {key: [values...]}")
    p.add_argument("--seeds", required=True, help="comma-separated seed list")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("curve", help="cumulative metrics over dependent draws")
    p.add_argument("--features", required=True)
    p.add_argument("--samples", nargs="+", required=True, help="one samples.json per seed")
    p.add_argument("--ood-features")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("heatmap", help="uncertainty map over a 2-D grid")
    p.add_argument("--model", required=True, help="backbone json")
    p.add_argument("--samples", required=True, help="samples.json or fitted-method json")
    p.add_argument("--x-bounds", type=float, nargs=2, default=(-2.0, 3.0))
    p.add_argument("--y-bounds", type=float, nargs=2, default=(-1.5, 2.0))
    p.add_argument("--resolution", type=int, default=50)
    p.add_argument("--n-members", type=int, default=0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, harness.ExperimentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
