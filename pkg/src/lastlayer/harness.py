"""Experiment orchestration: configs, OOD scenarios, runs, grids, persistence.

A run is fully determined by (config, seed): data generation, backbone
training, posterior sampling or fitting, and every metric flow from split
random streams rooted at those integers, so rerunning a cell reproduces its
record bit for bit (wall-clock aside). Records persist as one JSON per run
plus an append-only CSV per sweep; completed cells are recognized by config
hash, which makes sweeps crash-resumable.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import os
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import metrics
from .baselines import (
    fit_bbb_last_layer,
    fit_gda,
    fit_map_softmax,
    fit_sub_ensemble,
    gda_scores,
    sample_predictions,
)
from .data import LatentDataset, load_latent_dataset
from .mlp import MlpSpec, OptimizerConfig, extract_features, mlp_from_flat, train_mlp
from .nuts import PosteriorSampleSet, SamplerConfig, run_chains
from .rng import RngState
from .targets import (
    GaussianPrior,
    PredictiveBundle,
    draw_from_prior,
    posterior_target_classification,
    posterior_target_full_network,
    predict_proba,
)
from .toydata import Grid2D, two_moons

METHODS = ("llhmc", "full_hmc", "map", "bbb", "subensemble", "gda")

# the sweep values reported for the last-layer sampler grid
DEFAULT_LLHMC_GRID: dict[str, list] = {
    "prior_std": [0.01, 0.1, 1.0, 2.5, 5.0, 10.0],
    "burn_in": [10, 25, 50, 100, 200],
    "target_accept": [0.6, 0.7, 0.8],
    "chains": [1, 2],
    "samples": [2, 5, 10, 15, 20, 25, 30, 35, 40, 45, 50],
}


class ExperimentError(RuntimeError):
    """Failure inside one run, tagged with the pipeline phase."""

    def __init__(self, phase: str, cause: BaseException):
        self.phase = phase
        self.cause = cause
        super().__init__(f"[{phase}] {cause}")


@dataclass(frozen=True)
class ExperimentConfig:
    """One grid cell: data source, method, and every hyperparameter."""

    method: str
    # data source: a latent CSV (with optional manifest) or a toy generator
    dataset: str | None = None
    toy: str | None = None
    toy_n: int = 200
    toy_noise: float = 0.1
    test_fraction: float = 0.5
    # backbone (always trained in toy mode; optional for CSV data)
    train_backbone: bool = False
    backbone_widths: tuple[int, ...] = (20, 20)
    backbone_activation: str = "relu"
    backbone_epochs: int = 150
    backbone_lr: float = 0.02
    backbone_batch_size: int = 32
    # posterior / prior
    prior_std: float = 1.0
    burn_in: int = 100
    samples: int = 50
    chains: int = 1
    target_accept: float = 0.7
    max_tree_depth: int = 10
    init_step_size: float | str = "auto"
    # baseline fitting
    n_members: int = 10
    fit_epochs: int = 100
    fit_lr: float = 0.05
    fit_batch_size: int = 32
    mc_samples_per_step: int = 1
    gda_ridge: float | None = None
    # OOD scenario
    ood_mode: str | None = None
    ood_threshold: int | None = None
    # persistence
    output_dir: str | None = None

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if (self.dataset is None) == (self.toy is None):
            raise ValueError("exactly one of dataset or toy must be set")
        if self.toy is not None and self.toy != "moons":
            raise ValueError("classification toy generator must be 'moons'")
        if self.ood_mode is not None and self.ood_mode not in ("min", "max"):
            raise ValueError("ood_mode must be 'min' or 'max'")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["backbone_widths"] = list(self.backbone_widths)
        return out

    @staticmethod
    def from_dict(values: dict) -> "ExperimentConfig":
        values = dict(values)
        if "backbone_widths" in values:
            values["backbone_widths"] = tuple(values["backbone_widths"])
        return ExperimentConfig(**values)


def _coerce(name: str, raw: str):
    raw = raw.strip()
    lowered = raw.lower()
    if lowered in ("none", "null", ""):
        return None
    if name in ("backbone_widths",):
        return tuple(int(p) for p in raw.split(",") if p.strip())
    if name == "init_step_size":
        return "auto" if lowered == "auto" else float(raw)
    if name in ("train_backbone",):
        return lowered in ("1", "true", "yes")
    int_fields = {
        "toy_n", "backbone_epochs", "backbone_batch_size", "burn_in", "samples",
        "chains", "max_tree_depth", "n_members", "fit_epochs", "fit_batch_size",
        "mc_samples_per_step", "ood_threshold",
    }
    float_fields = {
        "toy_noise", "test_fraction", "backbone_lr", "prior_std", "target_accept",
        "fit_lr", "gda_ridge",
    }
    if name in int_fields:
        return int(raw)
    if name in float_fields:
        return float(raw)
    return raw


def load_config_file(path: str | Path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Parses the key=value config format; CLI overrides win over file keys."""
    known = {f.name for f in fields(ExperimentConfig)}
    values: dict = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, value)
    for key, value in (overrides or {}).items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = _coerce(key, value) if isinstance(value, str) else value
    return ExperimentConfig(**values)


@dataclass(frozen=True)
class OodScenario:
    """Class-removal scenario; removed-class rows become the OOD instances."""

    mode: str
    removed_classes: tuple[int, ...]
    label_mapping: dict[int, int]
    train: LatentDataset
    test_id: LatentDataset
    ood_features: np.ndarray

    def __post_init__(self) -> None:
        ood = np.asarray(self.ood_features, dtype=np.float64)
        ood.setflags(write=False)
        object.__setattr__(self, "ood_features", ood)
        if ood.shape[0] < 1:
            raise ValueError("OOD instance set is empty")
        if self.train.num_classes < 2:
            raise ValueError("class removal left fewer than 2 classes")


def build_ood_scenario(data: LatentDataset, mode: str, threshold: int | None = None) -> OodScenario:
    """Removes the most/least prevalent class (or all below a count threshold).

    Prevalence is counted on the training split; ties break toward the
    lowest class id. Remaining labels are re-indexed densely and the mapping
    recorded. Removed-class rows from train and test form the OOD set.
    """
    if mode not in ("min", "max"):
        raise ValueError("mode must be 'min' or 'max'")
    if data.num_classes < 3:
        raise ValueError(f"need at least 3 classes, got {data.num_classes}")
    if not data.splits or "train" not in data.splits or "test" not in data.splits:
        raise ValueError("dataset must carry train and test splits")
    train_idx = data.splits["train"]
    test_idx = data.splits["test"]
    counts = np.bincount(data.labels[train_idx], minlength=data.num_classes)

    if threshold is not None:
        removed = [cls for cls in range(data.num_classes) if counts[cls] < threshold]
        if not removed:
            raise ValueError(f"no class has fewer than {threshold} training rows")
    elif mode == "min":
        removed = [int(np.argmin(counts))]
    else:
        removed = [int(np.argmax(counts))]
    removed_set = set(removed)
    kept = [cls for cls in range(data.num_classes) if cls not in removed_set]
    if len(kept) < 2:
        raise ValueError("class removal would leave fewer than 2 classes")
    mapping = {old: new for new, old in enumerate(kept)}

    def reduce_split(idx: np.ndarray) -> LatentDataset:
        keep_rows = idx[~np.isin(data.labels[idx], removed)]
        new_labels = np.array([mapping[int(l)] for l in data.labels[keep_rows]], dtype=np.int64)
        return LatentDataset(data.features[keep_rows], new_labels, len(kept))

    all_idx = np.concatenate([train_idx, test_idx])
    ood_rows = all_idx[np.isin(data.labels[all_idx], removed)]
    scenario = OodScenario(
        mode=mode,
        removed_classes=tuple(removed),
        label_mapping=mapping,
        train=reduce_split(train_idx),
        test_id=reduce_split(test_idx),
        ood_features=data.features[ood_rows],
    )
    # the reduced sets must never contain removed-class rows
    assert scenario.train.n + scenario.test_id.n + scenario.ood_features.shape[0] == train_idx.size + test_idx.size
    return scenario


@dataclass
class RunRecord:
    """One grid cell: config snapshot, seed, metrics, diagnostics."""

    config: dict
    seed: int
    metrics: dict
    ood: dict | None
    diagnostics: dict
    wall_seconds: float

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "metrics": self.metrics,
            "ood": self.ood,
            "diagnostics": self.diagnostics,
            "wall_seconds": self.wall_seconds,
        }

    @staticmethod
    def from_dict(payload: dict) -> "RunRecord":
        return RunRecord(
            config=payload["config"],
            seed=payload["seed"],
            metrics=payload["metrics"],
            ood=payload["ood"],
            diagnostics=payload["diagnostics"],
            wall_seconds=payload["wall_seconds"],
        )

    def comparable(self) -> dict:
        """Everything that must reproduce under (config, seed)."""
        out = self.to_dict()
        out.pop("wall_seconds")
        return out


def config_hash(config: ExperimentConfig, seed: int) -> str:
    canonical = json.dumps({"config": config.to_dict(), "seed": seed}, sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _feature_hash(features: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(features).tobytes()).hexdigest()[:16]


def _default_split(n: int, test_fraction: float, rng: RngState) -> tuple[np.ndarray, np.ndarray]:
    order = rng.generator().permutation(n)
    n_test = max(1, int(round(test_fraction * n)))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def _sampler_seed(seed: int, start_index: int) -> int:
    return (seed * 1_000_003 + 97 * start_index + 1) % 2**63


@dataclass
class _Prepared:
    train: LatentDataset  # classification data in the method's input space
    test: LatentDataset
    ood_features: np.ndarray | None
    raw_train: LatentDataset | None  # pre-backbone space, when a backbone is used
    raw_test: LatentDataset | None
    raw_ood: np.ndarray | None
    scenario: OodScenario | None


def _prepare_data(config: ExperimentConfig, seed: int) -> _Prepared:
    root = RngState(seed)
    if config.toy is not None:
        train = two_moons(config.toy_n, config.toy_noise, root.child(0))
        test = two_moons(config.toy_n, config.toy_noise, root.child(1))
        if config.ood_mode is not None:
            raise ValueError("OOD scenarios need a dataset with at least 3 classes")
        return _Prepared(train, test, None, train, test, None, None)

    data = load_latent_dataset(config.dataset)
    if not data.splits or "train" not in data.splits or "test" not in data.splits:
        train_idx, test_idx = _default_split(data.n, config.test_fraction, root.child(4))
        data = LatentDataset(data.features, data.labels, data.num_classes,
                             splits={"train": train_idx, "test": test_idx})
    scenario = None
    if config.ood_mode is not None:
        scenario = build_ood_scenario(data, config.ood_mode, config.ood_threshold)
        train, test = scenario.train, scenario.test_id
        ood = scenario.ood_features
    else:
        train, test = data.split("train"), data.split("test")
        ood = None
    if config.train_backbone:
        return _Prepared(train, test, ood, train, test, ood, scenario)
    return _Prepared(train, test, ood, None, None, None, scenario)


def _hmc_diagnostics(sample_set: PosteriorSampleSet) -> dict:
    """Per-parameter ESS (summed over chains) and R-hat when multi-chain."""
    dim = sample_set.dim
    ess = []
    for p in range(dim):
        total = 0.0
        ok = True
        for chain in sample_set.chains:
            try:
                total += metrics.effective_sample_size(chain[:, p])
            except metrics.UndefinedMetricError:
                ok = False
                break
        ess.append(total if ok else None)
    out: dict = {
        "ess": ess,
        "ess_median": float(np.median([e for e in ess if e is not None])) if any(e is not None for e in ess) else None,
        "divergences": sample_set.divergence_count(),
        "mean_accept_stat": sample_set.mean_accept_stat(),
    }
    if sample_set.num_chains >= 2:
        shortest = min(c.shape[0] for c in sample_set.chains)
        rhats = []
        for p in range(dim):
            try:
                rhats.append(metrics.gelman_rhat([c[:shortest, p] for c in sample_set.chains]))
            except metrics.UndefinedMetricError:
                rhats.append(None)
        out["rhat"] = rhats
    return out


@dataclass
class _StartResult:
    member_probs_id: np.ndarray
    member_probs_ood: np.ndarray | None
    diagnostics: dict
    feature_hash: str


def _run_single_start(config: ExperimentConfig, seed: int, prepared: _Prepared,
                      backbone_seed: int, start_index: int):
    method_rng = RngState(seed).child(3).child(start_index)
    try:
        prior = GaussianPrior(config.prior_std)
    except Exception as exc:
        raise ExperimentError("config", exc) from exc

    # backbone phase: toy mode always, CSV mode when asked for
    if prepared.raw_train is not None:
        try:
            spec = MlpSpec(
                (prepared.raw_train.dim, *config.backbone_widths, prepared.raw_train.num_classes),
                activation=config.backbone_activation,
            )
            opt = OptimizerConfig(
                method="adam",
                learning_rate=config.backbone_lr,
                epochs=config.backbone_epochs,
                batch_size=config.backbone_batch_size,
                seed=backbone_seed,
            )
            backbone, _ = train_mlp(prepared.raw_train, spec, opt, RngState(backbone_seed).child(2))
            feats_train = extract_features(backbone, prepared.raw_train.features)
            feats_test = extract_features(backbone, prepared.raw_test.features)
            feats_ood = extract_features(backbone, prepared.raw_ood) if prepared.raw_ood is not None else None
            train = LatentDataset(feats_train, prepared.raw_train.labels, prepared.raw_train.num_classes)
            test = LatentDataset(feats_test, prepared.raw_test.labels, prepared.raw_test.num_classes)
        except ExperimentError:
            raise
        except Exception as exc:
            raise ExperimentError("backbone", exc) from exc
    else:
        backbone = None
        train, test = prepared.train, prepared.test
        feats_ood = prepared.ood_features

    diagnostics: dict = {}
    try:
        if config.method == "llhmc":
            target = posterior_target_classification(train, prior)
            sampler = SamplerConfig(
                burn_in=config.burn_in, samples=config.samples, chains=config.chains,
                target_accept=config.target_accept, max_tree_depth=config.max_tree_depth,
                init_step_size=config.init_step_size, seed=_sampler_seed(seed, start_index),
            )
            inits = [draw_from_prior(prior, target.dim, r) for r in method_rng.child(0).split(config.chains)]
            sample_set = run_chains(target, sampler, inits)
            diagnostics = _hmc_diagnostics(sample_set)
            bundle = predict_proba(sample_set, test.features)
            bundle_ood = predict_proba(sample_set, feats_ood) if feats_ood is not None else None
        elif config.method == "full_hmc":
            if prepared.raw_train is None or backbone is None:
                raise ValueError("full-network HMC requires the backbone (toy or train_backbone) pipeline")
            target = posterior_target_full_network(backbone.spec, prepared.raw_train, prior)
            sampler = SamplerConfig(
                burn_in=config.burn_in, samples=config.samples, chains=config.chains,
                target_accept=config.target_accept, max_tree_depth=config.max_tree_depth,
                init_step_size=config.init_step_size, seed=_sampler_seed(seed, start_index),
            )
            inits = [draw_from_prior(prior, target.dim, r) for r in method_rng.child(0).split(config.chains)]
            sample_set = run_chains(target, sampler, inits)
            diagnostics = _hmc_diagnostics(sample_set)
            bundle = _full_network_bundle(backbone.spec, sample_set, prepared.raw_test.features)
            bundle_ood = (
                _full_network_bundle(backbone.spec, sample_set, prepared.raw_ood)
                if prepared.raw_ood is not None else None
            )
        elif config.method == "map":
            opt = OptimizerConfig(method="sgd", learning_rate=1.0, epochs=config.fit_epochs * 100, seed=seed)
            clf = fit_map_softmax(train, prior, opt)
            bundle = predict_proba(clf, test.features)
            bundle_ood = predict_proba(clf, feats_ood) if feats_ood is not None else None
        elif config.method == "bbb":
            opt = OptimizerConfig(
                method="adam", learning_rate=config.fit_lr, epochs=config.fit_epochs,
                batch_size=config.fit_batch_size, seed=seed,
            )
            vll, _ = fit_bbb_last_layer(train, prior, opt, config.mc_samples_per_step, method_rng.child(1))
            # the same member stream scores ID and OOD rows, so both see identical draws
            bundle = sample_predictions(vll, test.features, config.n_members, method_rng.child(2))
            bundle_ood = (
                sample_predictions(vll, feats_ood, config.n_members, method_rng.child(2))
                if feats_ood is not None else None
            )
        elif config.method == "subensemble":
            opt = OptimizerConfig(
                method="adam", learning_rate=config.fit_lr, epochs=config.fit_epochs,
                batch_size=config.fit_batch_size, seed=seed,
            )
            ensemble = fit_sub_ensemble(train, config.n_members, prior, opt, method_rng.child(1))
            bundle = sample_predictions(ensemble, test.features, config.n_members, method_rng.child(2))
            bundle_ood = (
                sample_predictions(ensemble, feats_ood, config.n_members, method_rng.child(2))
                if feats_ood is not None else None
            )
        elif config.method == "gda":
            model = fit_gda(train, config.gda_ridge)
            scores = gda_scores(model, test.features)
            bundle = PredictiveBundle(scores.posteriors[None])
            bundle_ood = None
            if feats_ood is not None:
                diagnostics["gda_ood_log_density"] = [float(v) for v in gda_scores(model, feats_ood).log_density]
                diagnostics["gda_id_log_density"] = [float(v) for v in scores.log_density]
        else:  # pragma: no cover - guarded by config validation
            raise ValueError(f"unknown method {config.method}")
    except ExperimentError:
        raise
    except Exception as exc:
        raise ExperimentError("fit", exc) from exc

    return _StartResult(
        member_probs_id=bundle.member_probs,
        member_probs_ood=bundle_ood.member_probs if bundle_ood is not None else None,
        diagnostics=diagnostics,
        feature_hash=_feature_hash(train.features),
    ), test


def _full_network_bundle(spec: MlpSpec, sample_set: PosteriorSampleSet, inputs: np.ndarray) -> PredictiveBundle:
    from .mlp import softmax

    draws = sample_set.all_draws()
    members = np.empty((draws.shape[0], inputs.shape[0], spec.output_dim))
    for m, theta in enumerate(draws):
        members[m] = softmax(mlp_from_flat(spec, theta).forward(inputs))
    return PredictiveBundle(members)


def _evaluate(bundle: PredictiveBundle, test: LatentDataset,
              ood_scores: tuple[np.ndarray, np.ndarray] | None) -> tuple[dict, dict | None]:
    report = metrics.evaluate_classification(bundle.mean_probs, test.labels)
    ood_dict = None
    if ood_scores is not None:
        id_scores, out_scores = ood_scores
        scores = np.concatenate([id_scores, out_scores])
        flags = np.concatenate([np.zeros(id_scores.size, dtype=bool), np.ones(out_scores.size, dtype=bool)])
        ood_dict = metrics.roc_pr_fpr95(scores, flags).to_dict()
    return report.to_dict(), ood_dict


def multi_start_run(config: ExperimentConfig, seed: int, backbone_seeds: list[int] | None = None) -> RunRecord:
    """Runs the method once per backbone seed and averages member probabilities.

    With a single start this is exactly `run_experiment`. Per-start feature
    hashes are recorded so provenance stays auditable.
    """
    t0 = time.time()
    if backbone_seeds is None:
        backbone_seeds = [seed]
    if len(backbone_seeds) < 1:
        raise ValueError("need at least one backbone seed")
    try:
        prepared = _prepare_data(config, seed)
    except ExperimentError:
        raise
    except Exception as exc:
        raise ExperimentError("data", exc) from exc

    starts = []
    test = None
    for start_index, backbone_seed in enumerate(backbone_seeds):
        result, test = _run_single_start(config, seed, prepared, backbone_seed, start_index)
        starts.append(result)

    member_probs = np.concatenate([s.member_probs_id for s in starts], axis=0)
    bundle = PredictiveBundle(member_probs)
    ood_scores = None
    if config.ood_mode is not None:
        if config.method == "gda":
            id_density = np.asarray(starts[0].diagnostics["gda_id_log_density"])
            ood_density = np.asarray(starts[0].diagnostics["gda_ood_log_density"])
            if len(starts) > 1:
                id_density = np.mean([s.diagnostics["gda_id_log_density"] for s in starts], axis=0)
                ood_density = np.mean([s.diagnostics["gda_ood_log_density"] for s in starts], axis=0)
            ood_scores = (-id_density, -ood_density)
        else:
            ood_members = np.concatenate([s.member_probs_ood for s in starts], axis=0)
            ood_bundle = PredictiveBundle(ood_members)
            ood_scores = (bundle.entropy, ood_bundle.entropy)

    try:
        metric_dict, ood_dict = _evaluate(bundle, test, ood_scores)
    except ExperimentError:
        raise
    except Exception as exc:
        raise ExperimentError("evaluate", exc) from exc

    diagnostics: dict = {
        "feature_hashes": [s.feature_hash for s in starts],
        "starts": len(starts),
        "members": int(member_probs.shape[0]),
    }
    if len(starts) == 1:
        diagnostics.update({k: v for k, v in starts[0].diagnostics.items()
                            if k not in ("gda_id_log_density", "gda_ood_log_density")})
    else:
        diagnostics["per_start"] = [
            {k: v for k, v in s.diagnostics.items() if k not in ("gda_id_log_density", "gda_ood_log_density")}
            for s in starts
        ]
        diagnostics["divergences"] = sum(s.diagnostics.get("divergences", 0) for s in starts)

    record = RunRecord(
        config=config.to_dict(),
        seed=seed,
        metrics=metric_dict,
        ood=ood_dict,
        diagnostics=diagnostics,
        wall_seconds=time.time() - t0,
    )
    if config.output_dir:
        persist_record(record, Path(config.output_dir))
    return record


def run_experiment(config: ExperimentConfig, seed: int) -> RunRecord:
    """Full pipeline for one (config, seed) cell; persists when output_dir is set."""
    return multi_start_run(config, seed, [seed])


def persist_record(record: RunRecord, output_dir: Path) -> Path:
    output_dir = Path(output_dir)
    (output_dir / "records").mkdir(parents=True, exist_ok=True)
    h = config_hash(ExperimentConfig.from_dict(record.config), record.seed)
    path = output_dir / "records" / f"run_{h}_{record.seed}.json"
    _atomic_write(path, json.dumps(record.to_dict(), sort_keys=True))
    _append_csv_row(record, h, output_dir / "results.csv")
    return path


CSV_COLUMNS = [
    "hash", "seed", "method", "accuracy", "macro_f1", "ace", "raulc", "mean_entropy",
    "roc_auc", "pr_auc", "fpr95", "divergences", "wall_seconds", "config_json",
]


def _append_csv_row(record: RunRecord, h: str, csv_path: Path) -> None:
    new_file = not csv_path.exists()
    with open(csv_path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(CSV_COLUMNS)
        ood = record.ood or {}
        writer.writerow([
            h,
            record.seed,
            record.config["method"],
            record.metrics["accuracy"],
            record.metrics["macro_f1"],
            record.metrics["ace"],
            record.metrics["raulc"],
            record.metrics["mean_entropy"],
            ood.get("roc_auc", ""),
            ood.get("pr_auc", ""),
            ood.get("fpr95", ""),
            record.diagnostics.get("divergences", ""),
            record.wall_seconds,
            json.dumps(record.config, sort_keys=True),
        ])


def _mean(xs: list[float]) -> float:
    return sum(xs) / len(xs)


def _sem2(xs: list[float]) -> float:
    if len(xs) < 2:
        return 0.0
    return metrics.two_sem(xs)


_SUMMARY_METRICS = ("accuracy", "macro_f1", "ace", "raulc", "mean_entropy")
_OOD_METRICS = ("roc_auc", "pr_auc", "fpr95")


def _cell_key(record: RunRecord) -> str:
    cfg = {k: v for k, v in record.config.items() if k != "output_dir"}
    return json.dumps(cfg, sort_keys=True)


def _aggregate(records: list[RunRecord]) -> dict:
    out: dict = {}
    for name in _SUMMARY_METRICS:
        values = [float(r.metrics[name]) for r in records]
        out[name] = {"mean": _mean(values), "sem2": _sem2(values)}
    if all(r.ood for r in records):
        for name in _OOD_METRICS:
            values = [float(r.ood[name]) for r in records]
            out[name] = {"mean": _mean(values), "sem2": _sem2(values)}
    return out


def summarize_records(records: list[RunRecord]) -> tuple[dict, dict]:
    """The two sweep tables, as pure functions of the persisted records.

    Summary A averages each seed's top-performing cell; summary B reports the
    single cell with the best seed-average. "Best" keys on macro F1, ties
    break on lower ACE and then on the cell's canonical JSON.
    """
    if not records:
        raise ValueError("no records to summarize")

    def better(a: tuple[float, float, str], b: tuple[float, float, str]) -> bool:
        # higher F1, then lower ACE, then lexicographically earlier config
        if a[0] != b[0]:
            return a[0] > b[0]
        if a[1] != b[1]:
            return a[1] < b[1]
        return a[2] < b[2]

    by_seed: dict[int, list[RunRecord]] = {}
    by_cell: dict[str, list[RunRecord]] = {}
    for r in records:
        by_seed.setdefault(r.seed, []).append(r)
        by_cell.setdefault(_cell_key(r), []).append(r)

    # summary A: per-seed best cell, averaged across seeds
    best_per_seed = []
    for seed in sorted(by_seed):
        best = None
        best_key = None
        for r in by_seed[seed]:
            key = (float(r.metrics["macro_f1"]), float(r.metrics["ace"]), _cell_key(r))
            if best is None or better(key, best_key):
                best, best_key = r, key
        best_per_seed.append(best)
    summary_a = {
        "protocol": "top_configuration_per_seed",
        "seeds": sorted(by_seed),
        "chosen_cells": [json.loads(_cell_key(r)) for r in best_per_seed],
        "metrics": _aggregate(best_per_seed),
    }

    # summary B: the cell with the best average across seeds
    best_cell = None
    best_key = None
    for cell_key in sorted(by_cell):
        cell_records = by_cell[cell_key]
        mean_f1 = _mean([float(r.metrics["macro_f1"]) for r in cell_records])
        mean_ace = _mean([float(r.metrics["ace"]) for r in cell_records])
        key = (mean_f1, mean_ace, cell_key)
        if best_cell is None or better(key, best_key):
            best_cell, best_key = cell_key, key
    chosen = by_cell[best_cell]
    summary_b = {
        "protocol": "best_average_configuration",
        "seeds": sorted({r.seed for r in chosen}),
        "cell": json.loads(best_cell),
        "metrics": _aggregate(chosen),
    }
    return summary_a, summary_b


@dataclass
class GridResult:
    records: list[RunRecord]
    failures: list[dict]
    summary_a: dict
    summary_b: dict


def grid_search(base_config: ExperimentConfig, space: dict[str, list], seeds: list[int],
                output_dir: str | Path | None = None) -> GridResult:
    """One run per (cell, seed); failures are recorded, not raised.

    Cells already persisted under output_dir are loaded instead of rerun,
    which makes interrupted sweeps resumable.
    """
    if not space:
        raise ValueError("grid space must be nonempty")
    if not seeds:
        raise ValueError("seeds list must be nonempty")
    keys = sorted(space)
    records: list[RunRecord] = []
    failures: list[dict] = []
    out = Path(output_dir) if output_dir else None
    for combo in itertools.product(*(space[k] for k in keys)):
        cell_kv = dict(zip(keys, combo))
        config = replace(base_config, **cell_kv, output_dir=str(out) if out else None)
        for seed in seeds:
            if out is not None:
                existing = out / "records" / f"run_{config_hash(config, seed)}_{seed}.json"
                if existing.exists():
                    records.append(RunRecord.from_dict(json.loads(existing.read_text(encoding="utf-8"))))
                    continue
            try:
                records.append(run_experiment(config, seed))
            except ExperimentError as exc:
                failures.append({"cell": cell_kv, "seed": seed, "phase": exc.phase, "error": str(exc.cause)})
            except Exception as exc:
                failures.append({"cell": cell_kv, "seed": seed, "phase": "run", "error": str(exc)})
    if not records:
        raise ExperimentError("grid", RuntimeError("every cell failed"))
    summary_a, summary_b = summarize_records(records)
    if out is not None:
        _atomic_write(out / "summary_a.json", json.dumps(summary_a, sort_keys=True))
        _atomic_write(out / "summary_b.json", json.dumps(summary_b, sort_keys=True))
        if failures:
            _atomic_write(out / "failures.json", json.dumps(failures, sort_keys=True))
    return GridResult(records, failures, summary_a, summary_b)


def dependent_sample_curve(sample_sets, features: np.ndarray, labels: np.ndarray,
                           seeds: list[int] | None = None, ood_features: np.ndarray | None = None) -> dict:
    """Cumulative F1 (and PR-AUC with an OOD set) as draws accrue from a chain.

    One sample set per seed; mean and population std are reported across
    seeds, so a single seed reports std 0.
    """
    if isinstance(sample_sets, PosteriorSampleSet):
        sample_sets = [sample_sets]
    sample_sets = list(sample_sets)
    if seeds is None:
        seeds = list(range(len(sample_sets)))
    if len(seeds) != len(sample_sets):
        raise ValueError("need one sample set per seed")
    total = min(s.total_draws for s in sample_sets)
    if total < 2:
        raise ValueError("need at least 2 draws for a dependent-sample curve")
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)

    f1_curves = []
    pr_curves = []
    for sample_set in sample_sets:
        members = predict_proba(sample_set, features).member_probs[:total]
        running = np.cumsum(members, axis=0)
        if ood_features is not None:
            members_ood = predict_proba(sample_set, ood_features).member_probs[:total]
            running_ood = np.cumsum(members_ood, axis=0)
        f1s = []
        prs = []
        for s in range(1, total + 1):
            mean_probs = running[s - 1] / s
            _, f1 = metrics.accuracy_and_macro_f1(mean_probs.argmax(axis=1), labels, mean_probs.shape[1])
            f1s.append(f1)
            if ood_features is not None:
                id_ent = metrics.entropy_rows(mean_probs)
                ood_ent = metrics.entropy_rows(running_ood[s - 1] / s)
                scores = np.concatenate([id_ent, ood_ent])
                flags = np.concatenate([np.zeros(id_ent.size, dtype=bool), np.ones(ood_ent.size, dtype=bool)])
                prs.append(metrics.roc_pr_fpr95(scores, flags).pr_auc)
        f1_curves.append(f1s)
        if ood_features is not None:
            pr_curves.append(prs)

    f1_arr = np.asarray(f1_curves)
    out = {
        "counts": list(range(1, total + 1)),
        "seeds": list(seeds),
        "f1_mean": [float(v) for v in f1_arr.mean(axis=0)],
        "f1_std": [float(v) for v in f1_arr.std(axis=0)],
    }
    if ood_features is not None:
        pr_arr = np.asarray(pr_curves)
        out["pr_auc_mean"] = [float(v) for v in pr_arr.mean(axis=0)]
        out["pr_auc_std"] = [float(v) for v in pr_arr.std(axis=0)]
    return out


def emit_uncertainty_grid(predict_fn, grid: Grid2D, path: str | Path) -> np.ndarray:
    """Writes (x, y, mean prob of class 1, entropy, min-max normalized entropy).

    Rows follow the grid's (y, x) order. An all-equal entropy column
    normalizes to zeros.
    """
    points = grid.points
    if points.shape[1] != 2:
        raise ValueError("uncertainty grids require 2-D inputs")
    bundle = predict_fn(points)
    if bundle.mean_probs.shape[0] != points.shape[0]:
        raise ValueError("prediction function returned the wrong number of rows")
    if bundle.mean_probs.shape[1] < 2:
        raise ValueError("need at least 2 classes for a probability map")
    entropy = bundle.entropy
    span = float(entropy.max() - entropy.min())
    normalized = np.zeros_like(entropy) if span == 0.0 else (entropy - entropy.min()) / span
    table = np.column_stack([points[:, 0], points[:, 1], bundle.mean_probs[:, 1], entropy, normalized])
    lines = ["x,y,prob_class1,entropy,entropy_norm"]
    for row in table:
        lines.append(",".join("%.17g" % v for v in row))
    _atomic_write(Path(path), "\n".join(lines) + "\n")
    return table
