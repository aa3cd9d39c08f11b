"""Last-layer Hamiltonian Monte Carlo and probabilistic baselines.

Pipeline: pre-train a deterministic backbone, freeze it, extract penultimate
features, then sample (or fit) the final linear layer's posterior and score
predictions, calibration, MCMC diagnostics, and OOD detection.
"""

from .data import (
    DataFormatError,
    LatentDataset,
    RegressionDataset,
    load_latent_dataset,
    load_regression_dataset,
    save_latent_dataset,
    save_regression_dataset,
)
from .rng import RngState
from .toydata import Grid2D, make_grid, sinusoid_regression, two_moons
from .mlp import (
    MlpSpec,
    OptimizerConfig,
    TrainedMlp,
    extract_features,
    mlp_gradient,
    train_mlp,
)
from .targets import (
    DifferentiableTarget,
    GaussianPrior,
    LastLayerClassifier,
    PredictiveBundle,
    RegressionHead,
    class_log_likelihood,
    log_prior,
    posterior_target_classification,
    posterior_target_full_network,
    posterior_target_regression,
    predict_proba,
)
from .nuts import (
    AdaptationState,
    PhasePoint,
    PosteriorSampleSet,
    SamplerConfig,
    adapt_step_size,
    hamiltonian,
    leapfrog,
    nuts_transition,
    run_chains,
)
from .baselines import (
    GdaModel,
    SubEnsemble,
    VariationalLastLayer,
    fit_bbb_last_layer,
    fit_gda,
    fit_map_softmax,
    fit_sub_ensemble,
    gda_scores,
    sample_predictions,
)
from .metrics import (
    EvaluationReport,
    OodReport,
    UndefinedMetricError,
    accuracy_and_macro_f1,
    adaptive_calibration_error,
    effective_sample_size,
    gelman_rhat,
    predictive_entropy,
    raulc,
    roc_pr_fpr95,
    two_sem,
)

__version__ = "0.1.0"
