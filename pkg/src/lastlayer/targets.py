"""Differentiable posterior targets for last-layer and full-network inference.

A target packages the unnormalized joint log-density ``log p(D | theta) +
log p(theta)`` with its analytic gradient behind a single contract the
sampler consumes. Classifier parameters flatten as ``weights.ravel()`` (the
(K, D) matrix row-major, class-major) followed by the K biases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import metrics
from .data import LatentDataset, RegressionDataset
from .mlp import MlpSpec, _backprop, _forward_pass, log_softmax, softmax, unflatten_params
from .rng import RngState


@dataclass(frozen=True)
class GaussianPrior:
    """Zero-mean isotropic Gaussian over all sampled parameters."""

    std: float

    def __post_init__(self) -> None:
        if not self.std > 0:
            raise ValueError(f"prior std must be positive, got {self.std}")


@dataclass(frozen=True)
class DifferentiableTarget:
    """dim, log-density, and gradient; logp and grad must be pure and reentrant."""

    dim: int
    logp: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class LastLayerClassifier:
    weights: np.ndarray  # (K, D)
    bias: np.ndarray  # (K,)

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ValueError(f"weights must be (K, D) with matching bias, got {w.shape}/{b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("classifier parameters must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    def logits(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights.T + self.bias

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias])

    @staticmethod
    def from_flat(theta: np.ndarray, num_classes: int, feature_dim: int) -> "LastLayerClassifier":
        theta = np.asarray(theta, dtype=np.float64)
        expected = num_classes * feature_dim + num_classes
        if theta.shape != (expected,):
            raise ValueError(f"expected {expected} parameters, got {theta.shape}")
        w = theta[: num_classes * feature_dim].reshape(num_classes, feature_dim)
        return LastLayerClassifier(w, theta[num_classes * feature_dim:])


@dataclass(frozen=True)
class RegressionHead:
    """Linear regression head with fixed (not sampled) observation noise."""

    weights: np.ndarray  # (D,)
    bias: float
    noise_std: float

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        if not self.noise_std > 0:
            raise ValueError("noise_std must be positive")

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights + self.bias

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.weights, [self.bias]])

    @staticmethod
    def from_flat(theta: np.ndarray, noise_std: float) -> "RegressionHead":
        theta = np.asarray(theta, dtype=np.float64)
        return RegressionHead(theta[:-1], float(theta[-1]), noise_std)


@dataclass(frozen=True)
class PredictiveBundle:
    """Per-member class probabilities with the derived mean and its entropy."""

    member_probs: np.ndarray  # (M, N, K)
    mean_probs: np.ndarray = field(init=False)
    entropy: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        probs = np.asarray(self.member_probs, dtype=np.float64)
        if probs.ndim != 3:
            raise ValueError(f"member_probs must be (M, N, K), got shape {probs.shape}")
        probs.setflags(write=False)
        mean = probs.mean(axis=0)
        mean.setflags(write=False)
        ent = metrics.entropy_rows(mean)
        ent.setflags(write=False)
        object.__setattr__(self, "member_probs", probs)
        object.__setattr__(self, "mean_probs", mean)
        object.__setattr__(self, "entropy", ent)

    @property
    def num_members(self) -> int:
        return self.member_probs.shape[0]

    def predicted_labels(self) -> np.ndarray:
        return self.mean_probs.argmax(axis=1)


def log_prior(theta: np.ndarray, prior: GaussianPrior) -> float:
    """Normalized isotropic Gaussian log-density at theta."""
    theta = np.asarray(theta, dtype=np.float64)
    dim = theta.size
    var = prior.std**2
    return float(-0.5 * dim * math.log(2.0 * math.pi * var) - 0.5 * float(theta @ theta) / var)


def log_prior_grad(theta: np.ndarray, prior: GaussianPrior) -> np.ndarray:
    return -np.asarray(theta, dtype=np.float64) / prior.std**2


def class_log_likelihood(params: LastLayerClassifier, data: LatentDataset) -> float:
    """Sum over instances of log softmax(W z + b)[y], log-sum-exp stabilized."""
    if params.feature_dim != data.dim or params.num_classes != data.num_classes:
        raise ValueError("classifier shape does not match dataset")
    logp = log_softmax(params.logits(data.features))
    return float(logp[np.arange(data.n), data.labels].sum())


def prior_target(dim: int, prior: GaussianPrior) -> DifferentiableTarget:
    """The prior alone as a target (the exact posterior for empty data)."""
    return DifferentiableTarget(
        dim=dim,
        logp=lambda theta: log_prior(theta, prior),
        grad=lambda theta: log_prior_grad(theta, prior),
    )


def posterior_target_classification(
    data: LatentDataset | None,
    prior: GaussianPrior,
    num_classes: int | None = None,
    feature_dim: int | None = None,
) -> DifferentiableTarget:
    """Joint log-density of a softmax last layer; data=None gives the bare prior.

    Gradient is analytic: dW = sum_i (onehot(y_i) - p_i) z_i^T - W / sigma^2,
    with the bias analogue.
    """
    if data is None:
        if num_classes is None or feature_dim is None:
            raise ValueError("num_classes and feature_dim are required without data")
        k, d = int(num_classes), int(feature_dim)
        return prior_target(k * d + k, prior)

    k, d = data.num_classes, data.dim
    Z, y = data.features, data.labels
    n = data.n
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0
    var = prior.std**2
    dim = k * d + k
    const = -0.5 * dim * math.log(2.0 * math.pi * var)

    def logp(theta: np.ndarray) -> float:
        w = theta[: k * d].reshape(k, d)
        b = theta[k * d:]
        lsm = log_softmax(Z @ w.T + b)
        loglik = float(lsm[np.arange(n), y].sum())
        return loglik + const - 0.5 * float(theta @ theta) / var

    def grad(theta: np.ndarray) -> np.ndarray:
        w = theta[: k * d].reshape(k, d)
        b = theta[k * d:]
        probs = softmax(Z @ w.T + b)
        resid = onehot - probs
        gw = resid.T @ Z - w / var
        gb = resid.sum(axis=0) - b / var
        return np.concatenate([gw.ravel(), gb])

    return DifferentiableTarget(dim=dim, logp=logp, grad=grad)


def posterior_target_regression(
    data: RegressionDataset,
    prior: GaussianPrior,
    noise_std: float,
) -> DifferentiableTarget:
    """Linear-Gaussian head over latent features: sum_i log N(y_i | w z_i + b, s_n^2) + prior."""
    if not noise_std > 0:
        raise ValueError("noise_std must be positive")
    Z, y = data.inputs, data.targets
    n, d = Z.shape
    dim = d + 1
    var_n = noise_std**2
    var_p = prior.std**2
    lik_const = -0.5 * n * math.log(2.0 * math.pi * var_n)
    prior_const = -0.5 * dim * math.log(2.0 * math.pi * var_p)

    def logp(theta: np.ndarray) -> float:
        resid = y - (Z @ theta[:d] + theta[d])
        loglik = lik_const - 0.5 * float(resid @ resid) / var_n
        return loglik + prior_const - 0.5 * float(theta @ theta) / var_p

    def grad(theta: np.ndarray) -> np.ndarray:
        resid = y - (Z @ theta[:d] + theta[d])
        gw = Z.T @ resid / var_n - theta[:d] / var_p
        gb = resid.sum() / var_n - theta[d] / var_p
        return np.concatenate([gw, [gb]])

    return DifferentiableTarget(dim=dim, logp=logp, grad=grad)


def posterior_target_full_network(
    spec: MlpSpec,
    data: LatentDataset | RegressionDataset,
    prior: GaussianPrior,
    noise_std: float = 0.1,
    max_dim: int = 20_000,
) -> DifferentiableTarget:
    """Joint log-density over every MLP parameter, gradient via backpropagation.

    Restricted to toy scale: refuses networks above ``max_dim`` parameters.
    """
    dim = spec.num_params
    if dim > max_dim:
        raise ValueError(f"network has {dim} parameters, above the cap {max_dim}")
    if isinstance(data, LatentDataset):
        if spec.task != "classification" or spec.output_dim != data.num_classes:
            raise ValueError("spec does not match the classification dataset")
        X, y = data.features, data.labels
        n = data.n
        onehot = np.zeros((n, data.num_classes))
        onehot[np.arange(n), y] = 1.0
    else:
        if spec.task != "regression":
            raise ValueError("spec does not match the regression dataset")
        if not noise_std > 0:
            raise ValueError("noise_std must be positive")
        X, y = data.inputs, data.targets
        n = data.n
    if spec.input_dim != X.shape[1]:
        raise ValueError("spec input width does not match data")
    var_p = prior.std**2
    prior_const = -0.5 * dim * math.log(2.0 * math.pi * var_p)
    var_n = noise_std**2
    lik_const = -0.5 * n * math.log(2.0 * math.pi * var_n)

    def _loglik_and_outgrad(output: np.ndarray) -> tuple[float, np.ndarray]:
        if spec.task == "classification":
            lsm = log_softmax(output)
            return float((lsm * onehot).sum()), onehot - np.exp(lsm)
        resid = y - output[:, 0]
        return lik_const - 0.5 * float(resid @ resid) / var_n, (resid / var_n)[:, None]

    def logp(theta: np.ndarray) -> float:
        weights, biases = unflatten_params(spec, theta)
        acts, _ = _forward_pass(spec, weights, biases, X)
        loglik, _ = _loglik_and_outgrad(acts[-1])
        return loglik + prior_const - 0.5 * float(theta @ theta) / var_p

    def grad(theta: np.ndarray) -> np.ndarray:
        weights, biases = unflatten_params(spec, theta)
        acts, _ = _forward_pass(spec, weights, biases, X)
        _, d_out = _loglik_and_outgrad(acts[-1])
        return _backprop(spec, weights, biases, X, d_out) - theta / var_p

    return DifferentiableTarget(dim=dim, logp=logp, grad=grad)


def predict_proba(source, features: np.ndarray) -> PredictiveBundle:
    """Softmax probabilities per member for flat draws, a classifier, or a sample set.

    Accepts a (dim,) or (M, dim) array of flattened classifier parameters, a
    LastLayerClassifier, or anything exposing ``all_draws()`` (a posterior
    sample set). The member axis is ordered chain-major for sample sets.
    """
    features = np.asarray(features, dtype=np.float64)
    if hasattr(source, "all_draws"):
        thetas = source.all_draws()
    elif isinstance(source, LastLayerClassifier):
        thetas = source.flatten()[None, :]
    else:
        thetas = np.asarray(source, dtype=np.float64)
        if thetas.ndim == 1:
            thetas = thetas[None, :]
    d = features.shape[1]
    if thetas.ndim != 2 or thetas.shape[1] % (d + 1) != 0:
        raise ValueError(f"parameter dimension {thetas.shape} incompatible with feature dim {d}")
    k = thetas.shape[1] // (d + 1)
    members = np.empty((thetas.shape[0], features.shape[0], k))
    for m, theta in enumerate(thetas):
        w = theta[: k * d].reshape(k, d)
        b = theta[k * d:]
        members[m] = softmax(features @ w.T + b)
    return PredictiveBundle(members)


def draw_from_prior(prior: GaussianPrior, dim: int, rng: RngState) -> np.ndarray:
    """Cold-start initialization: one draw from the parameter prior."""
    return prior.std * rng.generator().standard_normal(dim)
