"""Non-HMC last-layer probabilistic methods used for head-to-head comparison.

Four families:

* MAP softmax: the deterministic baseline, an L2-regularized multinomial
  logistic fit driven to gradient-norm convergence;
* variational last layer: per-parameter Gaussian posteriors trained on the
  evidence lower bound with reparameterized likelihood gradients;
* sub-ensemble: independently trained linear heads over shared features,
  diversified only by initialization and minibatch order;
* Gaussian discriminant analysis over the feature space, whose mixture
  log-density doubles as an OOD score.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import LatentDataset
from .mlp import OptimizerConfig, log_softmax, softmax
from .rng import RngState
from .targets import GaussianPrior, LastLayerClassifier, PredictiveBundle, predict_proba


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    # exact inverse of log(1 + e^x) for positive y
    return np.log(np.expm1(y))


def kl_diag_gaussian(mu: np.ndarray, std: np.ndarray, prior_std: float) -> float:
    """KL(N(mu, diag std^2) || N(0, prior_std^2 I)), summed over parameters."""
    mu = np.asarray(mu, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    var_ratio = (std / prior_std) ** 2
    return float(0.5 * np.sum(var_ratio + (mu / prior_std) ** 2 - 1.0 - np.log(var_ratio)))


@dataclass(frozen=True)
class VariationalLastLayer:
    """Mean-field Gaussian over the flattened classifier parameters."""

    mu: np.ndarray
    rho: np.ndarray
    prior: GaussianPrior
    num_classes: int
    feature_dim: int

    def __post_init__(self) -> None:
        mu = np.asarray(self.mu, dtype=np.float64)
        rho = np.asarray(self.rho, dtype=np.float64)
        dim = self.num_classes * self.feature_dim + self.num_classes
        if mu.shape != (dim,) or rho.shape != (dim,):
            raise ValueError(f"expected {dim} variational parameters")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(rho))):
            raise ValueError("variational parameters must be finite")
        mu.setflags(write=False)
        rho.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "rho", rho)

    @property
    def std(self) -> np.ndarray:
        return softplus(self.rho)

    @property
    def dim(self) -> int:
        return self.mu.size

    def kl_to_prior(self) -> float:
        return kl_diag_gaussian(self.mu, self.std, self.prior.std)

    def draw(self, gen: np.random.Generator, n: int) -> np.ndarray:
        xi = gen.standard_normal((n, self.dim))
        return self.mu + self.std * xi


@dataclass(frozen=True)
class SubEnsemble:
    members: tuple[LastLayerClassifier, ...]
    seeds: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.members) < 2:
            raise ValueError("a sub-ensemble needs at least 2 members")
        if len(self.seeds) != len(self.members):
            raise ValueError("one seed per member required")

    @property
    def num_members(self) -> int:
        return len(self.members)


def _check_classification_data(data: LatentDataset):
    k, d = data.num_classes, data.dim
    onehot = np.zeros((data.n, k))
    onehot[np.arange(data.n), data.labels] = 1.0
    return k, d, onehot


def _objective_and_grad(theta, Z, onehot, var_p):
    """Negative (loglik + logprior) without constants, and its gradient."""
    n, k = onehot.shape
    d = Z.shape[1]
    w = theta[: k * d].reshape(k, d)
    b = theta[k * d:]
    lsm = log_softmax(Z @ w.T + b)
    value = -float((lsm * onehot).sum()) + 0.5 * float(theta @ theta) / var_p
    resid = np.exp(lsm) - onehot
    gw = resid.T @ Z + w / var_p
    gb = resid.sum(axis=0) + b / var_p
    return value, np.concatenate([gw.ravel(), gb])


def fit_map_softmax(
    data: LatentDataset,
    prior: GaussianPrior,
    opt: OptimizerConfig | None = None,
    rng: RngState | None = None,
    tol: float = 1e-6,
) -> LastLayerClassifier:
    """Full-batch gradient descent with backtracking to gradient norm < tol.

    The objective (L2-regularized cross-entropy) is strictly convex, so any
    starting point reaches the same optimum; rng only randomizes the start.
    """
    k, d, onehot = _check_classification_data(data)
    Z = data.features
    var_p = prior.std**2
    max_iter = opt.epochs if opt is not None else 5000
    step = opt.learning_rate if opt is not None else 1.0
    theta = np.zeros(k * d + k) if rng is None else 0.1 * rng.generator().standard_normal(k * d + k)

    value, grad = _objective_and_grad(theta, Z, onehot, var_p)
    for _ in range(max_iter):
        gnorm2 = float(grad @ grad)
        if math.sqrt(gnorm2) < tol:
            break
        # Armijo backtracking, then let the step grow again
        while step > 1e-18:
            candidate = theta - step * grad
            new_value, new_grad = _objective_and_grad(candidate, Z, onehot, var_p)
            if np.isfinite(new_value) and new_value <= value - 1e-4 * step * gnorm2:
                break
            step *= 0.5
        else:
            break
        theta, value, grad = candidate, new_value, new_grad
        step *= 1.5
    if not np.all(np.isfinite(theta)):
        raise RuntimeError("MAP fit diverged")
    return LastLayerClassifier.from_flat(theta, k, d)


def _fit_minibatch_classifier(data, prior, opt, rng) -> LastLayerClassifier:
    """Stochastic minibatch fit of the regularized softmax head (one member)."""
    k, d, _ = _check_classification_data(data)
    Z, y = data.features, data.labels
    n = data.n
    var_p = prior.std**2
    gen = rng.generator()
    theta = 0.1 * gen.standard_normal(k * d + k)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    t = 0
    for _ in range(opt.epochs):
        order = gen.permutation(n)
        for start in range(0, n, opt.batch_size):
            idx = order[start:start + opt.batch_size]
            w = theta[: k * d].reshape(k, d)
            b = theta[k * d:]
            probs = softmax(Z[idx] @ w.T + b)
            onehot = np.zeros_like(probs)
            onehot[np.arange(idx.size), y[idx]] = 1.0
            resid = probs - onehot
            gw = resid.T @ Z[idx] / idx.size + (w / var_p) / n
            gb = resid.sum(axis=0) / idx.size + (b / var_p) / n
            grad = np.concatenate([gw.ravel(), gb])
            if opt.method == "adam":
                t += 1
                m = 0.9 * m + 0.1 * grad
                v = 0.999 * v + 0.001 * grad**2
                theta = theta - opt.learning_rate * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            else:
                theta = theta - opt.learning_rate * grad
    if not np.all(np.isfinite(theta)):
        raise RuntimeError("member fit diverged")
    return LastLayerClassifier.from_flat(theta, k, d)


def fit_sub_ensemble(
    data: LatentDataset,
    n_members: int,
    prior: GaussianPrior,
    opt: OptimizerConfig,
    rng: RngState,
) -> SubEnsemble:
    """n_members independently trained heads; seeds vary init and shuffling."""
    if n_members < 2:
        raise ValueError("a sub-ensemble needs at least 2 members")
    members = []
    seeds = []
    for i, member_rng in enumerate(rng.split(n_members)):
        members.append(_fit_minibatch_classifier(data, prior, opt, member_rng))
        seeds.append(i)
    return SubEnsemble(tuple(members), tuple(seeds))


def fit_bbb_last_layer(
    data: LatentDataset,
    prior: GaussianPrior,
    opt: OptimizerConfig,
    mc_samples_per_step: int = 1,
    rng: RngState | None = None,
) -> tuple[VariationalLastLayer, np.ndarray]:
    """Maximizes the ELBO with reparameterized likelihood gradients.

    q starts at the prior (mu = 0, std = prior std). Each minibatch step
    optimizes  sum-loglik(batch) - KL/num_batches  so one epoch sums to the
    full ELBO; the returned trace holds the per-epoch ELBO estimate.
    """
    if mc_samples_per_step < 1:
        raise ValueError("mc_samples_per_step must be >= 1")
    k, d, _ = _check_classification_data(data)
    Z, y = data.features, data.labels
    n = data.n
    dim = k * d + k
    if rng is None:
        rng = RngState(opt.seed)
    gen = rng.generator()

    mu = np.zeros(dim)
    rho = np.full(dim, float(inv_softplus(prior.std)))
    adam_m = np.zeros(2 * dim)
    adam_v = np.zeros(2 * dim)
    t = 0
    num_batches = math.ceil(n / opt.batch_size)
    trace = np.empty(opt.epochs)
    for epoch in range(opt.epochs):
        order = gen.permutation(n)
        elbo_epoch = 0.0
        for start in range(0, n, opt.batch_size):
            idx = order[start:start + opt.batch_size]
            std = softplus(rho)
            g_mu = np.zeros(dim)
            g_rho = np.zeros(dim)
            loglik_acc = 0.0
            for _ in range(mc_samples_per_step):
                xi = gen.standard_normal(dim)
                theta = mu + std * xi
                w = theta[: k * d].reshape(k, d)
                b = theta[k * d:]
                lsm = log_softmax(Z[idx] @ w.T + b)
                rows = np.arange(idx.size)
                loglik_acc += float(lsm[rows, y[idx]].sum())
                onehot = np.zeros_like(lsm)
                onehot[rows, y[idx]] = 1.0
                resid = onehot - np.exp(lsm)
                g_theta = np.concatenate([(resid.T @ Z[idx]).ravel(), resid.sum(axis=0)])
                g_mu += g_theta
                g_rho += g_theta * xi / (1.0 + np.exp(-rho))
            g_mu /= mc_samples_per_step
            g_rho /= mc_samples_per_step
            loglik_acc /= mc_samples_per_step

            # KL gradient, weighted per batch
            kl_w = 1.0 / num_batches
            var_p = prior.std**2
            g_mu -= kl_w * mu / var_p
            g_rho -= kl_w * (std / var_p - 1.0 / std) / (1.0 + np.exp(-rho))
            elbo_epoch += loglik_acc - kl_w * kl_diag_gaussian(mu, std, prior.std)

            grad = -np.concatenate([g_mu, g_rho])  # minimize the negative ELBO
            t += 1
            adam_m = 0.9 * adam_m + 0.1 * grad
            adam_v = 0.999 * adam_v + 0.001 * grad**2
            update = opt.learning_rate * (adam_m / (1 - 0.9**t)) / (np.sqrt(adam_v / (1 - 0.999**t)) + 1e-8)
            mu = mu - update[:dim]
            rho = rho - update[dim:]
        trace[epoch] = elbo_epoch
        if not np.isfinite(elbo_epoch):
            raise RuntimeError(f"ELBO diverged at epoch {epoch}")
    return VariationalLastLayer(mu, rho, prior, k, d), trace


def elbo_estimate(vll: VariationalLastLayer, data: LatentDataset, rng: RngState, mc_samples: int = 64) -> float:
    """Monte-Carlo ELBO under q with a dedicated stream (for comparisons)."""
    gen = rng.generator()
    thetas = vll.draw(gen, mc_samples)
    k, d = vll.num_classes, vll.feature_dim
    total = 0.0
    for theta in thetas:
        w = theta[: k * d].reshape(k, d)
        b = theta[k * d:]
        lsm = log_softmax(data.features @ w.T + b)
        total += float(lsm[np.arange(data.n), data.labels].sum())
    return total / mc_samples - vll.kl_to_prior()


def sample_predictions(method, features: np.ndarray, n_members: int, rng: RngState) -> PredictiveBundle:
    """Uniform member selection (finite sets) or fresh reparameterized draws.

    Posterior sample sets are split as evenly as possible over their chains,
    mirroring the collection rule; requesting every member of a finite set
    returns them all in stored order.
    """
    if n_members < 1:
        raise ValueError("n_members must be >= 1")
    features = np.asarray(features, dtype=np.float64)
    gen = rng.generator()
    if isinstance(method, VariationalLastLayer):
        thetas = method.draw(gen, n_members)
        return predict_proba(thetas, features)
    if isinstance(method, SubEnsemble):
        if n_members > method.num_members:
            raise ValueError(f"requested {n_members} members, ensemble has {method.num_members}")
        if n_members == method.num_members:
            chosen = np.arange(n_members)
        else:
            chosen = np.sort(gen.choice(method.num_members, size=n_members, replace=False))
        thetas = np.stack([method.members[i].flatten() for i in chosen])
        return predict_proba(thetas, features)
    # posterior sample set: even split over chains
    chains = method.chains
    c = len(chains)
    base, rem = divmod(n_members, c)
    picks = []
    for i, chain in enumerate(chains):
        want = base + (1 if i < rem else 0)
        if want > chain.shape[0]:
            raise ValueError(f"requested {want} draws from chain {i} holding {chain.shape[0]}")
        if want == chain.shape[0]:
            idx = np.arange(want)
        else:
            idx = np.sort(gen.choice(chain.shape[0], size=want, replace=False))
        picks.append(chain[idx])
    return predict_proba(np.concatenate(picks, axis=0), features)


@dataclass(frozen=True)
class GdaModel:
    """Per-class Gaussian fit over the feature space."""

    means: np.ndarray  # (K, D)
    covariances: np.ndarray  # (K, D, D)
    log_weights: np.ndarray  # (K,)
    ridge: float

    def __post_init__(self) -> None:
        means = np.asarray(self.means, dtype=np.float64)
        covs = np.asarray(self.covariances, dtype=np.float64)
        logw = np.asarray(self.log_weights, dtype=np.float64)
        k, d = means.shape
        if covs.shape != (k, d, d) or logw.shape != (k,):
            raise ValueError("inconsistent GDA shapes")
        for arr in (means, covs, logw):
            arr.setflags(write=False)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covs)
        object.__setattr__(self, "log_weights", logw)

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]


def fit_gda(train: LatentDataset, ridge: float | None = None, shared_covariance: bool = False) -> GdaModel:
    """Class means, regularized class covariances, empirical class weights.

    ridge=None uses 1e-3 * trace(cov)/D per class. Every class needs at
    least two rows so its sample covariance exists.
    """
    k, d = train.num_classes, train.dim
    Z, y = train.features, train.labels
    counts = np.bincount(y, minlength=k)
    if np.any(counts < 2):
        bad = int(np.argmin(counts))
        raise ValueError(f"class {bad} has {counts[bad]} training rows, need >= 2")
    means = np.stack([Z[y == cls].mean(axis=0) for cls in range(k)])
    covs = np.stack([np.cov(Z[y == cls], rowvar=False, ddof=1).reshape(d, d) for cls in range(k)])
    if shared_covariance:
        pooled = np.tensordot(counts - 1, covs, axes=1) / float((counts - 1).sum())
        covs = np.repeat(pooled[None], k, axis=0)
    lam_used = 0.0
    for cls in range(k):
        lam = ridge if ridge is not None else 1e-3 * float(np.trace(covs[cls])) / d
        covs[cls] = covs[cls] + lam * np.eye(d)
        lam_used = max(lam_used, lam)
    for cls in range(k):
        try:
            np.linalg.cholesky(covs[cls])
        except np.linalg.LinAlgError:
            raise ValueError(f"class {cls} covariance is not positive definite after regularization") from None
    log_weights = np.log(counts / counts.sum())
    return GdaModel(means, covs, log_weights, float(lam_used))


@dataclass(frozen=True)
class GdaScores:
    posteriors: np.ndarray  # (N, K), rows sum to 1
    log_density: np.ndarray  # (N,) mixture log-density

    @property
    def ood_score(self) -> np.ndarray:
        """Higher means more out-of-distribution."""
        return -self.log_density


def gda_scores(model: GdaModel, features: np.ndarray) -> GdaScores:
    """Class posteriors by Bayes' rule and the weighted mixture log-density."""
    Z = np.asarray(features, dtype=np.float64)
    n = Z.shape[0]
    k, d = model.means.shape
    log_joint = np.empty((n, k))
    for cls in range(k):
        chol = np.linalg.cholesky(model.covariances[cls])
        diff = Z - model.means[cls]
        solved = np.linalg.solve(chol, diff.T)
        maha = np.sum(solved**2, axis=0)
        log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
        log_pdf = -0.5 * (d * math.log(2.0 * math.pi) + log_det + maha)
        log_joint[:, cls] = model.log_weights[cls] + log_pdf
    log_density = np.logaddexp.reduce(log_joint, axis=1)
    posteriors = np.exp(log_joint - log_density[:, None])
    posteriors = posteriors / posteriors.sum(axis=1, keepdims=True)
    return GdaScores(posteriors, log_density)


def method_to_json(method, path: str | Path) -> None:
    """Serializes any fitted method with a tag so the harness can reload it."""
    if isinstance(method, LastLayerClassifier):
        payload = {
            "method": "map",
            "num_classes": method.num_classes,
            "feature_dim": method.feature_dim,
            "params": [float(v) for v in method.flatten()],
        }
    elif isinstance(method, VariationalLastLayer):
        payload = {
            "method": "bbb",
            "num_classes": method.num_classes,
            "feature_dim": method.feature_dim,
            "mu": [float(v) for v in method.mu],
            "rho": [float(v) for v in method.rho],
            "prior_std": method.prior.std,
        }
    elif isinstance(method, SubEnsemble):
        payload = {
            "method": "subensemble",
            "num_classes": method.members[0].num_classes,
            "feature_dim": method.members[0].feature_dim,
            "members": [[float(v) for v in m.flatten()] for m in method.members],
            "seeds": list(method.seeds),
        }
    elif isinstance(method, GdaModel):
        payload = {
            "method": "gda",
            "means": method.means.tolist(),
            "covariances": method.covariances.tolist(),
            "log_weights": method.log_weights.tolist(),
            "ridge": method.ridge,
        }
    else:
        raise TypeError(f"cannot serialize method of type {type(method).__name__}")
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def method_from_json(path: str | Path):
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    tag = payload["method"]
    if tag == "map":
        return LastLayerClassifier.from_flat(
            np.asarray(payload["params"]), payload["num_classes"], payload["feature_dim"]
        )
    if tag == "bbb":
        return VariationalLastLayer(
            np.asarray(payload["mu"]),
            np.asarray(payload["rho"]),
            GaussianPrior(payload["prior_std"]),
            payload["num_classes"],
            payload["feature_dim"],
        )
    if tag == "subensemble":
        members = tuple(
            LastLayerClassifier.from_flat(np.asarray(m), payload["num_classes"], payload["feature_dim"])
            for m in payload["members"]
        )
        return SubEnsemble(members, tuple(payload["seeds"]))
    if tag == "gda":
        return GdaModel(
            np.asarray(payload["means"]),
            np.asarray(payload["covariances"]),
            np.asarray(payload["log_weights"]),
            payload["ridge"],
        )
    raise ValueError(f"unknown method tag {tag!r}")
