"""Evaluation metrics: performance, calibration, MCMC diagnostics, OOD scores.

Conventions pinned here:

* entropy is in nats (natural log), with 0 * log 0 = 0;
* F1 is macro-averaged with empty-class F1 defined as 0;
* adaptive calibration bins are equal-count per class, remainder instances
  assigned to the leading bins, ties in predicted probability broken by
  stable input order;
* the lifted-curve ratio uses the overall accuracy as the random-ordering
  baseline, so uninformative (constant) uncertainty scores exactly 0;
* autocorrelations for the effective sample size are the biased (divide by
  N) normalized autocovariances, summed up to the lag before the first
  negative value;
* the between/within variance ratio for multi-chain convergence uses sample
  variances (n - 1) and no split-chain or length correction.

Mean/spread aggregation (``two_sem`` and friends) uses sequential Python
floats rather than numpy reductions so persisted summaries can be reproduced
bit-for-bit by a plain spreadsheet-style recomputation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class UndefinedMetricError(ValueError):
    """The metric is undefined for this input (e.g., zero variance)."""


def entropy_rows(probs: np.ndarray) -> np.ndarray:
    """Row-wise Shannon entropy in nats, 0 log 0 = 0. No validation."""
    probs = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=-1)


def predictive_entropy(distribution: np.ndarray) -> float:
    """Entropy of one predictive distribution; validates it is a distribution."""
    p = np.asarray(distribution, dtype=np.float64)
    if p.ndim != 1:
        raise UndefinedMetricError(f"expected a single distribution row, got shape {p.shape}")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise UndefinedMetricError("probabilities must be finite and nonnegative")
    if abs(float(p.sum()) - 1.0) > 1e-9:
        raise UndefinedMetricError(f"probabilities sum to {p.sum()}, not 1")
    return float(entropy_rows(p))


def two_sem(values) -> float:
    """Two standard errors of the mean, sample std with n - 1."""
    xs = [float(v) for v in values]
    n = len(xs)
    if n < 2:
        raise UndefinedMetricError("need at least two values for a standard error")
    mean = sum(xs) / n
    var = sum((x - mean) ** 2 for x in xs) / (n - 1)
    return 2.0 * math.sqrt(var) / math.sqrt(n)


def _bin_sizes(n: int, bins: int) -> list[int]:
    base, rem = divmod(n, bins)
    return [base + 1 if r < rem else base for r in range(bins)]


def adaptive_calibration_error(mean_probs: np.ndarray, labels: np.ndarray, bins: int = 10) -> float:
    """Mean |accuracy - confidence| over equal-count probability bins per class."""
    probs = np.asarray(mean_probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = probs.shape
    if n < bins:
        raise UndefinedMetricError(f"need at least {bins} instances for {bins} bins, got {n}")
    sizes = _bin_sizes(n, bins)
    total = 0.0
    for cls in range(k):
        order = np.argsort(probs[:, cls], kind="stable")
        start = 0
        for size in sizes:
            cell = order[start:start + size]
            start += size
            acc = float(np.mean(labels[cell] == cls))
            conf = float(np.mean(probs[cell, cls]))
            total += abs(acc - conf)
    return total / (k * bins)


def raulc(uncertainties: np.ndarray, correct: np.ndarray) -> float:
    """Relative area under the lifted curve.

    Sweeps thresholds over the sorted uncertainty values; at each threshold
    the accuracy of every instance at or below it is compared to the overall
    accuracy. Positive values mean low uncertainty aligns with correctness.
    """
    u = np.asarray(uncertainties, dtype=np.float64)
    c = np.asarray(correct, dtype=np.float64)
    if u.shape != c.shape or u.ndim != 1:
        raise ValueError("uncertainties and correct flags must be equal-length vectors")
    n = u.size
    if n < 2:
        raise UndefinedMetricError("need at least two instances")
    overall = float(c.mean())
    if overall == 0.0:
        raise UndefinedMetricError("all predictions wrong: lifted curve undefined")
    order = np.argsort(u, kind="stable")
    sorted_u = u[order]
    prefix = np.concatenate([[0.0], np.cumsum(c[order])])
    # count of instances with value <= each threshold (ties included)
    counts = np.searchsorted(sorted_u, sorted_u, side="right")
    acc_at = prefix[counts] / counts
    return float(-1.0 + np.sum(acc_at / overall) / n)


def ess_from_autocorrelations(n: int, autocorr) -> float:
    """ESS(N) = N / (1 + 2 * sum_k (1 - k/N) R_k) for the given R_1.. sequence."""
    s = 0.0
    for k, r in enumerate(autocorr, start=1):
        s += (1.0 - k / n) * float(r)
    return n / (1.0 + 2.0 * s)


def effective_sample_size(chain: np.ndarray) -> float:
    """Autocorrelation-discounted sample count of one scalar chain.

    Lags are included up to (not including) the first negative
    autocorrelation; the result is clamped to (0, N].
    """
    x = np.asarray(chain, dtype=np.float64)
    if x.ndim != 1 or x.size < 4:
        raise UndefinedMetricError("need a scalar chain of length >= 4")
    n = x.size
    centered = x - x.mean()
    c0 = float(centered @ centered) / n
    if c0 == 0.0:
        raise UndefinedMetricError("zero-variance chain")
    rks = []
    for k in range(1, n):
        rk = float(centered[:-k] @ centered[k:]) / n / c0
        if rk < 0:
            break
        rks.append(rk)
    ess = ess_from_autocorrelations(n, rks)
    return float(min(max(ess, np.finfo(float).tiny), n))


def gelman_rhat(chains) -> float:
    """Between/within variance ratio over C >= 2 equal-length scalar chains."""
    arrs = [np.asarray(c, dtype=np.float64) for c in chains]
    if len(arrs) < 2:
        raise UndefinedMetricError("need at least two chains")
    length = arrs[0].size
    if length < 2 or any(a.ndim != 1 or a.size != length for a in arrs):
        raise UndefinedMetricError("chains must be equal-length vectors of length >= 2")
    within = float(np.mean([a.var(ddof=1) for a in arrs]))
    if within == 0.0:
        raise UndefinedMetricError("zero within-chain variance")
    between = float(np.var([a.mean() for a in arrs], ddof=1))
    return (within + between) / within


@dataclass(frozen=True)
class OodReport:
    roc_auc: float
    pr_auc: float
    fpr95: float

    def to_dict(self) -> dict:
        return {"roc_auc": self.roc_auc, "pr_auc": self.pr_auc, "fpr95": self.fpr95}


def roc_pr_fpr95(scores: np.ndarray, is_ood: np.ndarray) -> OodReport:
    """OOD detection scores; higher score means more out-of-distribution.

    ROC-AUC by the rank (Mann-Whitney) formulation with half credit for
    ties; PR-AUC with OOD as the positive class by right-step interpolation
    over descending thresholds; FPR95 at the lowest threshold accepting at
    least 95% of in-distribution instances.
    """
    s = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(is_ood, dtype=bool)
    if s.shape != flags.shape or s.ndim != 1:
        raise ValueError("scores and flags must be equal-length vectors")
    n_pos = int(flags.sum())
    n_neg = int(flags.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("need both OOD and in-distribution instances")

    # midranks give tied pairs 0.5 credit
    order = np.argsort(s, kind="stable")
    ranks = np.empty(s.size)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    roc = (float(ranks[flags].sum()) - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    # precision/recall at each distinct threshold, descending
    desc = np.argsort(-s, kind="stable")
    tp = np.cumsum(flags[desc].astype(np.float64))
    pred_pos = np.arange(1, s.size + 1, dtype=np.float64)
    distinct = np.ones(s.size, dtype=bool)
    distinct[:-1] = s[desc][1:] != s[desc][:-1]
    precision = (tp / pred_pos)[distinct]
    recall = (tp / n_pos)[distinct]
    pr = float(np.sum(np.diff(np.concatenate([[0.0], recall])) * precision))

    # lowest threshold t with (ID scores <= t) / n_neg >= 0.95
    id_sorted = np.sort(s[~flags])
    need = math.ceil(0.95 * n_neg)
    threshold = id_sorted[need - 1]
    fpr95 = float(np.mean(s[flags] <= threshold))
    return OodReport(roc_auc=float(roc), pr_auc=pr, fpr95=fpr95)


def accuracy_and_macro_f1(predicted: np.ndarray, true: np.ndarray, num_classes: int) -> tuple[float, float]:
    """(accuracy %, macro-F1 %) with empty-class F1 counted as 0."""
    pred = np.asarray(predicted, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError("label vectors must have equal length")
    accuracy = float(np.mean(pred == true)) * 100.0
    f1s = []
    for cls in range(num_classes):
        tp = float(np.sum((pred == cls) & (true == cls)))
        fp = float(np.sum((pred == cls) & (true != cls)))
        fn = float(np.sum((pred != cls) & (true == cls)))
        denom = 2 * tp + fp + fn
        f1s.append(0.0 if denom == 0 else 2 * tp / denom)
    return accuracy, 100.0 * sum(f1s) / num_classes


@dataclass(frozen=True)
class EvaluationReport:
    accuracy: float
    macro_f1: float
    ace: float
    raulc: float
    mean_entropy: float
    sem2: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "ace": self.ace,
            "raulc": self.raulc,
            "mean_entropy": self.mean_entropy,
        }
        if self.sem2:
            out["sem2"] = dict(self.sem2)
        return out


def evaluate_classification(mean_probs: np.ndarray, labels: np.ndarray, bins: int = 10) -> EvaluationReport:
    """Full in-distribution report from member-mean probabilities."""
    probs = np.asarray(mean_probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    predicted = probs.argmax(axis=1)
    accuracy, macro_f1 = accuracy_and_macro_f1(predicted, labels, probs.shape[1])
    entropies = entropy_rows(probs)
    try:
        lifted = raulc(entropies, (predicted == labels).astype(np.float64))
    except UndefinedMetricError:
        lifted = float("nan")
    return EvaluationReport(
        accuracy=accuracy,
        macro_f1=macro_f1,
        ace=adaptive_calibration_error(probs, labels, bins=bins),
        raulc=lifted,
        mean_entropy=float(entropies.mean()),
    )
