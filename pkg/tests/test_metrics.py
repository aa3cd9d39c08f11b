import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lastlayer.metrics import (
    UndefinedMetricError,
    accuracy_and_macro_f1,
    adaptive_calibration_error,
    effective_sample_size,
    entropy_rows,
    ess_from_autocorrelations,
    gelman_rhat,
    predictive_entropy,
    raulc,
    roc_pr_fpr95,
    two_sem,
)
from lastlayer.rng import RngState

from oracles import (
    ar1_theoretical_ess,
    brute_force_accuracy_f1,
    brute_force_ace,
    brute_force_fpr95,
    brute_force_pr_auc,
    brute_force_raulc,
    brute_force_roc_auc,
    simulate_ar1,
)


# ------------------------------------------------------------------- entropy

def test_entropy_uniform_five_classes():
    assert math.isclose(predictive_entropy(np.full(5, 0.2)), math.log(5), rel_tol=1e-12)


def test_entropy_one_hot_is_zero():
    assert predictive_entropy(np.array([0.0, 1.0, 0.0])) == 0.0


def test_entropy_fair_coin():
    assert math.isclose(predictive_entropy(np.array([0.5, 0.5])), math.log(2), rel_tol=1e-12)


def test_entropy_rejects_bad_distributions():
    with pytest.raises(UndefinedMetricError):
        predictive_entropy(np.array([0.7, 0.7]))
    with pytest.raises(UndefinedMetricError):
        predictive_entropy(np.array([1.2, -0.2]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.001, 1.0), min_size=2, max_size=8))
def test_entropy_bounds(raw):
    p = np.asarray(raw)
    p = p / p.sum()
    h = predictive_entropy(p)
    assert -1e-12 <= h <= math.log(p.size) + 1e-12


# -------------------------------------------------------------------- 2SEM

def test_two_sem_examples():
    assert two_sem([1.0, 1.0, 1.0, 1.0]) == 0.0
    assert math.isclose(two_sem([0.0, 2.0]), 2.0, rel_tol=1e-12)
    assert math.isclose(two_sem([0.0, 1.0, 2.0, 3.0]), math.sqrt(5.0 / 3.0), rel_tol=1e-12)


def test_two_sem_needs_two():
    with pytest.raises(UndefinedMetricError):
        two_sem([1.0])


# --------------------------------------------------------------------- ACE

def test_ace_perfectly_calibrated_cells():
    # within every cell the mean confidence equals the empirical frequency
    probs = np.array([[0.8, 0.2]] * 5 + [[0.2, 0.8]] * 5)
    labels = np.array([0, 0, 0, 0, 1, 1, 1, 1, 1, 0])
    value = adaptive_calibration_error(probs, labels, bins=1)
    assert value < 1e-12


def test_ace_worst_case_single_bin():
    probs = np.array([[1.0, 0.0]] * 4)
    labels = np.ones(4, dtype=int)
    assert math.isclose(adaptive_calibration_error(probs, labels, bins=1), 1.0, rel_tol=1e-12)


def test_ace_matches_brute_force_hand_case():
    probs = np.array([[0.9, 0.1], [0.6, 0.4], [0.3, 0.7], [0.2, 0.8]])
    labels = np.array([0, 1, 1, 1])
    mine = adaptive_calibration_error(probs, labels, bins=2)
    oracle = brute_force_ace(probs, labels, 2)
    assert math.isclose(mine, oracle, abs_tol=1e-12)
    assert math.isclose(mine, 0.25, abs_tol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(10, 40), st.integers(2, 4), st.integers(1, 10))
def test_ace_matches_brute_force_random(seed, n, k, bins):
    gen = RngState(seed).generator()
    probs = gen.dirichlet(np.ones(k), size=n)
    labels = gen.integers(0, k, size=n)
    assert math.isclose(
        adaptive_calibration_error(probs, labels, bins=bins),
        brute_force_ace(probs, labels, bins),
        abs_tol=1e-12,
    )


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_ace_permutation_invariant(seed):
    gen = RngState(seed).generator()
    probs = gen.dirichlet(np.ones(3), size=24)
    labels = gen.integers(0, 3, size=24)
    perm = gen.permutation(24)
    a = adaptive_calibration_error(probs, labels, bins=4)
    b = adaptive_calibration_error(probs[perm], labels[perm], bins=4)
    assert math.isclose(a, b, abs_tol=1e-12)


def test_ace_requires_enough_instances():
    with pytest.raises(UndefinedMetricError):
        adaptive_calibration_error(np.full((5, 2), 0.5), np.zeros(5, dtype=int), bins=10)


# ------------------------------------------------------------------- rAULC

def test_raulc_anticorrelated_hand_case():
    u = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
    correct = np.array([1, 1, 1, 1, 0, 0], dtype=float)
    value = raulc(u, correct)
    oracle = brute_force_raulc(u, correct)
    assert math.isclose(value, oracle, abs_tol=1e-12)
    assert value > 0.0


def test_raulc_constant_uncertainty_is_zero():
    gen = RngState(0).generator()
    correct = (gen.uniform(size=50) < 0.7).astype(float)
    value = raulc(np.full(50, 0.25), correct)
    assert abs(value) < 1e-12


def test_raulc_reversed_ordering_negative():
    u = np.array([0.6, 0.5, 0.4, 0.3, 0.2, 0.1])
    correct = np.array([1, 1, 1, 1, 0, 0], dtype=float)
    value = raulc(u, correct)
    assert math.isclose(value, brute_force_raulc(u, correct), abs_tol=1e-12)
    assert value < 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 30))
def test_raulc_matches_brute_force_random(seed, n):
    gen = RngState(seed).generator()
    u = np.round(gen.uniform(size=n), 2)  # rounding forces ties
    correct = (gen.uniform(size=n) < 0.6).astype(float)
    if correct.sum() == 0:
        correct[0] = 1.0
    assert math.isclose(raulc(u, correct), brute_force_raulc(u, correct), abs_tol=1e-12)


def test_raulc_all_wrong_is_undefined():
    with pytest.raises(UndefinedMetricError):
        raulc(np.array([0.1, 0.2]), np.array([0.0, 0.0]))


# --------------------------------------------------------------------- ESS

def test_ess_formula_substitution():
    value = ess_from_autocorrelations(1000, [0.5])
    assert math.isclose(value, 1000 / (1 + 2 * 0.5 * (1 - 1 / 1000)), rel_tol=1e-12)
    assert math.isclose(value, 500.2501, rel_tol=1e-6)


def test_ess_white_noise_near_n():
    gen = RngState(5).generator()
    chain = gen.standard_normal(1000)
    ess = effective_sample_size(chain)
    assert 800 <= ess <= 1000


def test_ess_ar1_within_30_percent_of_theory():
    gen = RngState(7).generator()
    chain = simulate_ar1(5000, 0.9, gen)
    ess = effective_sample_size(chain)
    theory = ar1_theoretical_ess(5000, 0.9)
    assert abs(ess - theory) / theory < 0.30, (ess, theory)


def test_ess_monotone_in_autocorrelation():
    gen = RngState(9).generator()
    values = []
    for coeff in (0.0, 0.5, 0.9):
        chain = simulate_ar1(4000, coeff, gen) if coeff > 0 else gen.standard_normal(4000)
        values.append(effective_sample_size(chain))
    assert values[0] > values[1] > values[2]


def test_ess_errors():
    with pytest.raises(UndefinedMetricError):
        effective_sample_size(np.ones(100))
    with pytest.raises(UndefinedMetricError):
        effective_sample_size(np.array([1.0, 2.0, 3.0]))


def test_ess_clamped_to_n():
    # strongly negative lag-1 autocorrelation truncates immediately: ESS <= N
    chain = np.tile([1.0, -1.0], 50) + RngState(11).generator().standard_normal(100) * 0.01
    ess = effective_sample_size(chain)
    assert 0 < ess <= 100


# -------------------------------------------------------------------- R-hat

def test_rhat_identical_chains_exactly_one():
    chain = RngState(13).generator().standard_normal(50)
    assert gelman_rhat([chain, chain.copy()]) == 1.0


def test_rhat_constant_chains_undefined():
    with pytest.raises(UndefinedMetricError):
        gelman_rhat([np.zeros(10), np.ones(10)])


def test_rhat_hand_computation():
    value = gelman_rhat([np.array([0.0, 2.0]), np.array([1.0, 3.0])])
    assert math.isclose(value, 1.25, rel_tol=1e-12)


def test_rhat_validation():
    with pytest.raises(UndefinedMetricError):
        gelman_rhat([np.array([1.0, 2.0])])
    with pytest.raises(UndefinedMetricError):
        gelman_rhat([np.array([1.0, 2.0]), np.array([1.0])])


# ------------------------------------------------------------ OOD detection

def test_ood_perfect_separation():
    scores = np.array([0.1, 0.2, 0.3, 0.8, 0.9, 1.0])
    flags = np.array([False, False, False, True, True, True])
    report = roc_pr_fpr95(scores, flags)
    assert report.roc_auc == 1.0
    assert report.pr_auc == 1.0
    assert report.fpr95 == 0.0


def test_ood_all_ties_is_half():
    scores = np.zeros(10)
    flags = np.array([True] * 5 + [False] * 5)
    assert roc_pr_fpr95(scores, flags).roc_auc == 0.5


def test_ood_hand_case_matches_brute_force():
    scores = np.array([0.3, 0.1, 0.9, 0.4, 0.4, 0.7, 0.2, 0.8])
    flags = np.array([False, False, True, False, True, True, False, True])
    report = roc_pr_fpr95(scores, flags)
    assert math.isclose(report.roc_auc, brute_force_roc_auc(scores, flags), abs_tol=1e-12)
    assert math.isclose(report.pr_auc, brute_force_pr_auc(scores, flags), abs_tol=1e-12)
    assert math.isclose(report.fpr95, brute_force_fpr95(scores, flags), abs_tol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(4, 40))
def test_ood_matches_brute_force_random(seed, n):
    gen = RngState(seed).generator()
    scores = np.round(gen.uniform(size=n), 2)
    flags = gen.uniform(size=n) < 0.4
    if flags.all() or not flags.any():
        flags[0] = True
        flags[-1] = False
    report = roc_pr_fpr95(scores, flags)
    assert math.isclose(report.roc_auc, brute_force_roc_auc(scores, flags), abs_tol=1e-12)
    assert math.isclose(report.pr_auc, brute_force_pr_auc(scores, flags), abs_tol=1e-12)
    assert math.isclose(report.fpr95, brute_force_fpr95(scores, flags), abs_tol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_roc_invariant_under_monotone_transform(seed):
    gen = RngState(seed).generator()
    scores = gen.standard_normal(30)
    flags = gen.uniform(size=30) < 0.5
    if flags.all() or not flags.any():
        flags[0] = True
        flags[-1] = False
    a = roc_pr_fpr95(scores, flags).roc_auc
    b = roc_pr_fpr95(np.exp(2.0 * scores) + 5.0, flags).roc_auc
    assert math.isclose(a, b, abs_tol=1e-12)


def test_ood_single_class_rejected():
    with pytest.raises(UndefinedMetricError):
        roc_pr_fpr95(np.array([0.1, 0.2]), np.array([True, True]))


# -------------------------------------------------------------- accuracy/F1

def test_perfect_predictions():
    acc, f1 = accuracy_and_macro_f1(np.array([0, 1, 2]), np.array([0, 1, 2]), 3)
    assert acc == 100.0 and f1 == 100.0


def test_degenerate_predictor_hand_case():
    pred = np.zeros(10, dtype=int)
    true = np.array([0] * 5 + [1] * 5)
    acc, f1 = accuracy_and_macro_f1(pred, true, 2)
    assert acc == 50.0
    assert math.isclose(f1, 100.0 * (2 * 0.5 / 1.5 + 0.0) / 2, rel_tol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_accuracy_f1_matches_brute_force(seed):
    gen = RngState(seed).generator()
    k = int(gen.integers(2, 5))
    pred = gen.integers(0, k, size=20)
    true = gen.integers(0, k, size=20)
    mine = accuracy_and_macro_f1(pred, true, k)
    oracle = brute_force_accuracy_f1(pred, true, k)
    assert math.isclose(mine[0], oracle[0], abs_tol=1e-12)
    assert math.isclose(mine[1], oracle[1], abs_tol=1e-12)


def test_entropy_rows_vectorized_consistency():
    gen = RngState(15).generator()
    probs = gen.dirichlet(np.ones(4), size=6)
    rows = entropy_rows(probs)
    for i in range(6):
        assert math.isclose(rows[i], predictive_entropy(probs[i]), rel_tol=1e-12)
