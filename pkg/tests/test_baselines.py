import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lastlayer.baselines import (
    GdaModel,
    SubEnsemble,
    VariationalLastLayer,
    elbo_estimate,
    fit_bbb_last_layer,
    fit_gda,
    fit_map_softmax,
    fit_sub_ensemble,
    gda_scores,
    inv_softplus,
    kl_diag_gaussian,
    method_from_json,
    method_to_json,
    sample_predictions,
    softplus,
)
from lastlayer.data import LatentDataset
from lastlayer.mlp import OptimizerConfig
from lastlayer.nuts import SamplerConfig, run_chains
from lastlayer.rng import RngState
from lastlayer.targets import GaussianPrior, LastLayerClassifier, prior_target

from oracles import quadrature_kl_gaussian


def separable_blobs(n_per=40, seed=0, gap=2.0):
    gen = RngState(seed).generator()
    a = gen.standard_normal((n_per, 3)) * 0.3 + np.array([gap, 0, 0])
    b = gen.standard_normal((n_per, 3)) * 0.3 - np.array([gap, 0, 0])
    return LatentDataset(np.vstack([a, b]), np.repeat([0, 1], n_per), 2)


def overlapping_blobs(n_per=40, seed=0):
    return separable_blobs(n_per=n_per, seed=seed, gap=0.15)


def moons_features(seed=0):
    from lastlayer.mlp import MlpSpec, extract_features, train_mlp
    from lastlayer.toydata import two_moons

    data = two_moons(120, 0.15, RngState(seed))
    mlp, _ = train_mlp(
        data, MlpSpec((2, 16, 2)),
        OptimizerConfig(method="adam", learning_rate=0.03, epochs=60, batch_size=32, seed=seed),
    )
    return LatentDataset(extract_features(mlp, data.features), data.labels, 2)


# ---------------------------------------------------------------- MAP softmax

def test_map_separable_perfect_accuracy():
    data = separable_blobs()
    clf = fit_map_softmax(data, GaussianPrior(10.0))
    preds = clf.logits(data.features).argmax(axis=1)
    assert np.mean(preds == data.labels) == 1.0


def test_map_prior_shrinks_weights():
    data = separable_blobs()
    small = fit_map_softmax(data, GaussianPrior(0.001))
    large = fit_map_softmax(data, GaussianPrior(10.0))
    assert np.linalg.norm(small.weights) < 0.01 * np.linalg.norm(large.weights)


def test_map_convexity_restarts_agree():
    data = overlapping_blobs()
    prior = GaussianPrior(1.0)
    from lastlayer.targets import class_log_likelihood, log_prior

    def objective(clf):
        theta = clf.flatten()
        return -(class_log_likelihood(clf, data) + log_prior(theta, prior))

    fits = [fit_map_softmax(data, prior, rng=RngState(s)) for s in (1, 2)]
    values = [objective(c) for c in fits]
    assert abs(values[0] - values[1]) < 1e-6


# ------------------------------------------------------------------- BBB-LL

def test_kl_zero_at_prior_init():
    prior = GaussianPrior(0.7)
    dim = 2 * 3 + 2
    vll = VariationalLastLayer(np.zeros(dim), np.full(dim, float(inv_softplus(prior.std))), prior, 2, 3)
    assert abs(vll.kl_to_prior()) < 1e-12


def test_kl_closed_form_unit_case():
    # q = N(1, 1), p = N(0, 1) per parameter: KL = 0.5
    assert math.isclose(kl_diag_gaussian(np.array([1.0]), np.array([1.0]), 1.0), 0.5, rel_tol=1e-12)


@settings(max_examples=15, deadline=None)
@given(
    st.floats(-3, 3, allow_nan=False),
    st.floats(0.05, 4.0, allow_nan=False),
    st.floats(0.1, 5.0, allow_nan=False),
)
def test_kl_matches_quadrature(mu, std, prior_std):
    closed = kl_diag_gaussian(np.array([mu]), np.array([std]), prior_std)
    quad = quadrature_kl_gaussian(mu, std, prior_std)
    assert abs(closed - quad) < 1e-12 + 1e-9 * abs(closed)


def test_softplus_inverse():
    xs = np.linspace(0.01, 5.0, 20)
    assert np.allclose(softplus(inv_softplus(xs)), xs, atol=1e-12)


def test_bbb_improves_elbo_on_moons_features():
    data = moons_features(seed=1)
    prior = GaussianPrior(1.0)
    opt = OptimizerConfig(method="adam", learning_rate=0.05, epochs=40, batch_size=32, seed=0)
    vll, trace = fit_bbb_last_layer(data, prior, opt, mc_samples_per_step=2, rng=RngState(3))
    dim = vll.dim
    init = VariationalLastLayer(np.zeros(dim), np.full(dim, float(inv_softplus(prior.std))), prior, 2, data.dim)
    elbo_before = elbo_estimate(init, data, RngState(99))
    elbo_after = elbo_estimate(vll, data, RngState(99))
    assert elbo_after > elbo_before
    assert trace[-1] > trace[0]


# -------------------------------------------------------------- sub-ensemble

def test_sub_ensemble_members_differ_on_overlapping_data():
    data = overlapping_blobs(seed=4)
    opt = OptimizerConfig(method="adam", learning_rate=0.05, epochs=15, batch_size=16, seed=0)
    ens = fit_sub_ensemble(data, 5, GaussianPrior(1.0), opt, RngState(5))
    assert ens.num_members == 5
    flats = [m.flatten() for m in ens.members]
    for i in range(5):
        for j in range(i + 1, 5):
            assert np.linalg.norm(flats[i] - flats[j]) > 0


def test_sub_ensemble_strong_prior_predictions_agree():
    data = separable_blobs(seed=6)
    opt = OptimizerConfig(method="adam", learning_rate=0.02, epochs=300, batch_size=80, seed=0)
    ens = fit_sub_ensemble(data, 4, GaussianPrior(0.05), opt, RngState(7))
    probs = [
        np.exp(m.logits(data.features) - m.logits(data.features).max(axis=1, keepdims=True))
        for m in ens.members
    ]
    probs = [p / p.sum(axis=1, keepdims=True) for p in probs]
    spread = np.max([np.abs(p - probs[0]).max() for p in probs[1:]])
    assert spread < 0.01, spread


def test_sub_ensemble_rejects_single_member():
    data = separable_blobs()
    with pytest.raises(ValueError):
        fit_sub_ensemble(data, 1, GaussianPrior(1.0), OptimizerConfig(), RngState(0))


# --------------------------------------------------------- sample_predictions

def test_variational_degenerate_std_collapses_to_mean():
    prior = GaussianPrior(1.0)
    gen = RngState(8).generator()
    dim = 2 * 3 + 2
    mu = gen.standard_normal(dim)
    vll = VariationalLastLayer(mu, np.full(dim, -60.0), prior, 2, 3)  # softplus(-60) ~ 1e-26
    feats = gen.standard_normal((5, 3))
    bundle = sample_predictions(vll, feats, 6, RngState(9))
    from lastlayer.targets import predict_proba

    reference = predict_proba(mu, feats)
    for m in range(6):
        assert np.allclose(bundle.member_probs[m], reference.member_probs[0], atol=1e-9)


def test_sub_ensemble_full_member_bundle_is_deterministic():
    data = overlapping_blobs(seed=10)
    opt = OptimizerConfig(method="adam", learning_rate=0.05, epochs=10, batch_size=16, seed=0)
    ens = fit_sub_ensemble(data, 3, GaussianPrior(1.0), opt, RngState(11))
    feats = data.features[:7]
    a = sample_predictions(ens, feats, 3, RngState(1))
    b = sample_predictions(ens, feats, 3, RngState(2))
    assert a.member_probs.tobytes() == b.member_probs.tobytes()
    from lastlayer.targets import predict_proba

    direct = predict_proba(np.stack([m.flatten() for m in ens.members]), feats)
    assert a.member_probs.tobytes() == direct.member_probs.tobytes()


def test_hmc_selection_splits_evenly_across_chains():
    target = prior_target(4, GaussianPrior(1.0))
    cfg = SamplerConfig(burn_in=20, samples=24, chains=2, target_accept=0.8, seed=12)
    sample_set = run_chains(target, cfg, [np.zeros(4), np.zeros(4)])
    feats = RngState(13).generator().standard_normal((3, 1))
    bundle = sample_predictions(sample_set, feats, 10, RngState(14))
    assert bundle.num_members == 10
    # 5 per chain: every selected parameter vector must come from the right chain
    all_a = {row.tobytes() for row in sample_set.chains[0]}
    all_b = {row.tobytes() for row in sample_set.chains[1]}
    members = bundle.member_probs
    from lastlayer.targets import predict_proba

    count_a = 0
    for chain, bucket in ((sample_set.chains[0], "a"), (sample_set.chains[1], "b")):
        probs = {predict_proba(row, feats).member_probs[0].tobytes() for row in chain}
        hits = sum(1 for m in range(10) if members[m].tobytes() in probs)
        if bucket == "a":
            count_a = hits
    assert count_a == 5


def test_sample_predictions_too_many_members():
    data = overlapping_blobs(seed=15)
    opt = OptimizerConfig(method="adam", learning_rate=0.05, epochs=5, batch_size=16, seed=0)
    ens = fit_sub_ensemble(data, 3, GaussianPrior(1.0), opt, RngState(16))
    with pytest.raises(ValueError):
        sample_predictions(ens, data.features, 4, RngState(0))


def test_sample_predictions_deterministic_under_seed():
    prior = GaussianPrior(1.0)
    gen = RngState(17).generator()
    dim = 2 * 2 + 2
    vll = VariationalLastLayer(gen.standard_normal(dim), np.zeros(dim), prior, 2, 2)
    feats = gen.standard_normal((4, 2))
    a = sample_predictions(vll, feats, 5, RngState(18))
    b = sample_predictions(vll, feats, 5, RngState(18))
    assert a.member_probs.tobytes() == b.member_probs.tobytes()


# ----------------------------------------------------------------------- GDA

def _clusters(n_per=500, seed=0):
    gen = RngState(seed).generator()
    centers = np.array([[3.0, 0.0], [-3.0, 0.0]])
    X = np.vstack([centers[0] + gen.standard_normal((n_per, 2)), centers[1] + gen.standard_normal((n_per, 2))])
    y = np.repeat([0, 1], n_per)
    return LatentDataset(X, y, 2), centers


def test_gda_recovers_cluster_means():
    data, centers = _clusters()
    model = fit_gda(data)
    assert np.all(np.abs(model.means - centers) < 0.1)


def test_gda_large_ridge_approaches_nearest_mean():
    data, centers = _clusters(n_per=100, seed=1)
    model = fit_gda(data, ridge=1e3)
    # covariances ~ ridge * I, so the posterior reduces to the nearest-mean rule
    gen = RngState(2).generator()
    pts = gen.uniform(-5, 5, size=(50, 2))
    post = gda_scores(model, pts).posteriors
    nearest = np.argmin(((pts[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
    assert np.array_equal(post.argmax(axis=1), nearest)


def test_gda_single_row_class_rejected():
    data = LatentDataset([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]], [0, 0, 1], 2)
    with pytest.raises(ValueError):
        fit_gda(data)


def test_gda_posterior_peak_at_class_mean():
    data, _ = _clusters(n_per=200, seed=3)
    model = fit_gda(data)
    for cls in range(2):
        post = gda_scores(model, model.means[cls][None]).posteriors[0]
        assert post.argmax() == cls


def test_gda_far_point_has_lower_density_than_training_rows():
    data, _ = _clusters(n_per=200, seed=4)
    model = fit_gda(data)
    train_density = gda_scores(model, data.features).log_density
    far = gda_scores(model, np.array([[100.0, 100.0]])).log_density[0]
    assert far < train_density.min()


def test_gda_posterior_rows_sum_to_one():
    data, _ = _clusters(n_per=50, seed=5)
    model = fit_gda(data)
    post = gda_scores(model, data.features).posteriors
    assert np.allclose(post.sum(axis=1), 1.0, atol=1e-12)


def test_gda_posterior_matches_bayes_rule_brute_force():
    data = LatentDataset(
        [[0.0, 0.0], [0.2, 0.1], [-0.1, 0.3], [2.0, 2.0], [2.2, 1.9], [1.8, 2.1]],
        [0, 0, 0, 1, 1, 1], 2,
    )
    model = fit_gda(data, ridge=0.05)
    pts = np.array([[0.5, 0.5], [1.5, 1.5]])
    scores = gda_scores(model, pts)
    for i, z in enumerate(pts):
        dens = []
        for cls in range(2):
            cov = model.covariances[cls]
            diff = z - model.means[cls]
            quad_form = diff @ np.linalg.inv(cov) @ diff
            norm = 1.0 / math.sqrt((2 * math.pi) ** 2 * np.linalg.det(cov))
            dens.append(math.exp(model.log_weights[cls]) * norm * math.exp(-0.5 * quad_form))
        expected = np.array(dens) / sum(dens)
        assert np.allclose(scores.posteriors[i], expected, atol=1e-12)
        assert math.isclose(scores.log_density[i], math.log(sum(dens)), rel_tol=1e-10)


def test_shared_covariance_toggle():
    data, _ = _clusters(n_per=100, seed=6)
    model = fit_gda(data, shared_covariance=True)
    assert np.allclose(model.covariances[0], model.covariances[1], atol=1e-12)


# -------------------------------------------------------------- serialization

def test_method_json_roundtrip(tmp_path):
    data = overlapping_blobs(seed=20)
    prior = GaussianPrior(1.0)
    opt = OptimizerConfig(method="adam", learning_rate=0.05, epochs=5, batch_size=16, seed=0)
    methods = [
        fit_map_softmax(data, prior),
        fit_bbb_last_layer(data, prior, opt, rng=RngState(21))[0],
        fit_sub_ensemble(data, 3, prior, opt, RngState(22)),
        fit_gda(data),
    ]
    for i, method in enumerate(methods):
        path = tmp_path / f"m{i}.json"
        method_to_json(method, path)
        back = method_from_json(path)
        assert type(back) is type(method)
        if isinstance(method, LastLayerClassifier):
            assert np.allclose(back.flatten(), method.flatten())
        if isinstance(method, SubEnsemble):
            assert back.num_members == method.num_members
        if isinstance(method, VariationalLastLayer):
            assert np.allclose(back.mu, method.mu)
        if isinstance(method, GdaModel):
            assert np.allclose(back.covariances, method.covariances)
