import math

import numpy as np
import pytest
from scipy.special import ndtr

from lastlayer.nuts import (
    AdaptationState,
    PhasePoint,
    PosteriorSampleSet,
    SamplerConfig,
    adapt_step_size,
    find_reasonable_step_size,
    hamiltonian,
    leapfrog,
    nuts_transition,
    run_chains,
)
from lastlayer.rng import RngState
from lastlayer.targets import DifferentiableTarget, GaussianPrior, prior_target


def standard_normal_target(dim):
    return prior_target(dim, GaussianPrior(1.0))


def test_hamiltonian_closed_form():
    target = standard_normal_target(2)
    point = PhasePoint(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    assert math.isclose(hamiltonian(target, point), 1.0 + math.log(2 * math.pi), rel_tol=1e-12)


def test_hamiltonian_zero_momentum_and_sign_symmetry():
    target = standard_normal_target(3)
    gen = RngState(0).generator()
    theta = gen.standard_normal(3)
    p = gen.standard_normal(3)
    rest = PhasePoint(theta, np.zeros(3))
    assert math.isclose(hamiltonian(target, rest), -target.logp(theta), rel_tol=1e-12)
    assert math.isclose(
        hamiltonian(target, PhasePoint(theta, p)),
        hamiltonian(target, PhasePoint(theta, -p)),
        rel_tol=1e-15,
    )


def test_leapfrog_forced_values_1d_normal():
    target = standard_normal_target(1)
    out = leapfrog(target, PhasePoint(np.array([1.0]), np.array([0.0])), 0.1)
    assert math.isclose(out.position[0], 0.995, rel_tol=1e-12)
    assert math.isclose(out.momentum[0], -0.09975, rel_tol=1e-12)


def test_leapfrog_reversibility():
    target = standard_normal_target(4)
    gen = RngState(1).generator()
    start = PhasePoint(gen.standard_normal(4), gen.standard_normal(4))
    forward = leapfrog(target, start, 0.3)
    # flip momentum, step again, flip back: must return to the start
    back = leapfrog(target, PhasePoint(forward.position, -forward.momentum), 0.3)
    assert np.allclose(back.position, start.position, atol=1e-12)
    assert np.allclose(-back.momentum, start.momentum, atol=1e-12)
    backward = leapfrog(target, forward, 0.3, direction=-1)
    assert np.allclose(backward.position, start.position, atol=1e-12)


def test_leapfrog_energy_error_second_order():
    """Mean |H_k - H_0| along a fixed-time trajectory quarters when eps halves."""
    target = standard_normal_target(2)
    T = 3.0

    def mean_error(eps):
        gen = RngState(7).generator()
        errors = []
        for _ in range(20):
            pt = PhasePoint(gen.standard_normal(2), gen.standard_normal(2))
            h0 = hamiltonian(target, pt)
            for _ in range(round(T / eps)):
                pt = leapfrog(target, pt, eps)
                errors.append(abs(hamiltonian(target, pt) - h0))
        return float(np.mean(errors))

    for eps in (0.2, 0.1):
        ratio = mean_error(eps) / mean_error(eps / 2)
        assert 3.0 < ratio < 5.0, ratio


def test_leapfrog_rejects_bad_step():
    target = standard_normal_target(2)
    with pytest.raises(ValueError):
        leapfrog(target, PhasePoint(np.zeros(2), np.zeros(2)), 0.0)


def test_nuts_frozen_dynamics_at_tiny_step():
    target = standard_normal_target(1)
    gen = RngState(3).generator()
    theta = np.array([0.4])
    theta_next, stats = nuts_transition(target, theta, 1e-10, gen, max_tree_depth=4)
    assert abs(theta_next[0] - theta[0]) < 1e-9
    assert stats.tree_depth == 4


def test_nuts_moment_recovery_2d():
    target = standard_normal_target(2)
    gen = RngState(11).generator()
    theta = np.zeros(2)
    # warm up briefly at a hand-picked stable step size
    draws = np.empty((2000, 2))
    for i in range(200):
        theta, _ = nuts_transition(target, theta, 0.8, gen)
    for i in range(2000):
        theta, _ = nuts_transition(target, theta, 0.8, gen)
        draws[i] = theta
    assert np.all(np.abs(draws.mean(axis=0)) < 0.1)
    assert np.all((draws.var(axis=0) > 0.85) & (draws.var(axis=0) < 1.15))


def test_nuts_empirical_cdf_matches_analytic():
    target = standard_normal_target(1)
    gen = RngState(13).generator()
    theta = np.zeros(1)
    draws = np.empty(2000)
    for i in range(200):
        theta, _ = nuts_transition(target, theta, 0.9, gen)
    for i in range(2000):
        theta, _ = nuts_transition(target, theta, 0.9, gen)
        draws[i] = theta[0]
    xs = np.sort(draws)
    empirical = np.arange(1, 2001) / 2000
    ks = np.max(np.abs(empirical - ndtr(xs)))
    assert ks < 0.05, ks


def test_adaptation_zero_error_signal():
    state = AdaptationState(mu=math.log(10 * 0.5), target_accept=0.7)
    eps_values = []
    for _ in range(50):
        state, eps = adapt_step_size(state, 0.7)
        eps_values.append(eps)
    # no drift: every proposed step size stays at exp(mu)
    assert np.allclose(eps_values, math.exp(state.mu), rtol=1e-12)
    assert math.isclose(state.adapted_step_size, math.exp(state.mu), rel_tol=1e-9)


def test_adaptation_monotone_directions():
    for accept, increasing in ((1.0, True), (0.0, False)):
        state = AdaptationState(mu=math.log(10 * 0.3), target_accept=0.8)
        seq = []
        for _ in range(30):
            state, eps = adapt_step_size(state, accept)
            seq.append(eps)
        diffs = np.diff(seq)
        assert np.all(diffs > 0) if increasing else np.all(diffs < 0)


def test_find_reasonable_step_size_brackets():
    target = standard_normal_target(5)
    gen = RngState(17).generator()
    eps = find_reasonable_step_size(target, np.zeros(5), gen)
    assert 0.05 < eps < 5.0


def test_run_chains_bookkeeping_single_draw():
    target = standard_normal_target(3)
    cfg = SamplerConfig(burn_in=0, samples=1, chains=1, init_step_size=0.5, seed=0)
    out = run_chains(target, cfg, [np.zeros(3)])
    assert out.total_draws == 1
    assert len(out.stats[0]["accept_stat"]) == 1
    assert out.chains[0].shape == (1, 3)


def test_run_chains_even_split():
    cfg = SamplerConfig(burn_in=0, samples=50, chains=2, init_step_size=0.5, seed=0)
    assert cfg.samples_per_chain() == [25, 25]
    cfg = SamplerConfig(burn_in=0, samples=51, chains=2, init_step_size=0.5, seed=0)
    assert cfg.samples_per_chain() == [26, 25]
    target = standard_normal_target(2)
    out = run_chains(target, cfg, [np.zeros(2), np.ones(2)])
    assert [c.shape[0] for c in out.chains] == [26, 25]


def test_run_chains_prior_only_std():
    for sp in (0.1, 1.0, 5.0):
        target = prior_target(4, GaussianPrior(sp))
        cfg = SamplerConfig(burn_in=200, samples=1000, chains=1, target_accept=0.8, seed=23)
        out = run_chains(target, cfg, [np.zeros(4)])
        stds = out.all_draws().std(axis=0, ddof=1)
        assert np.all(np.abs(stds / sp - 1.0) < 0.1), (sp, stds)


def test_run_chains_deterministic():
    target = standard_normal_target(3)
    cfg = SamplerConfig(burn_in=50, samples=40, chains=2, target_accept=0.8, seed=5)
    inits = [np.zeros(3), 0.5 * np.ones(3)]
    a = run_chains(target, cfg, inits)
    b = run_chains(target, cfg, inits)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.chains, b.chains))
    for sa, sb in zip(a.stats, b.stats):
        for key in sa:
            assert np.array_equal(sa[key], sb[key])


def test_run_chains_acceptance_tracks_target():
    target = standard_normal_target(5)
    for delta in (0.6, 0.8):
        cfg = SamplerConfig(burn_in=300, samples=500, chains=1, target_accept=delta, seed=29)
        out = run_chains(target, cfg, [np.zeros(5)])
        assert abs(out.mean_accept_stat() - delta) < 0.15


def test_run_chains_rejects_bad_init():
    target = DifferentiableTarget(2, lambda t: float("nan"), lambda t: np.zeros(2))
    cfg = SamplerConfig(burn_in=0, samples=1, chains=1, init_step_size=0.5, seed=0)
    with pytest.raises(ValueError):
        run_chains(target, cfg, [np.zeros(2)])
    good = standard_normal_target(2)
    with pytest.raises(ValueError):
        run_chains(good, cfg, [np.zeros(3)])


def test_divergent_target_flags_and_stays():
    # a cliff: gradient explodes beyond |theta| > 1, producing huge energy errors
    def logp(t):
        return float(-0.5 * t @ t - 1e8 * np.maximum(np.abs(t) - 1.0, 0.0).sum())

    def grad(t):
        return -t - 1e8 * np.sign(t) * (np.abs(t) > 1.0)

    target = DifferentiableTarget(1, logp, grad)
    gen = RngState(31).generator()
    theta = np.array([0.999])
    saw_divergence = False
    for _ in range(50):
        new_theta, stats = nuts_transition(target, theta, 0.5, gen)
        if stats.diverged:
            saw_divergence = True
        theta = new_theta
        assert np.all(np.abs(theta) <= 1.0 + 1e-6)
    assert saw_divergence


def test_sample_set_validation_and_json_roundtrip(tmp_path):
    target = standard_normal_target(2)
    cfg = SamplerConfig(burn_in=10, samples=9, chains=2, target_accept=0.8, seed=7)
    out = run_chains(target, cfg, [np.zeros(2), np.zeros(2)])
    assert [c.shape[0] for c in out.chains] == [5, 4]
    path = tmp_path / "samples.json"
    out.to_json(path)
    back = PosteriorSampleSet.from_json(path)
    assert back.config == out.config
    assert all(x.tobytes() == y.tobytes() for x, y in zip(back.chains, out.chains))
    assert back.divergence_count() == out.divergence_count()
    with pytest.raises(ValueError):
        PosteriorSampleSet((np.zeros((5, 2)), np.zeros((2, 2))), out.stats, cfg)


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(samples=0)
    with pytest.raises(ValueError):
        SamplerConfig(target_accept=1.0)
    with pytest.raises(ValueError):
        SamplerConfig(max_tree_depth=16)
    with pytest.raises(ValueError):
        SamplerConfig(init_step_size=-0.5)
    with pytest.raises(ValueError):
        SamplerConfig(burn_in=-1)
