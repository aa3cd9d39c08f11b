"""Hamiltonian Monte Carlo with the No-U-Turn Sampler.

The transition kernel grows a balanced binary trajectory tree by doubling in
random directions until the path starts folding back on itself (the U-turn
criterion) or the depth cap is reached, and selects the next state from the
slice-valid leaves. Kinetic energy uses an identity mass matrix, so

    H(theta, p) = -logp(theta) + 0.5 * ||p||^2.

Step size is tuned during burn-in by dual averaging toward a target
acceptance statistic and frozen at the averaged value afterwards. Each chain
adapts independently and draws from its own split random stream, so a
(seed, config, target) triple fully determines the output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .rng import RngState
from .targets import DifferentiableTarget

# energy error (above the slice) at which a leaf is declared divergent
DIVERGENCE_CAP = 1000.0


class DivergedStepError(RuntimeError):
    """A leapfrog step produced non-finite state."""


@dataclass(frozen=True)
class SamplerConfig:
    burn_in: int = 100
    samples: int = 50
    chains: int = 1
    target_accept: float = 0.8
    max_tree_depth: int = 10
    init_step_size: float | str = "auto"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must be in (0, 1)")
        if not 1 <= self.max_tree_depth <= 15:
            raise ValueError("max_tree_depth must be in [1, 15]")
        if self.init_step_size != "auto" and not float(self.init_step_size) > 0:
            raise ValueError("init_step_size must be positive or 'auto'")

    def samples_per_chain(self) -> list[int]:
        """Total retained draws split as evenly as possible over the chains."""
        base, rem = divmod(self.samples, self.chains)
        return [base + 1 if c < rem else base for c in range(self.chains)]

    def to_dict(self) -> dict:
        return {
            "burn_in": self.burn_in,
            "samples": self.samples,
            "chains": self.chains,
            "target_accept": self.target_accept,
            "max_tree_depth": self.max_tree_depth,
            "init_step_size": self.init_step_size,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class PhasePoint:
    position: np.ndarray
    momentum: np.ndarray

    def __post_init__(self) -> None:
        pos = np.asarray(self.position, dtype=np.float64)
        mom = np.asarray(self.momentum, dtype=np.float64)
        if pos.shape != mom.shape or pos.ndim != 1:
            raise ValueError("position and momentum must be equal-length vectors")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(mom))):
            raise ValueError("phase point must be finite")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "momentum", mom)


def hamiltonian(target: DifferentiableTarget, point: PhasePoint) -> float:
    return -target.logp(point.position) + 0.5 * float(point.momentum @ point.momentum)


def leapfrog(target: DifferentiableTarget, point: PhasePoint, step_size: float, direction: int = 1) -> PhasePoint:
    """One symplectic step: half momentum, full position, half momentum."""
    if not step_size > 0:
        raise ValueError("step_size must be positive")
    eps = direction * step_size
    p_half = point.momentum + 0.5 * eps * target.grad(point.position)
    theta = point.position + eps * p_half
    grad = target.grad(theta)
    if not np.all(np.isfinite(grad)):
        raise DivergedStepError("non-finite gradient during leapfrog step")
    p_new = p_half + 0.5 * eps * grad
    return PhasePoint(theta, p_new)


def _leapfrog_raw(target, theta, p, grad, eps):
    """Internal step returning (theta, p, logp, grad); may contain non-finite values."""
    p_half = p + 0.5 * eps * grad
    theta_new = theta + eps * p_half
    with np.errstate(over="ignore", invalid="ignore"):
        logp_new = target.logp(theta_new) if np.all(np.isfinite(theta_new)) else -np.inf
        grad_new = target.grad(theta_new) if np.isfinite(logp_new) else np.full_like(theta, np.nan)
        p_new = p_half + 0.5 * eps * grad_new
    return theta_new, p_new, logp_new, grad_new


@dataclass(frozen=True)
class TransitionStats:
    accept_stat: float
    tree_depth: int
    energy: float
    diverged: bool
    step_size: float = float("nan")


class _Tree:
    """Mutable state while one trajectory tree is assembled."""

    __slots__ = ("left", "right", "proposal", "proposal_energy", "n", "valid",
                 "alpha_sum", "n_alpha", "diverged")

    def __init__(self, left, right, proposal, proposal_energy, n, valid, alpha_sum, n_alpha, diverged):
        self.left = left
        self.right = right
        self.proposal = proposal
        self.proposal_energy = proposal_energy
        self.n = n
        self.valid = valid
        self.alpha_sum = alpha_sum
        self.n_alpha = n_alpha
        self.diverged = diverged


def _no_uturn(left, right) -> bool:
    """True while the trajectory keeps extending (no fold-back at either end)."""
    span = right[0] - left[0]
    return float(span @ left[1]) >= 0.0 and float(span @ right[1]) >= 0.0


def _build_tree(target, state, log_u, direction, depth, eps, h0, gen) -> _Tree:
    if depth == 0:
        theta, p, logp, grad = _leapfrog_raw(target, state[0], state[1], state[3], direction * eps)
        leaf = (theta, p, logp, grad)
        if np.isfinite(logp) and np.all(np.isfinite(p)):
            h = -logp + 0.5 * float(p @ p)
            n = 1 if log_u <= -h else 0
            diverged = log_u > DIVERGENCE_CAP - h
            alpha = min(1.0, math.exp(min(0.0, h0 - h)))
        else:
            h = math.inf
            n, diverged, alpha = 0, True, 0.0
        return _Tree(leaf, leaf, theta, h, n, not diverged, alpha, 1, diverged)

    tree = _build_tree(target, state, log_u, direction, depth - 1, eps, h0, gen)
    if tree.valid:
        inner_state = tree.left if direction == -1 else tree.right
        other = _build_tree(target, inner_state, log_u, direction, depth - 1, eps, h0, gen)
        if direction == -1:
            tree.left = other.left
        else:
            tree.right = other.right
        if other.n > 0 and gen.uniform() < other.n / max(tree.n + other.n, 1):
            tree.proposal = other.proposal
            tree.proposal_energy = other.proposal_energy
        tree.n += other.n
        tree.alpha_sum += other.alpha_sum
        tree.n_alpha += other.n_alpha
        tree.diverged |= other.diverged
        tree.valid = other.valid and _no_uturn(tree.left, tree.right)
    return tree


def nuts_transition(
    target: DifferentiableTarget,
    theta: np.ndarray,
    step_size: float,
    gen: np.random.Generator,
    max_tree_depth: int = 10,
) -> tuple[np.ndarray, TransitionStats]:
    """One NUTS update from theta; returns the next position and statistics."""
    theta = np.asarray(theta, dtype=np.float64)
    logp = target.logp(theta)
    grad = target.grad(theta)
    p0 = gen.standard_normal(theta.size)
    h0 = -logp + 0.5 * float(p0 @ p0)
    log_u = math.log(gen.uniform()) - h0

    state = (theta, p0, logp, grad)
    left = right = state
    theta_next = theta
    energy = h0
    n = 1
    depth = 0
    alpha_sum = 0.0
    n_alpha = 0
    diverged = False
    valid = True
    while valid and depth < max_tree_depth:
        direction = 1 if gen.uniform() < 0.5 else -1
        start = left if direction == -1 else right
        tree = _build_tree(target, start, log_u, direction, depth, step_size, h0, gen)
        if direction == -1:
            left = tree.left
        else:
            right = tree.right
        if tree.valid and tree.n > 0 and gen.uniform() < tree.n / n:
            theta_next = tree.proposal
            energy = tree.proposal_energy
        n += tree.n
        alpha_sum += tree.alpha_sum
        n_alpha += tree.n_alpha
        diverged |= tree.diverged
        valid = tree.valid and _no_uturn(left, right)
        depth += 1

    stats = TransitionStats(
        accept_stat=alpha_sum / max(n_alpha, 1),
        tree_depth=depth,
        energy=float(energy),
        diverged=bool(diverged),
        step_size=float(step_size),
    )
    return np.asarray(theta_next, dtype=np.float64), stats


@dataclass(frozen=True)
class AdaptationState:
    """Dual-averaging accumulators; active during burn-in only."""

    mu: float
    target_accept: float
    log_eps_bar: float = 0.0
    h_bar: float = 0.0
    iteration: int = 0
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75

    @property
    def adapted_step_size(self) -> float:
        return math.exp(self.log_eps_bar)


def adapt_step_size(state: AdaptationState, accept_stat: float, iteration: int | None = None) -> tuple[AdaptationState, float]:
    """One dual-averaging update; returns the new state and the next step size."""
    m = state.iteration + 1 if iteration is None else int(iteration)
    eta_h = 1.0 / (m + state.t0)
    h_bar = (1.0 - eta_h) * state.h_bar + eta_h * (state.target_accept - accept_stat)
    log_eps = state.mu - math.sqrt(m) / state.gamma * h_bar
    eta = m**-state.kappa
    log_eps_bar = eta * log_eps + (1.0 - eta) * state.log_eps_bar
    new_state = replace(state, h_bar=h_bar, log_eps_bar=log_eps_bar, iteration=m)
    return new_state, math.exp(log_eps)


def find_reasonable_step_size(target: DifferentiableTarget, theta: np.ndarray, gen: np.random.Generator) -> float:
    """Bracket a step size whose one-step acceptance crosses 0.5 by doubling/halving."""
    theta = np.asarray(theta, dtype=np.float64)
    eps = 1.0
    p0 = gen.standard_normal(theta.size)
    logp = target.logp(theta)
    grad = target.grad(theta)
    h0 = -logp + 0.5 * float(p0 @ p0)

    def log_ratio(eps_try: float) -> float:
        _, p1, logp1, _ = _leapfrog_raw(target, theta, p0, grad, eps_try)
        if not (np.isfinite(logp1) and np.all(np.isfinite(p1))):
            return -math.inf
        return h0 - (-logp1 + 0.5 * float(p1 @ p1))

    r = log_ratio(eps)
    direction = 1 if r > math.log(0.5) else -1
    for _ in range(100):
        if direction * r <= -direction * math.log(2.0):
            break
        eps *= 2.0**direction
        if not 1e-10 < eps < 1e10:
            break
        r = log_ratio(eps)
    return eps


def _require_finite_init(target, init, chain):
    init = np.asarray(init, dtype=np.float64)
    if init.shape != (target.dim,):
        raise ValueError(f"chain {chain}: init has shape {init.shape}, expected ({target.dim},)")
    if not np.isfinite(target.logp(init)):
        raise ValueError(f"chain {chain}: non-finite log-density at the initial position")
    return init


@dataclass(frozen=True)
class PosteriorSampleSet:
    """Retained draws per chain with per-draw sampler statistics."""

    chains: tuple[np.ndarray, ...]
    stats: tuple[dict[str, np.ndarray], ...]
    config: SamplerConfig

    def __post_init__(self) -> None:
        chains = tuple(np.asarray(c, dtype=np.float64) for c in self.chains)
        for c in chains:
            if not np.all(np.isfinite(c)):
                raise ValueError("draws must be finite")
            c.setflags(write=False)
        counts = [c.shape[0] for c in chains]
        if max(counts) - min(counts) > 1:
            raise ValueError("per-chain draw counts may differ by at most 1")
        for c, st in zip(chains, self.stats):
            if any(len(v) != c.shape[0] for v in st.values()):
                raise ValueError("stats lengths must match draw counts")
        object.__setattr__(self, "chains", chains)
        object.__setattr__(self, "stats", tuple(self.stats))

    @property
    def num_chains(self) -> int:
        return len(self.chains)

    @property
    def dim(self) -> int:
        return self.chains[0].shape[1]

    @property
    def total_draws(self) -> int:
        return sum(c.shape[0] for c in self.chains)

    def all_draws(self) -> np.ndarray:
        """All retained draws stacked chain-major."""
        return np.concatenate(self.chains, axis=0)

    def divergence_count(self) -> int:
        return int(sum(st["diverged"].sum() for st in self.stats))

    def mean_accept_stat(self) -> float:
        return float(np.concatenate([st["accept_stat"] for st in self.stats]).mean())

    def to_json(self, path: str | Path) -> None:
        payload = {
            "config": self.config.to_dict(),
            "chains": [[list(map(float, row)) for row in c] for c in self.chains],
            "stats": [
                {
                    "accept_stat": [float(v) for v in st["accept_stat"]],
                    "tree_depth": [int(v) for v in st["tree_depth"]],
                    "step_size": [float(v) for v in st["step_size"]],
                    "energy": [float(v) for v in st["energy"]],
                    "diverged": [bool(v) for v in st["diverged"]],
                }
                for st in self.stats
            ],
        }
        Path(path).write_text(json.dumps(payload), encoding="utf-8")

    @staticmethod
    def from_json(path: str | Path) -> "PosteriorSampleSet":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        cfg = dict(payload["config"])
        config = SamplerConfig(**cfg)
        chains = tuple(np.asarray(c, dtype=np.float64) for c in payload["chains"])
        stats = tuple(
            {
                "accept_stat": np.asarray(st["accept_stat"], dtype=np.float64),
                "tree_depth": np.asarray(st["tree_depth"], dtype=np.int64),
                "step_size": np.asarray(st["step_size"], dtype=np.float64),
                "energy": np.asarray(st["energy"], dtype=np.float64),
                "diverged": np.asarray(st["diverged"], dtype=bool),
            }
            for st in payload["stats"]
        )
        return PosteriorSampleSet(chains, stats, config)


def run_chains(target: DifferentiableTarget, config: SamplerConfig, inits) -> PosteriorSampleSet:
    """Burn in, adapt, and retain draws for every chain.

    `inits` must provide one initial position per chain. Chains use split
    random streams derived from config.seed and adapt independently.
    """
    inits = [np.asarray(v, dtype=np.float64) for v in np.atleast_2d(np.asarray(inits, dtype=np.float64))]
    if len(inits) != config.chains:
        raise ValueError(f"need {config.chains} initial positions, got {len(inits)}")
    per_chain = config.samples_per_chain()
    root = RngState(config.seed)
    chain_draws = []
    chain_stats = []
    for c in range(config.chains):
        gen = root.child(c).generator()
        theta = _require_finite_init(target, inits[c], c)
        if config.init_step_size == "auto":
            eps = find_reasonable_step_size(target, theta, gen)
        else:
            eps = float(config.init_step_size)
        adapt = AdaptationState(mu=math.log(10.0 * eps), target_accept=config.target_accept)
        for _ in range(config.burn_in):
            theta, stats = nuts_transition(target, theta, eps, gen, config.max_tree_depth)
            adapt, eps = adapt_step_size(adapt, stats.accept_stat)
        if config.burn_in > 0:
            eps = adapt.adapted_step_size

        n_keep = per_chain[c]
        draws = np.empty((n_keep, target.dim))
        st = {
            "accept_stat": np.empty(n_keep),
            "tree_depth": np.empty(n_keep, dtype=np.int64),
            "step_size": np.empty(n_keep),
            "energy": np.empty(n_keep),
            "diverged": np.empty(n_keep, dtype=bool),
        }
        for s in range(n_keep):
            theta, stats = nuts_transition(target, theta, eps, gen, config.max_tree_depth)
            draws[s] = theta
            st["accept_stat"][s] = stats.accept_stat
            st["tree_depth"][s] = stats.tree_depth
            st["step_size"][s] = eps
            st["energy"][s] = stats.energy
            st["diverged"][s] = stats.diverged
        chain_draws.append(draws)
        chain_stats.append(st)
    return PosteriorSampleSet(tuple(chain_draws), tuple(chain_stats), config)
