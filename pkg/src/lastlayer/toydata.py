"""Toy dataset generators and evaluation grids for the 2-D experiments."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import LatentDataset, RegressionDataset, _freeze
from .rng import RngState

# Two observation clusters with a gap in between, so the between-region
# uncertainty of the regression toy can be probed.
DEFAULT_SINUSOID_RANGES: tuple[tuple[float, float], ...] = ((-0.1, 0.4), (0.7, 1.2))


@dataclass(frozen=True)
class Grid2D:
    """Cartesian evaluation grid, rows ordered lexicographically by (y, x)."""

    x_bounds: tuple[float, float]
    y_bounds: tuple[float, float]
    resolution: int
    points: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", _freeze(np.asarray(self.points, dtype=np.float64)))
        if self.points.shape != (self.resolution**2, 2):
            raise ValueError("points must be a resolution^2 x 2 matrix")


def make_grid(x_bounds: tuple[float, float], y_bounds: tuple[float, float], resolution: int) -> Grid2D:
    """resolution^2 points covering the box; corners hit the bounds exactly."""
    if resolution < 2:
        raise ValueError(f"resolution must be >= 2, got {resolution}")
    for name, (lo, hi) in (("x_bounds", x_bounds), ("y_bounds", y_bounds)):
        if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
            raise ValueError(f"{name} must be a non-degenerate ascending interval, got ({lo}, {hi})")
    xs = np.linspace(x_bounds[0], x_bounds[1], resolution)
    ys = np.linspace(y_bounds[0], y_bounds[1], resolution)
    xx, yy = np.meshgrid(xs, ys)
    points = np.column_stack([xx.ravel(), yy.ravel()])
    return Grid2D((float(x_bounds[0]), float(x_bounds[1])), (float(y_bounds[0]), float(y_bounds[1])), resolution, points)


def two_moons(n: int, noise: float, rng: RngState) -> LatentDataset:
    """Two interleaved half-circles with isotropic Gaussian perturbation.

    Class 0 sits on the upper arc of the unit circle at the origin; class 1
    on the reflected lower arc of the unit circle centered at (1, 0.5).
    """
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    if noise < 0:
        raise ValueError("noise must be nonnegative")
    n_upper = (n + 1) // 2
    n_lower = n // 2
    t_upper = np.linspace(0.0, math.pi, n_upper)
    t_lower = np.linspace(0.0, math.pi, n_lower)
    upper = np.column_stack([np.cos(t_upper), np.sin(t_upper)])
    lower = np.column_stack([1.0 - np.cos(t_lower), 0.5 - np.sin(t_lower)])
    points = np.vstack([upper, lower])
    if noise > 0:
        points = points + noise * rng.generator().standard_normal(points.shape)
    labels = np.concatenate([np.zeros(n_upper, dtype=np.int64), np.ones(n_lower, dtype=np.int64)])
    return LatentDataset(points, labels, num_classes=2)


def sinusoid_regression(
    n: int,
    noise: float,
    rng: RngState,
    x_ranges: tuple[tuple[float, float], ...] = DEFAULT_SINUSOID_RANGES,
    amplitude: float = 1.0,
) -> RegressionDataset:
    """Noisy observations of y = amplitude * sin(2 pi x) over an interval union."""
    if n < 1:
        raise ValueError(f"need at least 1 sample, got {n}")
    if noise < 0:
        raise ValueError("noise must be nonnegative")
    ranges = sorted((float(lo), float(hi)) for lo, hi in x_ranges)
    for lo, hi in ranges:
        if hi <= lo:
            raise ValueError(f"degenerate interval ({lo}, {hi})")
    for (_, prev_hi), (lo, _) in zip(ranges, ranges[1:]):
        if lo < prev_hi:
            raise ValueError("x_ranges must be disjoint")

    gen = rng.generator()
    lengths = np.array([hi - lo for lo, hi in ranges])
    which = gen.choice(len(ranges), size=n, p=lengths / lengths.sum())
    u = gen.uniform(size=n)
    lo = np.array([r[0] for r in ranges])[which]
    hi = np.array([r[1] for r in ranges])[which]
    x = lo + u * (hi - lo)
    y = amplitude * np.sin(2.0 * math.pi * x)
    if noise > 0:
        y = y + noise * gen.standard_normal(n)
    return RegressionDataset(x[:, None], y)
