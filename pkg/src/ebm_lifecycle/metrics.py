"""Oracles and diagnostics.

The grid oracle discretises a 1-D or 2-D domain and normalises
``exp(-T * U)`` over the cell centres, which stands in for the intractable
partition function. Chain histograms are compared with it through
:func:`kl_divergence`. Samples that land outside the grid are kept as an
explicit overflow mass instead of being silently dropped, so a chain that
escapes the domain is penalised rather than ignored.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.spatial.distance import pdist
from scipy.special import logsumexp

MAX_GRID_DIM = 2
MAX_BINS = 512
KL_SMOOTHING = 1e-12


@dataclass(frozen=True)
class Grid:
    lows: tuple
    highs: tuple
    bins: tuple

    def __post_init__(self):
        d = len(self.bins)
        if not 1 <= d <= MAX_GRID_DIM:
            raise ValueError(f"grid oracle supports 1 or 2 dimensions, got {d}")
        if len(self.lows) != d or len(self.highs) != d:
            raise ValueError("grid bounds and bin counts disagree in dimension")
        for lo, hi, n in zip(self.lows, self.highs, self.bins):
            if not hi > lo:
                raise ValueError("grid upper bound must exceed lower bound")
            if not 1 <= n <= MAX_BINS:
                raise ValueError(f"bins per axis must be in [1, {MAX_BINS}]")

    @classmethod
    def regular(cls, low: float, high: float, bins: int, dim: int = 1) -> "Grid":
        return cls((float(low),) * dim, (float(high),) * dim, (int(bins),) * dim)

    @property
    def dim(self) -> int:
        return len(self.bins)

    def edges(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, n + 1) for lo, hi, n in zip(self.lows, self.highs, self.bins)]

    def centers(self) -> list[np.ndarray]:
        return [0.5 * (e[1:] + e[:-1]) for e in self.edges()]

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.centers(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass
class GridPmf:
    grid: Grid
    probs: np.ndarray          # shape == grid.bins, sums to 1 over in-grid cells
    overflow: float = 0.0      # fraction of mass outside the grid

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64).reshape(self.grid.bins)

    def masses(self) -> np.ndarray:
        """Cell masses followed by the overflow mass; sums to 1."""
        return np.append(self.probs.ravel() * (1.0 - self.overflow), self.overflow)


def grid_boltzmann(model, grid: Grid, temperature: float = 1.0) -> GridPmf:
    """Normalised ``exp(-T * U)`` over the grid cell centres."""
    if model.dim != grid.dim:
        raise ValueError(f"grid has dimension {grid.dim}, energy has {model.dim}")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    logits = -temperature * np.asarray(model.energy(grid.points()))
    return GridPmf(grid, np.exp(logits - logsumexp(logits)))


def pmf_from_density(density, grid: Grid) -> GridPmf:
    """Grid pmf proportional to a density evaluated at the cell centres."""
    w = np.asarray(density(grid.points()), dtype=np.float64)
    return GridPmf(grid, w / w.sum())


def empirical_pmf(samples, grid: Grid) -> GridPmf:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[1] != grid.dim:
        raise ValueError("sample dimension does not match grid")
    edges = grid.edges()
    inside = np.ones(x.shape[0], dtype=bool)
    for j, e in enumerate(edges):
        inside &= (x[:, j] >= e[0]) & (x[:, j] <= e[-1])
    counts, _ = np.histogramdd(x[inside], bins=edges)
    n_in = int(inside.sum())
    overflow = 1.0 - n_in / x.shape[0] if x.shape[0] else 0.0
    probs = counts / n_in if n_in else np.zeros(grid.bins)
    return GridPmf(grid, probs, overflow)


def kl_divergence(p: GridPmf, q: GridPmf) -> float:
    """``sum p log(p / q)`` over cells plus the overflow cell; ``q`` is smoothed by 1e-12."""
    if p.grid != q.grid:
        raise ValueError("KL divergence needs both pmfs on the same grid")
    pm = p.masses()
    qm = q.masses() + KL_SMOOTHING
    qm /= qm.sum()
    nz = pm > 0
    return float(max(0.0, np.sum(pm[nz] * np.log(pm[nz] / qm[nz]))))


def total_variation(p: GridPmf, q: GridPmf) -> float:
    if p.grid != q.grid:
        raise ValueError("total variation needs both pmfs on the same grid")
    return 0.5 * float(np.abs(p.masses() - q.masses()).sum())


def steady_state_kl(samples, target: GridPmf) -> float:
    return kl_divergence(empirical_pmf(samples, target.grid), target)


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    sa = _psd_sqrt(cov_a)
    w = np.linalg.eigvalsh(0.5 * ((sa @ cov_b @ sa) + (sa @ cov_b @ sa).T))
    tr_sqrt = np.sum(np.sqrt(np.clip(w, 0.0, None)))
    diff = mu_a - mu_b
    return float(max(0.0, diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt))


def _fit(x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if n < d + 1:
        raise ValueError(f"need at least {d + 1} samples to fit a {d}-dimensional Gaussian")
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    if np.linalg.eigvalsh(cov).min() <= 1e-12:
        warnings.warn("degenerate sample covariance; adding 1e-6 * I", RuntimeWarning, stacklevel=3)
        cov = cov + 1e-6 * np.eye(d)
    return x.mean(axis=0), cov


def gaussian_frechet(samples_a, samples_b) -> float:
    """Squared 2-Wasserstein distance between Gaussian fits of two sample sets."""
    mu_a, cov_a = _fit(samples_a)
    mu_b, cov_b = _fit(samples_b)
    return frechet_from_moments(mu_a, cov_a, mu_b, cov_b)


def batch_diversity(batch) -> float:
    """Mean pairwise Euclidean distance."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValueError("diversity needs at least two samples")
    return float(pdist(x).mean())


def saturation_stat(samples, bounds: Sequence[float] | None = None) -> tuple[float, float]:
    """Mean Euclidean norm and fraction of coordinates outside ``bounds``."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    mean_norm = float(np.linalg.norm(x, axis=1).mean())
    if bounds is None:
        return mean_norm, 0.0
    lo, hi = bounds
    return mean_norm, float(np.mean((x < lo) | (x > hi)))


@dataclass
class LifetimeStats:
    mean: float
    counts: np.ndarray
    edges: np.ndarray
    n_events: int

    @property
    def empty(self) -> bool:
        return self.n_events == 0


def lifetime_stats(bank_or_lifetimes, bins: int = 20) -> LifetimeStats:
    """Mean and histogram of lifetimes recorded at rejuvenation events."""
    lt = getattr(bank_or_lifetimes, "rejuvenation_lifetimes", bank_or_lifetimes)
    lt = np.asarray(lt, dtype=np.float64)
    if lt.size == 0:
        return LifetimeStats(float("nan"), np.zeros(0, dtype=np.int64), np.zeros(0), 0)
    counts, edges = np.histogram(lt, bins=bins)
    return LifetimeStats(float(lt.mean()), counts, edges, int(lt.size))


def lifetime_ks_test(lifetimes, p: float, steps_per_round: int, rng=0):
    """KS test of ``lifetimes / steps_per_round`` against Geometric(p) on {1, 2, ...}.

    The counts are discrete, so each one is jittered down by an independent
    ``U(0, 1)``. Under the null the jittered values have the continuous CDF
    that linearly interpolates the geometric CDF between integers, which keeps
    the test exact instead of conservative-by-accident.
    """
    rounds = np.asarray(lifetimes, dtype=np.float64) / steps_per_round
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    jittered = rounds - rng.random(rounds.size)
    geom = stats.geom(p)

    def cdf(x):
        k = np.floor(x)
        return geom.cdf(k) + (x - k) * geom.pmf(k + 1)
    return stats.kstest(jittered, cdf)
