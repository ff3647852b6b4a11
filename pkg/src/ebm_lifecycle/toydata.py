"""Synthetic datasets with known densities and a frozen-generator fixture.

Datasets are addressable by name (see :data:`DATASETS`):

=================  ===  ==================================================
name               d    description
=================  ===  ==================================================
double-well-1d     1    two Gaussians at -1 and +1
ring-4-2d          2    four Gaussians on a circle of radius 2
two-moons-2d       2    noisy two-moons manifold; no density
product-8d         8    product of eight 1-D two-mode mixtures
defense-2d         2    two flat Gaussians at (-1, 0) and (+1, 0)
=================  ===  ==================================================
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment

from .energy import EnergyModel, GaussianMixtureEnergy
from .generator import Generator, cooperative_grad
from .metrics import Grid, batch_diversity, gaussian_frechet
from .optim import OptimizerState, adam_step

FRECHET_BAR = 0.5


class ToyDataset:
    """A sampler for ``q(x)`` with an optional exact density and nearest-mode labels."""

    def __init__(self, name: str, dim: int, sampler: Callable, modes: np.ndarray,
                 mixture: GaussianMixtureEnergy | None = None, energy: EnergyModel | None = None,
                 grid: Grid | None = None, bounds=None):
        self.name, self.dim = name, dim
        self._sampler = sampler
        self.modes = np.atleast_2d(np.asarray(modes, dtype=np.float64))
        self.mixture = mixture
        self._energy = energy if energy is not None else mixture
        self.grid = grid
        self.bounds = bounds

    def __repr__(self):
        return f"ToyDataset({self.name!r}, dim={self.dim})"

    @property
    def has_density(self) -> bool:
        return self._energy is not None

    def sample(self, n: int, rng) -> np.ndarray:
        if n < 1:
            raise ValueError("sample size must be at least 1")
        return self._sampler(int(n), rng)

    def energy_model(self) -> EnergyModel:
        """``-log q`` as an energy (normalised, so ``Z = 1``)."""
        if self._energy is None:
            raise ValueError(f"dataset {self.name} has no closed-form density")
        return self._energy

    def density(self, x) -> np.ndarray:
        return np.exp(-self.energy_model().energy(x))

    def labels(self, x) -> np.ndarray:
        """Index of the nearest mode; ties go to the lowest index."""
        xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.dim == 1 and xb.shape[1] != 1:
            xb = xb.reshape(-1, 1)
        d2 = np.sum((xb[:, None, :] - self.modes[None]) ** 2, axis=2)
        return np.argmin(d2, axis=1)

    @property
    def num_classes(self) -> int:
        return self.modes.shape[0]


def _mixture_sampler(weights, means, stds):
    weights = np.asarray(weights, float)
    means = np.atleast_2d(np.asarray(means, float))
    stds = np.asarray(stds, float)

    def sample(n, rng):
        comp = rng.choice(len(weights), size=n, p=weights)
        return means[comp] + stds[comp][:, None] * rng.standard_normal((n, means.shape[1]))
    return sample


def gaussian_mixture(name: str, weights, means, stds, grid: Grid | None = None, bounds=None) -> ToyDataset:
    """Isotropic mixture; ``stds`` has one entry per component."""
    means = np.atleast_2d(np.asarray(means, float))
    stds = np.asarray(stds, float)
    mix = GaussianMixtureEnergy(weights, means, stds ** 2)
    return ToyDataset(name, means.shape[1], _mixture_sampler(weights, means, stds), means,
                      mixture=mix, grid=grid, bounds=bounds)


def double_well_1d(std: float = 0.3) -> ToyDataset:
    return gaussian_mixture("double-well-1d", [0.5, 0.5], [[-1.0], [1.0]], [std, std],
                            grid=Grid.regular(-3.0, 3.0, 240))


def ring_4_2d(radius: float = 2.0, std: float = 0.2) -> ToyDataset:
    ang = np.arange(4) * np.pi / 2
    means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    means[np.abs(means) < 1e-12] = 0.0
    lim = radius + 6 * std
    return gaussian_mixture("ring-4-2d", [0.25] * 4, means, [std] * 4,
                            grid=Grid.regular(-lim, lim, 120, dim=2))


def defense_2d(separation: float = 1.0, std: float = 0.15, off_std: float = 0.02) -> ToyDataset:
    """Two classes at ``(+-separation, 0)``; the second coordinate carries no label
    information and has a small spread ``off_std``."""
    means = np.array([[-separation, 0.0], [separation, 0.0]])
    var = np.array([[std ** 2, off_std ** 2]] * 2)
    mix = GaussianMixtureEnergy([0.5, 0.5], means, var)
    scale = np.array([std, off_std])

    def sample(n, rng):
        comp = rng.integers(0, 2, size=n)
        return means[comp] + scale * rng.standard_normal((n, 2))
    lim = separation + 6 * std
    grid = Grid((-lim, -6 * off_std), (lim, 6 * off_std), (120, 60))
    return ToyDataset("defense-2d", 2, sample, means, mixture=mix, grid=grid)


def two_moons_2d(noise: float = 0.1) -> ToyDataset:
    def sample(n, rng):
        t = rng.uniform(0.0, np.pi, size=n)
        upper = rng.random(n) < 0.5
        x = np.where(upper, np.cos(t), 1.0 - np.cos(t))
        y = np.where(upper, np.sin(t), 0.5 - np.sin(t))
        return np.stack([x, y], axis=1) + noise * rng.standard_normal((n, 2))
    return ToyDataset("two-moons-2d", 2, sample, modes=[[0.0, 0.5], [1.0, 0.0]])


class _ProductEnergy(EnergyModel):
    """Sum of the same 1-D energy applied to every coordinate."""

    def __init__(self, factor: GaussianMixtureEnergy, dim: int):
        self.factor, self.dim = factor, dim

    def _energy(self, xb):
        n, d = xb.shape
        return self.factor._energy(xb.reshape(-1, 1)).reshape(n, d).sum(axis=1)

    def _grad(self, xb):
        return self.factor._grad(xb.reshape(-1, 1)).reshape(xb.shape)


def product_8d(std: float = 0.3, dim: int = 8) -> ToyDataset:
    factor = GaussianMixtureEnergy([0.5, 0.5], [[-1.0], [1.0]], [std ** 2, std ** 2])

    def sample(n, rng):
        return np.where(rng.random((n, dim)) < 0.5, -1.0, 1.0) + std * rng.standard_normal((n, dim))
    # the 2^d mode lattice is too large to label; the two diagonal modes are kept for labelling
    modes = np.stack([-np.ones(dim), np.ones(dim)])
    return ToyDataset("product-8d", dim, sample, modes, energy=_ProductEnergy(factor, dim))


DATASETS: dict[str, Callable[[], ToyDataset]] = {
    "double-well-1d": double_well_1d,
    "ring-4-2d": ring_4_2d,
    "two-moons-2d": two_moons_2d,
    "product-8d": product_8d,
    "defense-2d": defense_2d,
}


def load_dataset(name: str, **kw) -> ToyDataset:
    try:
        return DATASETS[name](**kw)
    except KeyError:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}") from None


def sample_data(ds: ToyDataset, n: int, rng) -> np.ndarray:
    return ds.sample(n, rng)


# --- frozen generator --------------------------------------------------------

def _single_gaussian(ds: ToyDataset):
    mix = ds.mixture
    if mix is not None and mix.weights.size == 1:
        return mix.means[0], mix.covariances[0]
    return None


def frozen_generator_fixture(ds: ToyDataset, fit_budget: int, rng, hidden=(64, 64),
                             batch_size: int = 256, lr: float = 3e-3, check_size: int = 4000) -> Generator:
    """Fit a generator to ``ds`` and verify it against the Frechet bar.

    Single-Gaussian data gets the exact affine map. Otherwise an MLP is fit by
    matching each generated point to a data point through a minibatch optimal
    assignment and regressing onto the match with the cooperative loss.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    single = _single_gaussian(ds)
    if single is not None:
        mu, cov = single
        gen = Generator.affine(np.linalg.cholesky(cov), mu)
    else:
        gen = Generator.init(ds.dim, ds.dim, hidden, rng, activation="leaky_relu")
        opt = OptimizerState.zeros_like(gen.params())
        for _ in range(int(fit_budget)):
            z = rng.standard_normal((batch_size, ds.dim))
            x = ds.sample(batch_size, rng)
            g = gen.generate(z)
            cost = np.sum((g[:, None, :] - x[None]) ** 2, axis=2)
            _, col = linear_sum_assignment(cost)
            grads = cooperative_grad(gen, z, x[col])
            gen = gen.with_params(adam_step(opt, gen.params(), grads, lr))
    fake = gen.generate(rng.standard_normal((check_size, gen.latent_dim)))
    real = ds.sample(check_size, rng)
    fd = gaussian_frechet(fake, real)
    if not fd <= FRECHET_BAR:
        raise RuntimeError(f"frozen generator for {ds.name} misses the Frechet bar: {fd:.3f} > {FRECHET_BAR}")
    gen.fit_report = {"frechet": fd, "diversity_ratio": batch_diversity(fake[:1000]) / batch_diversity(real[:1000])}
    return gen
