"""Energy functions ``U(x)`` whose Boltzmann density is ``exp(-U(x)) / Z``.

Analytic energies (quadratic, double well, Gaussian mixture) have known
normalised densities and serve as oracles. :class:`MlpEnergy` wraps a
:class:`~ebm_lifecycle.autodiff.DenseNet` with a scalar output and is the
trainable model. :class:`CompositeEnergy` adds a frozen prior energy and a
Gaussian confinement term ``||x||^2 / (2 sigma^2)`` to a trainable one; only
the trainable part has parameters.

Temperature is not a property of the energy. Samplers scale the drift by
``T`` so that the sampled density is ``exp(-T * U(x))``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .autodiff import DenseNet, ShapeError, backward, forward, input_grad


class EnergyModel:
    """Base class. Subclasses implement ``_energy`` and ``_grad`` on ``(n, d)`` batches."""

    dim: int
    trainable = False

    def _energy(self, xb: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _grad(self, xb: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _check(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        if xb.ndim != 2 or xb.shape[1] != self.dim:
            raise ShapeError(f"expected points of dimension {self.dim}, got shape {x.shape}")
        if not np.all(np.isfinite(xb)):
            raise ValueError("energy evaluated at a non-finite point")
        return xb, single

    def energy(self, x):
        xb, single = self._check(x)
        e = self._energy(xb)
        return float(e[0]) if single else e

    def grad_x(self, x) -> np.ndarray:
        xb, single = self._check(x)
        g = self._grad(xb)
        return g[0] if single else g

    def params(self) -> list[np.ndarray]:
        return []

    def with_params(self, params):
        if params:
            raise ShapeError(f"{type(self).__name__} has no parameters")
        return self

    def param_grad(self, xb: np.ndarray, weights: np.ndarray) -> list[np.ndarray]:
        """``sum_i weights[i] * dU(x_i)/dtheta`` for each parameter array."""
        return []


class ZeroEnergy(EnergyModel):
    def __init__(self, dim: int):
        self.dim = int(dim)

    def _energy(self, xb):
        return np.zeros(xb.shape[0])

    def _grad(self, xb):
        return np.zeros_like(xb)


class QuadraticEnergy(EnergyModel):
    """``U(x) = ||x - center||^2 / (2 scale^2)``; standard normal by default."""

    def __init__(self, dim: int, center=None, scale: float = 1.0):
        self.dim = int(dim)
        self.center = np.zeros(dim) if center is None else np.asarray(center, dtype=np.float64)
        self.scale = float(scale)
        self._prec = 1.0 / self.scale ** 2

    def _energy(self, xb):
        r = xb - self.center
        return 0.5 * self._prec * np.sum(r * r, axis=1)

    def _grad(self, xb):
        return self._prec * (xb - self.center)


class DoubleWellEnergy(EnergyModel):
    """``U(x) = sum_i (x_i^2 - 1)^2 / 4`` with minima at every ``x_i = +-1``."""

    def __init__(self, dim: int = 1):
        self.dim = int(dim)

    def _energy(self, xb):
        return 0.25 * np.sum((xb * xb - 1.0) ** 2, axis=1)

    def _grad(self, xb):
        return xb * (xb * xb - 1.0)


class GaussianMixtureEnergy(EnergyModel):
    """Negative log density of a Gaussian mixture (normalised, so ``Z = 1``)."""

    def __init__(self, weights: Sequence[float], means, covariances):
        w = np.asarray(weights, dtype=np.float64)
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be positive and sum to 1")
        mu = np.atleast_2d(np.asarray(means, dtype=np.float64))
        k, d = mu.shape
        cov = np.asarray(covariances, dtype=np.float64)
        if cov.ndim == 1:  # one isotropic variance per component
            cov = cov[:, None, None] * np.eye(d)[None]
        elif cov.ndim == 2:  # diagonal variances
            cov = np.stack([np.diag(c) for c in cov])
        if cov.shape != (k, d, d) or w.shape != (k,):
            raise ShapeError("mixture weights, means and covariances disagree in shape")
        self.dim = d
        self.weights, self.means, self.covariances = w, mu, cov
        self.precisions = np.linalg.inv(cov)
        _, logdet = np.linalg.slogdet(cov)
        self._log_norm = np.log(w) - 0.5 * (d * np.log(2 * np.pi) + logdet)

    def _component_logpdf(self, xb):
        r = xb[:, None, :] - self.means[None]                      # (n, k, d)
        pr = np.einsum("kij,nkj->nki", self.precisions, r)          # (n, k, d)
        return self._log_norm[None] - 0.5 * np.sum(r * pr, axis=2), pr

    def log_density(self, x):
        xb, single = self._check(x)
        lp, _ = self._component_logpdf(xb)
        out = logsumexp(lp, axis=1)
        return float(out[0]) if single else out

    def _energy(self, xb):
        lp, _ = self._component_logpdf(xb)
        return -logsumexp(lp, axis=1)

    def _grad(self, xb):
        lp, pr = self._component_logpdf(xb)
        resp = np.exp(lp - logsumexp(lp, axis=1, keepdims=True))
        return np.sum(resp[:, :, None] * pr, axis=1)

    def responsibilities(self, x) -> np.ndarray:
        xb, _ = self._check(x)
        lp, _ = self._component_logpdf(xb)
        return np.exp(lp - logsumexp(lp, axis=1, keepdims=True))


class MlpEnergy(EnergyModel):
    """Trainable energy given by a dense network with one output."""

    trainable = True

    def __init__(self, net: DenseNet):
        if net.out_dim != 1:
            raise ShapeError("an energy network must have a single output")
        self.net = net
        self.dim = net.in_dim

    def _energy(self, xb):
        return forward(self.net, xb)[:, 0]

    def _grad(self, xb):
        _, g = input_grad(self.net, xb, np.ones((xb.shape[0], 1)))
        return g

    def params(self):
        return self.net.params()

    def with_params(self, params):
        return MlpEnergy(self.net.with_params(params))

    def param_grad(self, xb, weights):
        seed = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
        return backward(self.net, xb, seed).param_grads


class CompositeEnergy(EnergyModel):
    """``active(x) + prior(x) + ||x||^2 / (2 sigma^2)`` with ``prior`` frozen."""

    def __init__(self, active: EnergyModel, prior: EnergyModel, sigma: float):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        if active.dim != prior.dim:
            raise ShapeError("active and prior energies have different dimensions")
        self.active, self.prior, self.sigma = active, prior, float(sigma)
        self.dim = active.dim
        self.trainable = active.trainable
        self._prec = 1.0 / self.sigma ** 2

    def gaussian_term(self, xb):
        return 0.5 * self._prec * np.sum(xb * xb, axis=1)

    def _energy(self, xb):
        return self.active._energy(xb) + self.prior._energy(xb) + self.gaussian_term(xb)

    def _grad(self, xb):
        return self.active._grad(xb) + self.prior._grad(xb) + self._prec * xb

    def params(self):
        return self.active.params()

    def with_params(self, params):
        return CompositeEnergy(self.active.with_params(params), self.prior, self.sigma)

    def param_grad(self, xb, weights):
        # the prior and the Gaussian term carry no trainable parameters
        return self.active.param_grad(xb, weights)


def energy(model: EnergyModel, x):
    return model.energy(x)


def energy_grad_x(model: EnergyModel, x):
    return model.grad_x(x)


def compose_with_prior(active: EnergyModel, prior: EnergyModel, sigma: float) -> CompositeEnergy:
    return CompositeEnergy(active, prior, sigma)


def mlp_energy(dim: int, hidden: Sequence[int], rng: np.random.Generator,
               activation: str = "tanh", scale: float = 1.0, out_scale: float | None = None) -> MlpEnergy:
    net = DenseNet.init([dim, *hidden, 1], rng, activation=activation, scale=scale, out_scale=out_scale)
    return MlpEnergy(net)
