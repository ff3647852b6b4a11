"""Latent-to-sample generator and the cooperative reconstruction loss.

The generator is trained to reproduce the Langevin-refined states paired
with its latents. Latents and targets are treated as constants
(straight-through latent inference), so only generator weights get
gradients.
"""
from __future__ import annotations

import numpy as np

from .autodiff import DenseNet, ShapeError, backward, forward


class Generator:
    """``g(z; phi)`` with a standard-normal latent prior."""

    def __init__(self, net: DenseNet):
        self.net = net
        self.latent_dim = net.in_dim
        self.out_dim = net.out_dim

    @classmethod
    def init(cls, latent_dim: int, out_dim: int, hidden, rng, activation: str = "leaky_relu",
             scale: float = 1.0, out_scale: float | None = None, normalize: bool = False) -> "Generator":
        net = DenseNet.init([latent_dim, *hidden, out_dim], rng, activation=activation,
                            scale=scale, out_scale=out_scale, normalize_hidden=normalize)
        return cls(net)

    @classmethod
    def affine(cls, weight, bias) -> "Generator":
        from .autodiff import Layer
        return cls(DenseNet([Layer(np.asarray(weight, float), np.asarray(bias, float))]))

    def generate(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if not np.all(np.isfinite(z)):
            raise ValueError("latents must be finite")
        return forward(self.net, z)

    def params(self):
        return self.net.params()

    def with_params(self, params) -> "Generator":
        return Generator(self.net.with_params(params))


def generate(gen: Generator, z) -> np.ndarray:
    return gen.generate(z)


def _aligned(gen, z, target):
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if z.shape[0] != target.shape[0]:
        raise ShapeError(f"latent batch {z.shape[0]} and target batch {target.shape[0]} differ")
    if target.shape[1] != gen.out_dim:
        raise ShapeError("target dimension does not match generator output")
    return z, target


def cooperative_loss(gen: Generator, z_batch, target_batch) -> float:
    """Batch mean of ``||g(z_i) - target_i||^2``."""
    z, t = _aligned(gen, z_batch, target_batch)
    r = forward(gen.net, z) - t
    return float(np.mean(np.sum(r * r, axis=1)))


def cooperative_grad(gen: Generator, z_batch, target_batch) -> list[np.ndarray]:
    """Gradient of :func:`cooperative_loss` with respect to the generator weights only."""
    z, t = _aligned(gen, z_batch, target_batch)
    r = forward(gen.net, z) - t
    return backward(gen.net, z, 2.0 * r / z.shape[0]).param_grads
