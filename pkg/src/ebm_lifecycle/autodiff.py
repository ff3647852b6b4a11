"""Reverse-mode gradients for small dense feed-forward networks.

A :class:`DenseNet` is an immutable stack of affine layers, each followed by
an elementwise activation. :func:`backward` returns the gradient of
``out_seed . forward(net, x)`` with respect to every weight, every bias and
the input, which is what both the trainers (parameter gradients) and the
Langevin sampler (input gradients) need.

Inputs may be a single vector ``(d,)`` or a batch ``(n, d)``. For a batch the
seed has shape ``(n, out)`` and parameter gradients are summed over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

ACTIVATIONS = ("identity", "leaky_relu", "tanh")
BN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when array shapes do not line up with a network."""


class NumericOverflowError(FloatingPointError):
    """Raised when a computation produces inf or nan."""


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"
    slope: float = 0.2
    # standardize pre-activations over the batch (generator symmetry experiments)
    normalize: bool = False

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


class DenseNet:
    """Immutable dense network ``x -> act_L(W_L ... act_1(W_1 x + b_1) ... + b_L)``."""

    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise ShapeError("a network needs at least one layer")
        built = []
        prev = None
        for i, layer in enumerate(layers):
            w = _frozen(layer.weight)
            b = _frozen(layer.bias)
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if prev is not None and w.shape[1] != prev:
                raise ShapeError(f"layer {i} expects {w.shape[1]} inputs, previous layer gives {prev}")
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NumericOverflowError(f"layer {i} has non-finite parameters")
            built.append(Layer(w, b, layer.activation, float(layer.slope), bool(layer.normalize)))
            prev = w.shape[0]
        self.layers: tuple[Layer, ...] = tuple(built)

    @classmethod
    def init(
        cls,
        sizes: Sequence[int],
        rng: np.random.Generator,
        activation: str = "tanh",
        out_activation: str = "identity",
        slope: float = 0.2,
        scale: float = 1.0,
        out_scale: float | None = None,
        normalize_hidden: bool = False,
    ) -> "DenseNet":
        """Random network with ``N(0, scale^2 / fan_in)`` weights and zero biases."""
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        layers = []
        n = len(sizes) - 1
        for i in range(n):
            last = i == n - 1
            s = (out_scale if (last and out_scale is not None) else scale) / np.sqrt(sizes[i])
            layers.append(Layer(
                weight=rng.normal(0.0, s, size=(sizes[i + 1], sizes[i])),
                bias=np.zeros(sizes[i + 1]),
                activation=out_activation if last else activation,
                slope=slope,
                normalize=normalize_hidden and not last,
            ))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "DenseNet":
        if len(params) != 2 * len(self.layers):
            raise ShapeError(f"expected {2 * len(self.layers)} parameter arrays, got {len(params)}")
        layers = []
        for i, layer in enumerate(self.layers):
            w, b = np.asarray(params[2 * i]), np.asarray(params[2 * i + 1])
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ShapeError(f"layer {i}: parameter shapes changed")
            layers.append(Layer(w, b, layer.activation, layer.slope, layer.normalize))
        return DenseNet(layers)

    def __call__(self, x):
        return forward(self, x)

    def __eq__(self, other):
        if not isinstance(other, DenseNet) or len(self.layers) != len(other.layers):
            return NotImplemented if not isinstance(other, DenseNet) else False
        return all(
            a.activation == b.activation and a.slope == b.slope and a.normalize == b.normalize
            and np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)
            for a, b in zip(self.layers, other.layers)
        )

    __hash__ = None


@dataclass
class GradientBundle:
    param_grads: list[np.ndarray]
    input_grad: np.ndarray


def _as_batch(net: DenseNet, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != net.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match network input dimension {net.in_dim}")
    return xb, single


def _activate(layer: Layer, pre: np.ndarray) -> np.ndarray:
    if layer.activation == "tanh":
        return np.tanh(pre)
    if layer.activation == "leaky_relu":
        return np.where(pre >= 0.0, pre, layer.slope * pre)
    return pre


def _activation_grad(layer: Layer, pre: np.ndarray, post: np.ndarray):
    if layer.activation == "tanh":
        return 1.0 - post * post
    if layer.activation == "leaky_relu":
        # subgradient at 0 is the positive-side slope
        return np.where(pre >= 0.0, 1.0, layer.slope)
    return None


def _forward_cache(net: DenseNet, xb: np.ndarray):
    cache = []
    h = xb
    with np.errstate(over="ignore", invalid="ignore"):
        for layer in net.layers:
            pre = h @ layer.weight.T + layer.bias
            stats = None
            if layer.normalize:
                mu = pre.mean(axis=0)
                sd = np.sqrt(pre.var(axis=0) + BN_EPS)
                pre_n = (pre - mu) / sd
                stats = (pre_n, sd)
                pre = pre_n
            post = _activate(layer, pre)
            cache.append((h, pre, post, stats))
            h = post
    if not np.all(np.isfinite(h)):
        raise NumericOverflowError("non-finite value in forward pass")
    return h, cache


def forward(net: DenseNet, x) -> np.ndarray:
    """Evaluate the network on ``(d,)`` or ``(n, d)`` input."""
    xb, single = _as_batch(net, x)
    out, _ = _forward_cache(net, xb)
    return out[0] if single else out


def _backward_cache(net: DenseNet, cache, seed: np.ndarray, want_params: bool = True):
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))
    g = seed
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(len(net.layers) - 1, -1, -1):
            layer = net.layers[i]
            h, pre, post, stats = cache[i]
            da = _activation_grad(layer, pre, post)
            if da is not None:
                g = g * da
            if stats is not None:
                pre_n, sd = stats
                g = (g - g.mean(axis=0) - pre_n * (g * pre_n).mean(axis=0)) / sd
            if want_params:
                grads[2 * i] = g.T @ h
                grads[2 * i + 1] = g.sum(axis=0)
            g = g @ layer.weight
    if not np.all(np.isfinite(g)) or (want_params and not all(np.all(np.isfinite(p)) for p in grads)):
        raise NumericOverflowError("non-finite value in backward pass")
    return grads, g


def backward(net: DenseNet, x, out_seed) -> GradientBundle:
    """Gradients of ``sum(out_seed * forward(net, x))``.

    Parameter gradients are summed over the batch; the input gradient keeps
    the shape of ``x``.
    """
    xb, single = _as_batch(net, x)
    seed = np.asarray(out_seed, dtype=np.float64)
    seed_b = seed[None, :] if single else seed
    if seed_b.shape != (xb.shape[0], net.out_dim):
        raise ShapeError(f"seed shape {seed.shape} does not match output shape {(xb.shape[0], net.out_dim)}")
    _, cache = _forward_cache(net, xb)
    grads, gx = _backward_cache(net, cache, seed_b)
    return GradientBundle(grads, gx[0] if single else gx)


def input_grad(net: DenseNet, xb: np.ndarray, seed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward output and input gradient for a batch, skipping parameter gradients."""
    out, cache = _forward_cache(net, xb)
    _, gx = _backward_cache(net, cache, seed, want_params=False)
    return out, gx


def finite_diff_check(net: DenseNet, x, h: float = 1e-5, out_seed=None) -> float:
    """Largest relative disagreement between :func:`backward` and central differences.

    The error for each parameter and input coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)`` where
    ``floor`` is ``1e-3`` times the largest analytic magnitude over all
    parameters and inputs (and never below ``1e-12``). Coordinates whose true
    gradient is exactly zero, such as a bias feeding a normalization,
    otherwise turn roundoff into huge ratios.
    """
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    xb, single = _as_batch(net, x)
    if out_seed is None:
        out_seed = np.ones((xb.shape[0], net.out_dim))
    seed = np.asarray(out_seed, dtype=np.float64).reshape(xb.shape[0], net.out_dim)

    def objective(n, xx):
        return float(np.sum(seed * forward(n, xx)))

    bundle = backward(net, xb, seed)
    def rel(a, num, floor):
        return abs(a - num) / max(abs(a), abs(num), floor)

    scale = max(float(np.max(np.abs(g), initial=0.0)) for g in [*bundle.param_grads, bundle.input_grad])
    fl = max(1e-3 * scale, 1e-12)
    worst = 0.0
    params = [p.copy() for p in net.params()]
    for k, p in enumerate(params):
        flat = p.reshape(-1)
        gk = bundle.param_grads[k].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = objective(net.with_params(params), xb)
            flat[j] = orig - h
            fm = objective(net.with_params(params), xb)
            flat[j] = orig
            num = (fp - fm) / (2 * h)
            worst = max(worst, rel(gk[j], num, fl))
    xf = xb.copy().reshape(-1)
    gx = bundle.input_grad.reshape(-1)
    for j in range(xf.size):
        orig = xf[j]
        xf[j] = orig + h
        fp = objective(net, xf.reshape(xb.shape))
        xf[j] = orig - h
        fm = objective(net, xf.reshape(xb.shape))
        xf[j] = orig
        num = (fp - fm) / (2 * h)
        worst = max(worst, rel(gx[j], num, fl))
    return worst
