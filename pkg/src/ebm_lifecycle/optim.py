"""Adam, step-wise learning-rate schedules, gradient clipping, data noise."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import ShapeError

DEFAULT_ANNEAL = ((1e-4, 0), (1e-5, 50000), (1e-6, 75000), (1e-7, 100000), (1e-8, 125000))


@dataclass
class OptimizerState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kw) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)

    def state_dict(self, prefix: str) -> dict:
        out = {f"{prefix}.t": np.array([self.t], dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}.m{i}"] = m
            out[f"{prefix}.v{i}"] = v
        return out

    def load_state_dict(self, arrays: dict, prefix: str):
        self.t = int(arrays[f"{prefix}.t"][0])
        self.m = [np.array(arrays[f"{prefix}.m{i}"]) for i in range(len(self.m))]
        self.v = [np.array(arrays[f"{prefix}.v{i}"]) for i in range(len(self.v))]


def adam_step(opt: OptimizerState, params, grads, lr: float) -> list[np.ndarray]:
    """Bias-corrected Adam; updates ``opt`` in place and returns new parameters."""
    if len(params) != len(grads) or len(params) != len(opt.m):
        raise ShapeError("parameter, gradient and moment lists differ in length")
    for p, g, m in zip(params, grads, opt.m):
        if np.shape(p) != np.shape(g) or np.shape(p) != np.shape(m):
            raise ShapeError(f"shape mismatch in Adam step: {np.shape(p)} vs {np.shape(g)}")
    opt.t += 1
    b1, b2 = opt.beta1, opt.beta2
    c1, c2 = 1.0 - b1 ** opt.t, 1.0 - b2 ** opt.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        opt.m[i] = b1 * opt.m[i] + (1.0 - b1) * g
        opt.v[i] = b2 * opt.v[i] + (1.0 - b2) * g * g
        out.append(p - lr * (opt.m[i] / c1) / (np.sqrt(opt.v[i] / c2) + opt.eps))
    return out


@dataclass(frozen=True)
class AnnealSchedule:
    """Piecewise-constant rates as ``(rate, first_step)`` pairs."""

    pairs: tuple = field(default=DEFAULT_ANNEAL)

    def __post_init__(self):
        pairs = tuple((float(r), int(s)) for r, s in self.pairs)
        if not pairs:
            raise ValueError("schedule needs at least one (rate, step) pair")
        steps = [s for _, s in pairs]
        if steps[0] != 0:
            raise ValueError("schedule must start at step 0")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("schedule steps must be strictly increasing")
        if any(r <= 0 for r, _ in pairs):
            raise ValueError("schedule rates must be positive")
        object.__setattr__(self, "pairs", pairs)

    @classmethod
    def constant(cls, rate: float) -> "AnnealSchedule":
        return cls(((rate, 0),))

    def time_scaled(self, factor: float) -> "AnnealSchedule":
        """Same rates with every boundary step multiplied by ``factor``."""
        return AnnealSchedule(tuple((r, int(round(s * factor))) for r, s in self.pairs))

    def __call__(self, step: int) -> float:
        return lr_at(self, step)


def lr_at(schedule: AnnealSchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    rate = schedule.pairs[0][0]
    for r, s in schedule.pairs:
        if s <= step:
            rate = r
        else:
            break
    return rate


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_gradients(grads, max_norm: float) -> list[np.ndarray]:
    if max_norm < 0:
        raise ValueError("max_norm must be non-negative")
    if max_norm == 0:
        return list(grads)
    n = global_norm(grads)
    if n > max_norm:
        return [g * (max_norm / n) for g in grads]
    return list(grads)


def add_data_noise(batch, data_epsilon: float, rng: np.random.Generator) -> np.ndarray:
    if data_epsilon < 0:
        raise ValueError("data_epsilon must be non-negative")
    batch = np.asarray(batch, dtype=np.float64)
    if data_epsilon == 0:
        return batch.copy()
    return batch + data_epsilon * rng.standard_normal(batch.shape)
