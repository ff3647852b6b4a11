"""Unadjusted Langevin transitions.

One step maps ``x`` to ``x - (eta^2 / 2) * T * grad U(x) + eta * z`` with
``z ~ N(0, I)``. There is no clamping: keeping chains bounded is the job of
the energy (see :class:`~ebm_lifecycle.energy.CompositeEnergy`).

Noise for chain ``b`` at step ``k`` is a hash of ``(stream, chain_ids[b], k)``,
so a trajectory is fixed by its stream and chain id alone. Permuting the
batch together with its ids permutes the results and nothing else.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import NumericOverflowError
from .energy import EnergyModel
from .rng import Stream

NOISE_CHUNK = 256


@dataclass(frozen=True)
class LangevinConfig:
    step_size: float
    num_steps: int
    temperature: float = 1.0
    record_every: int = 0
    stream: Stream = field(default_factory=Stream)
    # test hook: drop the noise term to check the drift in isolation
    noise: bool = True

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("Langevin step size must be positive")
        if self.num_steps < 0 or self.record_every < 0:
            raise ValueError("num_steps and record_every must be non-negative")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    def with_stream(self, stream: Stream) -> "LangevinConfig":
        return replace(self, stream=stream)


@dataclass
class Trajectory:
    final_state: np.ndarray
    recorded_states: np.ndarray    # (R, B, d)
    recorded_energies: np.ndarray  # (R, B)
    recorded_steps: np.ndarray     # (R,)
    steps_taken: int


def langevin_step(model: EnergyModel, x, step_size: float, temperature: float = 1.0,
                  rng: np.random.Generator | None = None, noise=None) -> np.ndarray:
    """A single Langevin update of ``x`` (one point or a batch).

    ``noise`` overrides the Gaussian draw; pass zeros to get the drift only.
    """
    x = np.asarray(x, dtype=np.float64)
    if noise is None:
        if rng is None:
            raise ValueError("langevin_step needs either rng or an explicit noise array")
        noise = rng.standard_normal(x.shape)
    with np.errstate(over="ignore", invalid="ignore"):
        out = x - 0.5 * step_size ** 2 * temperature * model.grad_x(x) + step_size * np.asarray(noise)
    if not np.all(np.isfinite(out)):
        bad = np.flatnonzero(~np.all(np.isfinite(np.atleast_2d(out)), axis=1))
        raise NumericOverflowError(f"Langevin step produced non-finite state in chain(s) {bad.tolist()}")
    return out


def langevin_run(model: EnergyModel, x0, cfg: LangevinConfig, chain_ids=None,
                 start_step: int = 0) -> Trajectory:
    """Run ``cfg.num_steps`` Langevin steps on every chain of ``x0`` (shape ``(B, d)``).

    ``chain_ids`` default to ``0..B-1``; trainers pass bank slot ids so noise
    follows the slot. ``start_step`` offsets the noise counter, which lets a
    long run be split into segments without reusing noise.
    With ``record_every = r > 0`` the states at steps ``0, r, 2r, ...`` and
    the final state are recorded; with ``r = 0`` only the endpoints are.
    """
    x = np.array(x0, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("langevin_run expects a non-empty (B, d) batch")
    if x.shape[1] != model.dim:
        raise ValueError(f"state dimension {x.shape[1]} does not match energy dimension {model.dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("initial states must be finite")
    b, d = x.shape
    ids = np.arange(b) if chain_ids is None else np.asarray(chain_ids)
    if ids.shape != (b,):
        raise ValueError("chain_ids must have one entry per chain")
    keys = cfg.stream.chain_keys(ids)
    k_total = cfg.num_steps
    drift = 0.5 * cfg.step_size ** 2 * cfg.temperature
    every = cfg.record_every

    rec_states, rec_steps = [x.copy()], [0]
    k = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while k < k_total:
            n = min(NOISE_CHUNK, k_total - k)
            if cfg.noise:
                z = cfg.stream.normals(keys, start_step + k, n, d)
                z *= cfg.step_size
            for i in range(n):
                g = model._grad(x)
                x = x - drift * g
                if cfg.noise:
                    x += z[i]
                if every and (k + i + 1) % every == 0 and k + i + 1 < k_total:
                    rec_states.append(x.copy())
                    rec_steps.append(k + i + 1)
            k += n
            bad = ~np.all(np.isfinite(x), axis=1)
            if bad.any():
                raise NumericOverflowError(
                    f"Langevin chain(s) {ids[bad].tolist()} became non-finite by step {k}")
    if k_total > 0:
        rec_states.append(x.copy())
        rec_steps.append(k_total)
    states = np.stack(rec_states)
    energies = np.stack([model._energy(s) for s in states])
    return Trajectory(
        final_state=x,
        recorded_states=states,
        recorded_energies=energies,
        recorded_steps=np.asarray(rec_steps),
        steps_taken=k_total,
    )


def run_chains(model: EnergyModel, x0, cfg: LangevinConfig, chain_ids=None, start_step: int = 0) -> np.ndarray:
    """Final states only; skips the energy bookkeeping of :func:`langevin_run`."""
    return langevin_run(model, x0, replace(cfg, record_every=0), chain_ids, start_step).final_state
