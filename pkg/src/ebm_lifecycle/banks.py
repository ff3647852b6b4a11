"""Persistent sample banks and rejuvenation sources.

Three structures are provided:

* :class:`PersistentBank` - a fixed pool of chain states with per-slot
  lifetimes (Langevin steps since the slot was last rejuvenated).
* :class:`PairedBank` - latent and image pools that are drawn, returned and
  rejuvenated together, plus a count of update rounds per pair.
* :class:`DualBank` - a burn-in pool whose states are promoted into an
  update pool only after ``threshold`` rounds of Langevin updates.

Banks are plain mutable containers owned by one training loop. Draws are
uniform without replacement within a batch, because returned states
overwrite their slots by index.
"""
from __future__ import annotations

import numpy as np

# provenance codes
INITIAL = 0
REJUVENATED = 1


class BankInvariantError(RuntimeError):
    pass


# --- rejuvenation sources ---------------------------------------------------

class NoiseSource:
    """Gaussian (``mean``, ``std``) or, when ``low``/``high`` are set, uniform noise."""

    def __init__(self, dim: int, mean: float = 0.0, std: float = 1.0, low=None, high=None):
        self.dim, self.mean, self.std, self.low, self.high = dim, mean, std, low, high

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.low is not None:
            return rng.uniform(self.low, self.high, size=(n, self.dim))
        return self.mean + self.std * rng.standard_normal((n, self.dim))


class DataSource:
    def __init__(self, dataset):
        self.dataset = dataset
        self.dim = dataset.dim

    def draw(self, n, rng):
        return self.dataset.sample(n, rng)


class GeneratorSource:
    """Latents from ``N(0, I)`` pushed through a generator."""

    def __init__(self, generator):
        self.generator = generator
        self.dim = generator.out_dim
        self.latent_dim = generator.latent_dim

    def draw_latents(self, n, rng):
        return rng.standard_normal((n, self.latent_dim))

    def draw(self, n, rng):
        return self.generator.generate(self.draw_latents(n, rng))


# --- banks ------------------------------------------------------------------

def _choose(capacity: int, batch_size: int, rng) -> np.ndarray:
    if batch_size > capacity:
        raise ValueError(f"batch of {batch_size} requested from a bank of {capacity}")
    if batch_size <= 0:
        raise ValueError("batch size must be positive")
    return rng.choice(capacity, size=batch_size, replace=False)


def _check_indices(capacity: int, indices) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or np.any(idx < 0) or np.any(idx >= capacity):
        raise IndexError("bank index out of range")
    return idx


class PersistentBank:
    """Pool of ``N`` chain states with lifetimes measured in Langevin steps."""

    def __init__(self, states: np.ndarray, bank_id: int = 0):
        self.states = np.array(states, dtype=np.float64)
        n = self.states.shape[0]
        self.lifetimes = np.zeros(n, dtype=np.int64)
        self.provenance = np.full(n, INITIAL, dtype=np.int8)
        self.bank_id = bank_id
        self.rejuvenation_lifetimes: list[int] = []

    @classmethod
    def from_source(cls, n: int, source, rng, bank_id: int = 0) -> "PersistentBank":
        return cls(source.draw(n, rng), bank_id=bank_id)

    @property
    def capacity(self) -> int:
        return self.states.shape[0]

    def chain_ids(self, indices) -> np.ndarray:
        return (np.int64(self.bank_id) << 32) + np.asarray(indices, dtype=np.int64)

    def draw(self, batch_size: int, rng):
        idx = _choose(self.capacity, batch_size, rng)
        return idx, self.states[idx].copy()

    def put_back(self, indices, states, steps_added: int = 0):
        idx = _check_indices(self.capacity, indices)
        states = np.asarray(states, dtype=np.float64)
        if states.shape != (idx.size, self.states.shape[1]):
            raise ValueError(f"returned batch shape {states.shape} does not match {idx.size} indices")
        self.states[idx] = states
        self.lifetimes[idx] += int(steps_added)

    def _select(self, idx, p, rng):
        if not 0.0 <= p <= 1.0:
            raise ValueError("rejuvenation probability must lie in [0, 1]")
        return rng.random(idx.size) < p

    def rejuvenate(self, indices, source, p: float, rng) -> int:
        idx = _check_indices(self.capacity, indices)
        hit = idx[self._select(idx, p, rng)]
        if hit.size:
            self.rejuvenation_lifetimes.extend(self.lifetimes[hit].tolist())
            self.states[hit] = source.draw(hit.size, rng)
            self.lifetimes[hit] = 0
            self.provenance[hit] = REJUVENATED
        return int(hit.size)

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.states": self.states,
            f"{prefix}.lifetimes": self.lifetimes,
            f"{prefix}.provenance": self.provenance,
            f"{prefix}.rejuvenation_lifetimes": np.asarray(self.rejuvenation_lifetimes, dtype=np.int64),
        }

    def load_state_dict(self, arrays: dict, prefix: str):
        self.states = np.array(arrays[f"{prefix}.states"], dtype=np.float64)
        self.lifetimes = np.asarray(arrays[f"{prefix}.lifetimes"]).astype(np.int64)
        self.provenance = np.asarray(arrays[f"{prefix}.provenance"]).astype(np.int8)
        self.rejuvenation_lifetimes = np.asarray(arrays[f"{prefix}.rejuvenation_lifetimes"]).astype(np.int64).tolist()


class PairedBank:
    """Latent/image pairs that always move together.

    ``update_rounds[i]`` counts how many times the image in slot ``i`` has
    been returned since its pair was last generated.
    """

    def __init__(self, latents: np.ndarray, images: np.ndarray, bank_id: int = 0):
        self.latents = np.array(latents, dtype=np.float64)
        self.images = np.array(images, dtype=np.float64)
        if self.latents.shape[0] != self.images.shape[0]:
            raise ValueError("latent and image banks must have the same size")
        n = self.images.shape[0]
        self.update_rounds = np.zeros(n, dtype=np.int64)
        self.lifetimes = np.zeros(n, dtype=np.int64)
        self.bank_id = bank_id
        self.rejuvenation_lifetimes: list[int] = []
        # latent that produced the current image lineage; checked by tests
        self.origin_latents = self.latents.copy()

    @classmethod
    def from_generator(cls, n: int, source: GeneratorSource, rng, bank_id: int = 0) -> "PairedBank":
        z = source.draw_latents(n, rng)
        return cls(z, source.generator.generate(z), bank_id=bank_id)

    @property
    def capacity(self) -> int:
        return self.images.shape[0]

    def chain_ids(self, indices) -> np.ndarray:
        return (np.int64(self.bank_id) << 32) + np.asarray(indices, dtype=np.int64)

    def draw(self, batch_size: int, rng):
        idx = _choose(self.capacity, batch_size, rng)
        return idx, (self.latents[idx].copy(), self.images[idx].copy())

    def put_back(self, indices, states, steps_added: int = 0):
        idx = _check_indices(self.capacity, indices)
        latents, images = states
        latents = np.asarray(latents, dtype=np.float64)
        images = np.asarray(images, dtype=np.float64)
        if images.shape != (idx.size, self.images.shape[1]) or latents.shape != (idx.size, self.latents.shape[1]):
            raise ValueError("returned batch does not match the drawn indices")
        self.latents[idx] = latents
        self.images[idx] = images
        self.lifetimes[idx] += int(steps_added)
        self.update_rounds[idx] += 1

    def rejuvenate(self, indices, source: GeneratorSource, p: float, rng, max_rounds: int = 0) -> int:
        """Regenerate pairs with probability ``p``; pairs with ``update_rounds >= max_rounds``
        (when ``max_rounds > 0``) are regenerated unconditionally."""
        idx = _check_indices(self.capacity, indices)
        if not 0.0 <= p <= 1.0:
            raise ValueError("rejuvenation probability must lie in [0, 1]")
        forced = (self.update_rounds[idx] >= max_rounds) if max_rounds > 0 else np.zeros(idx.size, bool)
        coin = rng.random(idx.size) < p
        hit = idx[forced | coin]
        if hit.size:
            self.rejuvenation_lifetimes.extend(self.lifetimes[hit].tolist())
            z = source.draw_latents(hit.size, rng)
            self.latents[hit] = z
            self.images[hit] = source.generator.generate(z)
            self.origin_latents[hit] = z
            self.update_rounds[hit] = 0
            self.lifetimes[hit] = 0
        return int(hit.size)

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.latents": self.latents,
            f"{prefix}.images": self.images,
            f"{prefix}.update_rounds": self.update_rounds,
            f"{prefix}.lifetimes": self.lifetimes,
            f"{prefix}.origin_latents": self.origin_latents,
            f"{prefix}.rejuvenation_lifetimes": np.asarray(self.rejuvenation_lifetimes, dtype=np.int64),
        }

    def load_state_dict(self, arrays: dict, prefix: str):
        self.latents = np.array(arrays[f"{prefix}.latents"], dtype=np.float64)
        self.images = np.array(arrays[f"{prefix}.images"], dtype=np.float64)
        self.update_rounds = np.asarray(arrays[f"{prefix}.update_rounds"]).astype(np.int64)
        self.lifetimes = np.asarray(arrays[f"{prefix}.lifetimes"]).astype(np.int64)
        self.origin_latents = np.array(arrays[f"{prefix}.origin_latents"], dtype=np.float64)
        self.rejuvenation_lifetimes = np.asarray(arrays[f"{prefix}.rejuvenation_lifetimes"]).astype(np.int64).tolist()


class DualBank:
    """Burn-in pool feeding an update pool once states have aged ``threshold`` rounds.

    ``steps_per_round`` is the Langevin step count of one round; it is used
    only to verify that promoted states carry at least
    ``threshold * steps_per_round`` lifetime steps.
    """

    def __init__(self, burn_in: PersistentBank, update: PersistentBank, threshold: int,
                 counts=None, steps_per_round: int = 0):
        if threshold <= 0:
            raise ValueError("promotion threshold must be a positive integer")
        self.burn_in, self.update, self.threshold = burn_in, update, int(threshold)
        self.counts = (np.zeros(burn_in.capacity, dtype=np.int64) if counts is None
                       else np.asarray(counts, dtype=np.int64).copy())
        self.steps_per_round = int(steps_per_round)
        self.promotions = 0

    @classmethod
    def from_source(cls, n_burn_in: int, n_update: int, threshold: int, source, rng,
                    steps_per_round: int = 0) -> "DualBank":
        burn = PersistentBank.from_source(n_burn_in, source, rng, bank_id=1)
        upd = PersistentBank.from_source(n_update, source, rng, bank_id=2)
        # staggered start so promotions flow evenly from the first rounds
        counts = rng.integers(0, threshold + 1, size=n_burn_in)
        return cls(burn, upd, threshold, counts, steps_per_round)

    def record_round(self, indices):
        idx = _check_indices(self.burn_in.capacity, indices)
        self.counts[idx] += 1

    def promote(self, indices, source, rng) -> int:
        idx = _check_indices(self.burn_in.capacity, indices)
        ready = idx[self.counts[idx] >= self.threshold]
        if ready.size == 0:
            return 0
        gate = self.threshold * self.steps_per_round
        targets = rng.integers(0, self.update.capacity, size=ready.size)
        for src, dst in zip(ready, targets):
            if self.burn_in.provenance[src] == REJUVENATED and self.burn_in.lifetimes[src] < gate:
                raise BankInvariantError(
                    f"burn-in slot {src} promoted after {self.burn_in.lifetimes[src]} steps (< {gate})")
            self.update.states[dst] = self.burn_in.states[src]
            self.update.lifetimes[dst] = self.burn_in.lifetimes[src]
            self.update.provenance[dst] = self.burn_in.provenance[src]
        self.burn_in.rejuvenation_lifetimes.extend(self.burn_in.lifetimes[ready].tolist())
        self.burn_in.states[ready] = source.draw(ready.size, rng)
        self.burn_in.lifetimes[ready] = 0
        self.burn_in.provenance[ready] = REJUVENATED
        self.counts[ready] = 0
        self.promotions += int(ready.size)
        return int(ready.size)

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.counts": self.counts, f"{prefix}.promotions": np.array([self.promotions])}
        out.update(self.burn_in.state_dict(f"{prefix}.burn_in"))
        out.update(self.update.state_dict(f"{prefix}.update"))
        return out

    def load_state_dict(self, arrays: dict, prefix: str):
        self.counts = np.asarray(arrays[f"{prefix}.counts"]).astype(np.int64)
        self.promotions = int(np.asarray(arrays[f"{prefix}.promotions"])[0])
        self.burn_in.load_state_dict(arrays, f"{prefix}.burn_in")
        self.update.load_state_dict(arrays, f"{prefix}.update")


# functional aliases --------------------------------------------------------

def draw_batch(bank, batch_size: int, rng):
    return bank.draw(batch_size, rng)


def return_batch(bank, indices, states, steps_added: int = 0):
    bank.put_back(indices, states, steps_added)


def rejuvenate(bank, indices, source, p: float, rng, max_rounds: int = 0) -> int:
    if isinstance(bank, PairedBank):
        return bank.rejuvenate(indices, source, p, rng, max_rounds)
    return bank.rejuvenate(indices, source, p, rng)


def promote(dual: DualBank, batch_indices, source, rng) -> int:
    return dual.promote(batch_indices, source, rng)
