"""Maximum-likelihood training loops for the three trajectory regimes.

* shortrun: cooperative-persistent hybrid. A paired latent/sample bank is
  drawn, refined by ``K`` Langevin steps, and used to update both the EBM and
  the generator; pairs are regenerated with probability ``p`` or after ``w``
  update rounds.
* midrun: persistent bank rejuvenated from a frozen generator with
  probability ``p``; the learning rate follows an annealing schedule.
* longrun: burn-in bank feeding an update bank after ``D`` rounds; only
  update-bank states produce gradients, and the sampled energy includes a
  frozen prior EBM and a Gaussian term.

All randomness for iteration ``t`` comes from ``stream.child(purpose, t)``
and Langevin noise is keyed by bank slot, so the whole trainer state is its
arrays plus the step counter. That is what makes checkpoint resume bit-exact.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from .autodiff import NumericOverflowError, ShapeError
from .banks import DualBank, GeneratorSource, PairedBank, PersistentBank
from .energy import CompositeEnergy, EnergyModel, mlp_energy
from .generator import Generator, cooperative_grad
from .langevin import LangevinConfig, langevin_run
from .metrics import batch_diversity
from .optim import (DEFAULT_ANNEAL, AnnealSchedule, OptimizerState, adam_step, add_data_noise,
                    clip_gradients, global_norm, lr_at)
from .rng import Stream

REGIMES = ("shortrun", "midrun", "longrun")

METRIC_COLUMNS = ("step", "lr", "mean_pos_energy", "mean_neg_energy", "grad_norm", "diversity",
                  "rejuvenation_count", "promotion_count", "wall_ms")

# Full-scale defaults per regime. Toy runs override most of these.
REGIME_DEFAULTS = {
    "shortrun": dict(mcmc_steps=100, step_size=5e-3, temperature=1e-4, rejuv_prob=0.5,
                     max_update_rounds=2, bank_size=10000, data_epsilon=1e-2, grad_clip=0.0,
                     lr_schedule=((1e-4, 0),), generator_lr=1e-4, total_steps=100000),
    "midrun": dict(mcmc_steps=100, step_size=1e-2, temperature=1e-4, rejuv_prob=0.025,
                   bank_size=20000, data_epsilon=2e-2, lr_schedule=DEFAULT_ANNEAL, total_steps=150000),
    "longrun": dict(mcmc_steps=100, step_size=1e-2, temperature=1e-4, burn_in_threshold=750,
                    bank_size=10000, burn_in_bank_size=1000, data_epsilon=2e-2, prior_sigma=0.15,
                    lr_schedule=DEFAULT_ANNEAL, total_steps=250000),
}


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "shortrun"
    batch_size: int = 64
    mcmc_steps: int = 100
    step_size: float = 5e-3
    temperature: float = 1e-4
    rejuv_prob: float = 0.5
    max_update_rounds: int = 2
    bank_size: int = 10000
    burn_in_bank_size: int = 1000
    burn_in_threshold: int = 750
    data_epsilon: float = 1e-2
    grad_clip: float = 0.0
    total_steps: int = 0
    lr_schedule: tuple = ((1e-4, 0),)
    generator_lr: float = 1e-4
    prior_sigma: float = 0.15
    ebm_hidden: tuple = (32, 32)
    ebm_activation: str = "tanh"
    ebm_out_scale: float = 0.1
    generator_hidden: tuple = (32, 32)
    latent_dim: int = 0          # 0 means "same as the data"
    metrics_every: int = 1
    seed: int = 0

    def __post_init__(self):
        errs = self.problems()
        if errs:
            raise ValueError("; ".join(errs))
        object.__setattr__(self, "lr_schedule", AnnealSchedule(self.lr_schedule).pairs)
        object.__setattr__(self, "ebm_hidden", tuple(int(h) for h in self.ebm_hidden))
        object.__setattr__(self, "generator_hidden", tuple(int(h) for h in self.generator_hidden))

    def problems(self) -> list[str]:
        out = []
        if self.regime not in REGIMES:
            out.append(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if not 0.0 <= self.rejuv_prob <= 1.0:
            out.append(f"rejuv_prob={self.rejuv_prob} outside [0, 1]")
        for name in ("batch_size", "bank_size", "burn_in_bank_size", "burn_in_threshold", "metrics_every"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be at least 1")
        for name in ("mcmc_steps", "total_steps", "max_update_rounds", "latent_dim"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be non-negative")
        for name in ("step_size", "temperature", "prior_sigma", "generator_lr"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be positive")
        for name in ("data_epsilon", "grad_clip"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be non-negative")
        if self.batch_size > self.bank_size:
            out.append("batch_size exceeds bank_size")
        if self.regime == "longrun" and self.batch_size > self.burn_in_bank_size:
            out.append("batch_size exceeds burn_in_bank_size")
        try:
            AnnealSchedule(self.lr_schedule)
        except (ValueError, TypeError) as e:
            out.append(f"lr_schedule: {e}")
        return out

    @classmethod
    def for_regime(cls, regime: str, **overrides) -> "TrainConfig":
        if regime not in REGIME_DEFAULTS:
            raise ValueError(f"unknown regime {regime!r}")
        return cls(regime=regime, **{**REGIME_DEFAULTS[regime], **overrides})

    @property
    def schedule(self) -> AnnealSchedule:
        return AnnealSchedule(self.lr_schedule)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_schedule"] = [list(p) for p in self.lr_schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        if "lr_schedule" in kw:
            kw["lr_schedule"] = tuple(tuple(p) for p in kw["lr_schedule"])
        for k in ("ebm_hidden", "generator_hidden"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)


def ml_gradient(model: EnergyModel, pos_batch, neg_batch) -> list[np.ndarray]:
    """Mean parameter gradient of ``U`` on positives minus that on negatives."""
    pos = np.atleast_2d(np.asarray(pos_batch, dtype=np.float64))
    neg = np.atleast_2d(np.asarray(neg_batch, dtype=np.float64))
    if pos.shape[0] == 0 or neg.shape[0] == 0:
        raise ValueError("ml_gradient needs non-empty batches")
    if pos.shape[0] != neg.shape[0]:
        raise ShapeError(f"positive batch {pos.shape[0]} and negative batch {neg.shape[0]} differ")
    n = pos.shape[0]
    w = np.full(n, 1.0 / n)
    gp = model.param_grad(pos, w)
    gn = model.param_grad(neg, w)
    return [a - b for a, b in zip(gp, gn)]


class _DataFeed:
    """Positive batches: a finite array sampled with replacement, or a sampler."""

    def __init__(self, dataset):
        if isinstance(dataset, np.ndarray):
            self.array = np.atleast_2d(dataset.astype(np.float64))
            self.dim = self.array.shape[1]
        else:
            self.array = None
            self.dataset = dataset
            self.dim = dataset.dim

    def batch(self, n, rng):
        if self.array is not None:
            return self.array[rng.integers(0, self.array.shape[0], size=n)]
        return self.dataset.sample(n, rng)


class _Trainer:
    regime = ""

    def __init__(self, cfg: TrainConfig, dataset, stream, ebm: EnergyModel | None = None,
                 record_events: bool = False):
        if cfg.regime != self.regime:
            raise ValueError(f"{type(self).__name__} needs regime={self.regime!r}, got {cfg.regime!r}")
        self.cfg = cfg
        self.data = _DataFeed(dataset)
        self.stream = stream if isinstance(stream, Stream) else Stream(int(stream))
        init_rng = self.stream.child("init").generator()
        if ebm is None:
            ebm = mlp_energy(self.data.dim, cfg.ebm_hidden, init_rng, activation=cfg.ebm_activation,
                             out_scale=cfg.ebm_out_scale)
        self.ebm = ebm
        self.opt = OptimizerState.zeros_like(ebm.params())
        self.step_count = 0
        self.metrics: list[dict] = []
        self.events: list[tuple] | None = [] if record_events else None
        self._init_banks(init_rng)

    # -- hooks -----------------------------------------------------------
    def _init_banks(self, rng):
        raise NotImplementedError

    def _iterate(self, t: int) -> dict:
        raise NotImplementedError

    def bank_state(self) -> dict:
        raise NotImplementedError

    def load_bank_state(self, arrays: dict):
        raise NotImplementedError

    # -- shared pieces -----------------------------------------------------
    def _event(self, t, name, **detail):
        if self.events is not None:
            self.events.append((t, name, detail))

    def _rng(self, purpose, t):
        return self.stream.child(purpose, t).generator()

    def _positives(self, t):
        rng = self._rng("data", t)
        x = self.data.batch(self.cfg.batch_size, rng)
        return add_data_noise(x, self.cfg.data_epsilon, rng)

    def _sampling_energy(self) -> EnergyModel:
        return self.ebm

    def _langevin(self, t, x, chain_ids):
        cfg = LangevinConfig(self.cfg.step_size, self.cfg.mcmc_steps, self.cfg.temperature,
                             stream=self.stream.child("langevin", t))
        try:
            return langevin_run(self._sampling_energy(), x, cfg, chain_ids=chain_ids).final_state
        except NumericOverflowError as e:
            raise NumericOverflowError(f"training step {t}: {e}") from None

    def _ebm_update(self, t, pos, neg):
        grads = ml_gradient(self.ebm, pos, neg)
        gnorm = global_norm(grads)
        if not np.isfinite(gnorm):
            raise NumericOverflowError(f"training step {t}: non-finite EBM gradient")
        grads = clip_gradients(grads, self.cfg.grad_clip)
        lr = lr_at(self.cfg.schedule, t - 1)
        self.ebm = self.ebm.with_params(adam_step(self.opt, self.ebm.params(), grads, lr))
        return lr, gnorm

    def _row(self, t, pos, neg):
        """Metrics that use the pre-update parameters; the rest is filled in later."""
        e = self._sampling_energy()
        return {
            "step": t, "lr": 0.0,
            "mean_pos_energy": float(np.mean(e._energy(pos))),
            "mean_neg_energy": float(np.mean(e._energy(neg))),
            "grad_norm": 0.0,
            "diversity": batch_diversity(neg) if neg.shape[0] > 1 else float("nan"),
            "rejuvenation_count": 0, "promotion_count": 0, "wall_ms": 0.0,
        }

    # -- public ------------------------------------------------------------
    def step(self) -> dict:
        t = self.step_count + 1
        t0 = time.perf_counter()
        row = self._iterate(t)
        row["wall_ms"] = (time.perf_counter() - t0) * 1e3
        self.step_count = t
        if t % self.cfg.metrics_every == 0:
            self.metrics.append(row)
        return row

    def run(self, n_steps: int | None = None, callback: Callable | None = None):
        n = self.cfg.total_steps - self.step_count if n_steps is None else n_steps
        for _ in range(max(0, n)):
            row = self.step()
            if callback is not None:
                callback(self, row)
        return self

    def state_dict(self) -> dict:
        arrays = {f"ebm.p{i}": p for i, p in enumerate(self.ebm.params())}
        arrays.update(self.opt.state_dict("ebm_opt"))
        arrays["step"] = np.array([self.step_count], dtype=np.int64)
        arrays.update(self.bank_state())
        return arrays

    def load_state_dict(self, arrays: dict):
        n = len(self.ebm.params())
        self.ebm = self.ebm.with_params([np.array(arrays[f"ebm.p{i}"]) for i in range(n)])
        self.opt.load_state_dict(arrays, "ebm_opt")
        self.step_count = int(arrays["step"][0])
        self.load_bank_state(arrays)


class ShortrunTrainer(_Trainer):
    regime = "shortrun"

    def __init__(self, cfg, dataset, stream, ebm=None, generator: Generator | None = None,
                 record_events=False):
        self._gen_init = generator
        super().__init__(cfg, dataset, stream, ebm, record_events)
        self.gen_opt = OptimizerState.zeros_like(self.generator.params())

    def _init_banks(self, rng):
        cfg = self.cfg
        gen = self._gen_init
        if gen is None:
            latent = cfg.latent_dim or self.data.dim
            gen = Generator.init(latent, self.data.dim, cfg.generator_hidden, rng)
        self.generator = gen
        self.bank = PairedBank.from_generator(cfg.bank_size, GeneratorSource(gen), rng, bank_id=0)

    def _iterate(self, t):
        cfg = self.cfg
        pos = self._positives(t)
        self._event(t, "data")
        idx, (z, x0) = self.bank.draw(cfg.batch_size, self._rng("draw", t))
        self._event(t, "draw", indices=idx)
        neg = self._langevin(t, x0, self.bank.chain_ids(idx))
        self._event(t, "langevin")
        row = self._row(t, pos, neg)
        lr, gnorm = self._ebm_update(t, pos, neg)
        self._event(t, "ebm_update", negatives=("paired", idx))
        ggrads = clip_gradients(cooperative_grad(self.generator, z, neg), cfg.grad_clip)
        self.generator = self.generator.with_params(
            adam_step(self.gen_opt, self.generator.params(), ggrads, cfg.generator_lr))
        self._event(t, "generator_update")
        self.bank.put_back(idx, (z, neg), steps_added=cfg.mcmc_steps)
        self._event(t, "return")
        n_rejuv = self.bank.rejuvenate(idx, GeneratorSource(self.generator), cfg.rejuv_prob,
                                       self._rng("rejuvenate", t), max_rounds=cfg.max_update_rounds)
        self._event(t, "rejuvenate", count=n_rejuv)
        row.update(lr=lr, grad_norm=gnorm, rejuvenation_count=n_rejuv)
        return row

    def bank_state(self):
        out = self.bank.state_dict("bank")
        out.update({f"gen.p{i}": p for i, p in enumerate(self.generator.params())})
        out.update(self.gen_opt.state_dict("gen_opt"))
        return out

    def load_bank_state(self, arrays):
        self.bank.load_state_dict(arrays, "bank")
        n = len(self.generator.params())
        self.generator = self.generator.with_params([np.array(arrays[f"gen.p{i}"]) for i in range(n)])
        self.gen_opt.load_state_dict(arrays, "gen_opt")


class MidrunTrainer(_Trainer):
    regime = "midrun"

    def __init__(self, cfg, dataset, frozen_generator: Generator, stream, ebm=None, record_events=False):
        self.source = GeneratorSource(frozen_generator)
        super().__init__(cfg, dataset, stream, ebm, record_events)

    def _init_banks(self, rng):
        self.bank = PersistentBank.from_source(self.cfg.bank_size, self.source, rng, bank_id=0)

    def _iterate(self, t):
        cfg = self.cfg
        pos = self._positives(t)
        self._event(t, "data")
        idx, x0 = self.bank.draw(cfg.batch_size, self._rng("draw", t))
        self._event(t, "draw", indices=idx)
        neg = self._langevin(t, x0, self.bank.chain_ids(idx))
        self._event(t, "langevin")
        row = self._row(t, pos, neg)
        lr, gnorm = self._ebm_update(t, pos, neg)
        self._event(t, "ebm_update", negatives=("persistent", idx))
        self.bank.put_back(idx, neg, steps_added=cfg.mcmc_steps)
        self._event(t, "return")
        n_rejuv = self.bank.rejuvenate(idx, self.source, cfg.rejuv_prob, self._rng("rejuvenate", t))
        self._event(t, "rejuvenate", count=n_rejuv)
        row.update(lr=lr, grad_norm=gnorm, rejuvenation_count=n_rejuv)
        return row

    def bank_state(self):
        return self.bank.state_dict("bank")

    def load_bank_state(self, arrays):
        self.bank.load_state_dict(arrays, "bank")


class LongrunTrainer(_Trainer):
    regime = "longrun"

    def __init__(self, cfg, dataset, frozen_generator: Generator, prior_ebm: EnergyModel, stream,
                 ebm=None, record_events=False):
        self.source = GeneratorSource(frozen_generator)
        self.prior = prior_ebm
        super().__init__(cfg, dataset, stream, ebm, record_events)

    def _init_banks(self, rng):
        cfg = self.cfg
        self.dual = DualBank.from_source(cfg.burn_in_bank_size, cfg.bank_size, cfg.burn_in_threshold,
                                         self.source, rng, steps_per_round=cfg.mcmc_steps)

    def _sampling_energy(self):
        return CompositeEnergy(self.ebm, self.prior, self.cfg.prior_sigma)

    def model(self) -> CompositeEnergy:
        return self._sampling_energy()

    def _iterate(self, t):
        cfg = self.cfg
        b = cfg.batch_size
        burn, upd = self.dual.burn_in, self.dual.update
        pos = self._positives(t)
        self._event(t, "data")
        draw_rng = self._rng("draw", t)
        bidx, xb0 = burn.draw(b, draw_rng)
        uidx, xu0 = upd.draw(b, draw_rng)
        self._event(t, "draw", burn_in=bidx, update=uidx)
        # both batches share one Langevin call; ids keep the two banks' noise apart
        ids = np.concatenate([upd.chain_ids(uidx), burn.chain_ids(bidx)])
        out = self._langevin(t, np.concatenate([xu0, xb0]), ids)
        neg, xb = out[:b], out[b:]
        self._event(t, "langevin", bank="update")
        self._event(t, "langevin", bank="burn_in")
        row = self._row(t, pos, neg)
        lr, gnorm = self._ebm_update(t, pos, neg)
        self._event(t, "ebm_update", negatives=("update", uidx))
        self.dual.record_round(bidx)
        self._event(t, "count")
        burn.put_back(bidx, xb, steps_added=cfg.mcmc_steps)
        upd.put_back(uidx, neg, steps_added=cfg.mcmc_steps)
        self._event(t, "return")
        n_promo = self.dual.promote(bidx, self.source, self._rng("promote", t))
        self._event(t, "promote", count=n_promo)
        row.update(lr=lr, grad_norm=gnorm, rejuvenation_count=n_promo, promotion_count=n_promo)
        return row

    def bank_state(self):
        return self.dual.state_dict("dual")

    def load_bank_state(self, arrays):
        self.dual.load_state_dict(arrays, "dual")


def _stream(rng) -> Stream:
    if isinstance(rng, Stream):
        return rng
    if rng is None:
        return Stream(0)
    return Stream(int(rng))


def train_shortrun(cfg: TrainConfig, dataset, rng, ebm=None, generator=None):
    """Run the hybrid loop for ``cfg.total_steps``; returns ``(ebm, generator, metrics)``."""
    tr = ShortrunTrainer(cfg, dataset, _stream(rng), ebm=ebm, generator=generator).run()
    return tr.ebm, tr.generator, tr.metrics


def train_midrun(cfg: TrainConfig, dataset, frozen_generator, rng, ebm=None) -> EnergyModel:
    return MidrunTrainer(cfg, dataset, frozen_generator, _stream(rng), ebm=ebm).run().ebm


def train_longrun(cfg: TrainConfig, dataset, frozen_generator, prior_ebm, rng, ebm=None) -> CompositeEnergy:
    """Returns the composite sampling energy (trained part, frozen prior, Gaussian term)."""
    return LongrunTrainer(cfg, dataset, frozen_generator, prior_ebm, _stream(rng), ebm=ebm).run().model()


def make_trainer(cfg: TrainConfig, dataset, stream, generator=None, prior_ebm=None, **kw) -> _Trainer:
    stream = _stream(stream)
    if cfg.regime == "shortrun":
        return ShortrunTrainer(cfg, dataset, stream, generator=generator, **kw)
    if generator is None:
        raise ValueError(f"{cfg.regime} training needs a frozen generator")
    if cfg.regime == "midrun":
        return MidrunTrainer(cfg, dataset, generator, stream, **kw)
    if prior_ebm is None:
        raise ValueError("longrun training needs a prior EBM")
    return LongrunTrainer(cfg, dataset, generator, prior_ebm, stream, **kw)
