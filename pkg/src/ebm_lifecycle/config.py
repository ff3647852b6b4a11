"""Experiment configuration files.

An INI-style document with the sections ``[data]``, ``[energy]``,
``[sampler]``, ``[bank]``, ``[trainer]``, ``[defense]`` and ``[output]``.
Parsing is strict: unknown sections or keys, values of the wrong type and
out-of-range values are all errors, and every error in the file is reported
at once. Defaults depend on the training regime
(see :data:`~ebm_lifecycle.trainer.REGIME_DEFAULTS`).

Example::

    [trainer]
    regime = midrun
    training_steps = 2000
    ebm_lr = anneal
    anneal_scale = 0.01

    [output]
    seed = 7
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .defense import AttackConfig, DefenseConfig
from .optim import DEFAULT_ANNEAL, AnnealSchedule
from .trainer import REGIME_DEFAULTS, REGIMES, TrainConfig


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


# --- value parsers -------------------------------------------------------------

def _float(s: str) -> float:
    s = s.strip()
    if "/" in s:
        return float(Fraction(s))
    return float(s)


def _int(s: str) -> int:
    v = float(s)
    if v != int(v):
        raise ValueError(f"{s!r} is not an integer")
    return int(v)


def _bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{s!r} is not a boolean")


def _ints(s: str) -> tuple:
    return tuple(_int(p) for p in s.split(",") if p.strip())


def _schedule(s: str) -> str:
    parse_schedule(s, 1.0)
    return s.strip()


def parse_schedule(text: str, scale: float = 1.0) -> tuple:
    """``anneal`` (the default schedule), a single rate, or ``rate@step, rate@step, ...``."""
    t = text.strip()
    if t == "anneal":
        return AnnealSchedule(DEFAULT_ANNEAL).time_scaled(scale).pairs
    if "@" not in t:
        return ((_float(t), 0),)
    pairs = []
    for part in t.split(","):
        rate, step = part.split("@")
        pairs.append((_float(rate), _int(step)))
    return AnnealSchedule(tuple(pairs)).time_scaled(scale).pairs


def _choice(*options):
    def parse(s):
        s = s.strip()
        if s not in options:
            raise ValueError(f"{s!r} is not one of {', '.join(options)}")
        return s
    return parse


def _str(s):
    return s.strip()


# --- schema ---------------------------------------------------------------------
# section -> key -> (parser, default). A default of None means "regime dependent"
# or "not set"; REQUIRED marks keys that must be present.
REQUIRED = object()

SCHEMA = {
    "data": {
        "dataset": (_str, "double-well-1d"),
    },
    "energy": {
        "hidden": (_ints, (32, 32)),
        "activation": (_choice("tanh", "leaky_relu", "identity"), "tanh"),
        "out_scale": (_float, 0.1),
        "tau": (_float, None),
        "prior_checkpoint": (_str, ""),
        "generator_hidden": (_ints, (32, 32)),
        "latent_dim": (_int, 0),
        "model": (_choice("checkpoint", "data"), "checkpoint"),
    },
    "sampler": {
        "langevin_epsilon": (_float, None),
        "mcmc_steps": (_int, None),
        "mcmc_temperature": (_float, None),
        "init": (_choice("generator", "data", "noise", "bank"), "generator"),
        "num_chains": (_int, 256),
        "steady_state_steps": (_int, 100000),
        "steady_state_chains": (_int, 512),
        "steady_state_bins": (_int, 30),
        "record_every": (_int, 1000),
    },
    "bank": {
        "persistent_bank_size": (_int, None),
        "burn_in_bank_size": (_int, None),
        "burn_in_update_rounds": (_int, None),
        "rejuvenation_probability": (_float, None),
        "max_update_rounds": (_int, None),
    },
    "trainer": {
        "regime": (_choice(*REGIMES), None),
        "batch_size": (_int, 64),
        "training_steps": (_int, None),
        "ebm_lr": (_schedule, None),
        "anneal_scale": (_float, 1.0),
        "generator_lr": (_float, None),
        "ebm_gradient_clip": (_float, None),
        "data_epsilon": (_float, None),
        "generator_fit_steps": (_int, 400),
        "prior_training_steps": (_int, 2000),
        "prior_lr": (_float, 1e-4),
        "prior_rejuvenation_probability": (_float, 0.2),
    },
    "defense": {
        "adversarial_steps": (_int, 50),
        "adversarial_epsilon": (_float, 8 / 255),
        "adversarial_eta": (_float, 2 / 255),
        "eot_attack_reps": (_int, 48),
        "eot_defense_reps": (_int, 128),
        "langevin_steps": (_int, 2000),
        "langevin_epsilon": (_float, 1e-2),
        "mcmc_temperature": (_float, 1e-4),
        "num_examples": (_int, 100),
        "classifier_hidden": (_ints, (16,)),
        "classifier_steps": (_int, 1000),
        "random_start": (_bool, True),
    },
    "output": {
        "seed": (_int, REQUIRED),
        "metrics_every": (_int, 1),
        "checkpoint_every": (_int, 0),
    },
}

ALIASES = {
    "p_rejuv": ("bank", "rejuvenation_probability"),
    "k": ("sampler", "mcmc_steps"),
    "eta": ("sampler", "langevin_epsilon"),
    "temperature": ("sampler", "mcmc_temperature"),
    "bank_size": ("bank", "persistent_bank_size"),
    "steps": ("trainer", "training_steps"),
}

# [sampler]/[bank]/[trainer] keys whose default comes from the regime table
_REGIME_KEYS = {
    ("sampler", "langevin_epsilon"): "step_size",
    ("sampler", "mcmc_steps"): "mcmc_steps",
    ("sampler", "mcmc_temperature"): "temperature",
    ("bank", "persistent_bank_size"): "bank_size",
    ("bank", "burn_in_bank_size"): "burn_in_bank_size",
    ("bank", "burn_in_update_rounds"): "burn_in_threshold",
    ("bank", "rejuvenation_probability"): "rejuv_prob",
    ("bank", "max_update_rounds"): "max_update_rounds",
    ("trainer", "training_steps"): "total_steps",
    ("trainer", "generator_lr"): "generator_lr",
    ("trainer", "ebm_gradient_clip"): "grad_clip",
    ("trainer", "data_epsilon"): "data_epsilon",
    ("energy", "tau"): "prior_sigma",
}

_RANGES = {
    ("bank", "rejuvenation_probability"): (0.0, 1.0),
    ("trainer", "prior_rejuvenation_probability"): (0.0, 1.0),
}
_POSITIVE = {("sampler", "langevin_epsilon"), ("sampler", "mcmc_temperature"), ("energy", "tau"),
             ("defense", "langevin_epsilon"), ("defense", "mcmc_temperature"), ("trainer", "anneal_scale")}
_NON_NEGATIVE = {("sampler", "mcmc_steps"), ("trainer", "training_steps"), ("trainer", "data_epsilon"),
                 ("trainer", "ebm_gradient_clip"), ("defense", "langevin_steps"),
                 ("defense", "adversarial_epsilon"), ("defense", "adversarial_eta"),
                 ("output", "metrics_every"), ("output", "checkpoint_every")}


def _regime_default(regime: str, field: str):
    table = REGIME_DEFAULTS[regime]
    if field in table:
        return table[field]
    return getattr(TrainConfig, field)


@dataclass
class ExperimentConfig:
    regime: str
    values: dict            # section -> key -> parsed value, defaults applied

    def __getitem__(self, section):
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["output"]["seed"]

    def lr_schedule(self) -> tuple:
        t = self.values["trainer"]
        text = t["ebm_lr"] if t["ebm_lr"] is not None else (
            "anneal" if REGIME_DEFAULTS[self.regime]["lr_schedule"] == DEFAULT_ANNEAL else "1e-4")
        return parse_schedule(text, t["anneal_scale"])

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            regime=self.regime,
            batch_size=v["trainer"]["batch_size"],
            mcmc_steps=v["sampler"]["mcmc_steps"],
            step_size=v["sampler"]["langevin_epsilon"],
            temperature=v["sampler"]["mcmc_temperature"],
            rejuv_prob=v["bank"]["rejuvenation_probability"],
            max_update_rounds=v["bank"]["max_update_rounds"],
            bank_size=v["bank"]["persistent_bank_size"],
            burn_in_bank_size=v["bank"]["burn_in_bank_size"],
            burn_in_threshold=v["bank"]["burn_in_update_rounds"],
            data_epsilon=v["trainer"]["data_epsilon"],
            grad_clip=v["trainer"]["ebm_gradient_clip"],
            total_steps=v["trainer"]["training_steps"],
            lr_schedule=self.lr_schedule(),
            generator_lr=v["trainer"]["generator_lr"],
            prior_sigma=v["energy"]["tau"],
            ebm_hidden=v["energy"]["hidden"],
            ebm_activation=v["energy"]["activation"],
            ebm_out_scale=v["energy"]["out_scale"],
            generator_hidden=v["energy"]["generator_hidden"],
            latent_dim=v["energy"]["latent_dim"],
            metrics_every=v["output"]["metrics_every"],
            seed=self.seed,
        )

    def attack_config(self) -> AttackConfig:
        d = self.values["defense"]
        return AttackConfig(d["adversarial_epsilon"], d["adversarial_eta"], d["adversarial_steps"],
                            d["eot_attack_reps"], d["random_start"])

    def defense_config(self) -> DefenseConfig:
        d = self.values["defense"]
        return DefenseConfig(d["langevin_steps"], d["eot_defense_reps"], d["langevin_epsilon"],
                             d["mcmc_temperature"])

    def to_dict(self) -> dict:
        out = {}
        for sec, kv in self.values.items():
            out[sec] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in kv.items()}
        out["trainer"]["regime"] = self.regime
        return out

    def to_ini(self) -> str:
        lines = []
        for sec, kv in self.to_dict().items():
            lines.append(f"[{sec}]")
            for k, v in kv.items():
                if v is None:
                    continue
                if isinstance(v, list):
                    v = ", ".join(str(x) for x in v)
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def parse_config_text(text: str, regime: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__unused_default__")
    errors: list[str] = []
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError([f"syntax: {e}"]) from None

    raw: dict[str, dict[str, str]] = {s: {} for s in SCHEMA}
    for section in cp.sections():
        if section not in SCHEMA:
            errors.append(f"unknown section [{section}]")
            continue
        for key, val in cp.items(section):
            sec, k = section, key
            if k not in SCHEMA[sec] and k in ALIASES and ALIASES[k][0] == sec:
                k = ALIASES[k][1]
            if k not in SCHEMA[sec]:
                errors.append(f"unknown key '{key}' in [{section}]")
                continue
            raw[sec][k] = val
    for (sec, k), v in (overrides or {}).items():
        raw[sec][k] = str(v)

    file_regime = raw["trainer"].get("regime", "").strip() or None
    if regime and file_regime and regime != file_regime:
        errors.append(f"[trainer] regime = {file_regime} conflicts with the requested regime {regime}")
    regime = regime or file_regime or "shortrun"
    if regime not in REGIMES:
        errors.append(f"[trainer] regime: {regime!r} is not one of {', '.join(REGIMES)}")
        regime = "shortrun"

    values: dict[str, dict] = {s: {} for s in SCHEMA}
    for sec, keys in SCHEMA.items():
        for k, (parser, default) in keys.items():
            if k in raw[sec]:
                try:
                    v = parser(raw[sec][k])
                except (ValueError, ZeroDivisionError, TypeError) as e:
                    errors.append(f"[{sec}] {k}: {e}")
                    continue
            elif default is REQUIRED:
                errors.append(f"[{sec}] {k} is required")
                continue
            elif default is None and (sec, k) in _REGIME_KEYS:
                v = _regime_default(regime, _REGIME_KEYS[(sec, k)])
            else:
                v = default
            if (sec, k) in _RANGES and v is not None:
                lo, hi = _RANGES[(sec, k)]
                if not lo <= v <= hi:
                    errors.append(f"[{sec}] {k} = {v} is outside [{lo}, {hi}]")
            if (sec, k) in _POSITIVE and v is not None and not v > 0:
                errors.append(f"[{sec}] {k} must be positive")
            if (sec, k) in _NON_NEGATIVE and v is not None and v < 0:
                errors.append(f"[{sec}] {k} must be non-negative")
            values[sec][k] = v
    values["trainer"]["regime"] = regime

    cfg = ExperimentConfig(regime, values)
    if not errors:
        for build in (cfg.train_config, cfg.attack_config, cfg.defense_config):
            try:
                build()
            except ValueError as e:
                errors.append(str(e))
    if errors:
        raise ConfigError(errors)
    return cfg


def parse_config(path, regime: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    return parse_config_text(text, regime, overrides)
