"""Command-line entry point ``ebm-lifecycle``.

Usage::

    ebm-lifecycle <subcommand> --config <path> --out <dir> [--resume <ckpt>] [--seed <u64>]

Subcommands: ``train-shortrun``, ``train-midrun``, ``train-longrun``,
``sample``, ``defend``, ``steady-state``, ``bank-stats``. Every run writes
``manifest.json`` (config with defaults applied, seed, code version, wall
time) and ``metrics.csv`` into the output directory. Failures exit nonzero
and leave ``error.json`` next to them (also printed to stderr).

The log level comes from the ``EBM_LIFECYCLE_LOG_LEVEL`` environment variable.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
import traceback
from importlib import metadata
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, pack_net, save_checkpoint, unpack_net
from .config import ConfigError, ExperimentConfig, parse_config
from .defense import evaluate_defense, fit_classifier, plain_pgd
from .energy import CompositeEnergy, MlpEnergy
from .generator import Generator
from .langevin import LangevinConfig, langevin_run
from .metrics import (Grid, batch_diversity, empirical_pmf, grid_boltzmann, kl_divergence,
                      lifetime_stats, pmf_from_density)
from .rng import Stream
from .toydata import frozen_generator_fixture, load_dataset
from .trainer import METRIC_COLUMNS, TrainConfig, make_trainer

log = logging.getLogger("ebm_lifecycle")

SUBCOMMANDS = ("train-shortrun", "train-midrun", "train-longrun", "sample", "defend",
               "steady-state", "bank-stats")


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


class MetricsWriter:
    def __init__(self, path: Path, columns=METRIC_COLUMNS):
        self.columns = list(columns)
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._w = csv.DictWriter(self._fh, fieldnames=self.columns, extrasaction="ignore")
        self._w.writeheader()

    def write(self, row: dict):
        self._w.writerow({k: _fmt(row.get(k, "")) for k in self.columns})
        self._fh.flush()

    def close(self):
        self._fh.close()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# --- checkpoints of whole runs ---------------------------------------------------

def _trainer_checkpoint(trainer, cfg: ExperimentConfig, frozen: Generator | None, prior: MlpEnergy | None):
    arrays = trainer.state_dict()
    nets = {"ebm": pack_net(trainer.ebm.net, "ebm")[1]}
    if cfg.regime == "shortrun":
        nets["gen"] = pack_net(trainer.generator.net, "gen")[1]
    if frozen is not None:
        a, nets["frozen"] = pack_net(frozen.net, "frozen")
        arrays.update(a)
    if prior is not None:
        a, nets["prior"] = pack_net(prior.net, "prior")
        arrays.update(a)
    meta = {"regime": cfg.regime, "step": trainer.step_count, "seed": cfg.seed,
            "config": cfg.to_dict(), "config_digest": cfg.digest(), "nets": nets,
            "prior_sigma": trainer.cfg.prior_sigma, "temperature": trainer.cfg.temperature,
            "code_version": code_version()}
    return arrays, meta


def model_from_checkpoint(arrays: dict, meta: dict):
    """The sampling energy stored in a checkpoint (composite for longrun runs)."""
    ebm = MlpEnergy(unpack_net(arrays, "ebm", meta["nets"]["ebm"]))
    if meta["regime"] == "longrun":
        prior = MlpEnergy(unpack_net(arrays, "prior", meta["nets"]["prior"]))
        return CompositeEnergy(ebm, prior, meta["prior_sigma"])
    return ebm


def generator_from_checkpoint(arrays: dict, meta: dict) -> Generator | None:
    for name in ("gen", "frozen"):
        if name in meta["nets"]:
            return Generator(unpack_net(arrays, name, meta["nets"][name]))
    return None


# --- subcommands -------------------------------------------------------------------

def _fit_generator(cfg: ExperimentConfig, ds):
    rng = Stream(cfg.seed, "frozen-generator").generator()
    return frozen_generator_fixture(ds, cfg["trainer"]["generator_fit_steps"], rng)


def _prior(cfg: ExperimentConfig, ds, frozen):
    path = cfg["energy"]["prior_checkpoint"]
    if path:
        arrays, meta = load_checkpoint(path)
        return MlpEnergy(unpack_net(arrays, "ebm", meta["nets"]["ebm"]))
    tc = cfg.train_config()
    t = cfg["trainer"]
    pcfg = TrainConfig.from_dict({**tc.to_dict(), "regime": "midrun",
                                  "rejuv_prob": t["prior_rejuvenation_probability"],
                                  "total_steps": t["prior_training_steps"],
                                  "lr_schedule": ((t["prior_lr"], 0),)})
    log.info("training prior EBM for %d steps", pcfg.total_steps)
    tr = make_trainer(pcfg, ds, Stream(cfg.seed, "prior"), generator=frozen)
    return tr.run().ebm


def cmd_train(cfg: ExperimentConfig, out: Path, resume: str | None) -> dict:
    ds = load_dataset(cfg["data"]["dataset"])
    tc = cfg.train_config()
    frozen = prior = None
    if resume:
        arrays, meta = load_checkpoint(resume)
        if meta.get("regime") != cfg.regime:
            raise CheckpointError(f"checkpoint regime {meta.get('regime')} does not match {cfg.regime}")
        if meta.get("config_digest") != cfg.digest():
            raise CheckpointError("checkpoint was written with a different configuration")
        if "frozen" in meta["nets"]:
            frozen = Generator(unpack_net(arrays, "frozen", meta["nets"]["frozen"]))
        if "prior" in meta["nets"]:
            prior = MlpEnergy(unpack_net(arrays, "prior", meta["nets"]["prior"]))
    else:
        if cfg.regime in ("midrun", "longrun"):
            frozen = _fit_generator(cfg, ds)
        if cfg.regime == "longrun":
            prior = _prior(cfg, ds, frozen)
    trainer = make_trainer(tc, ds, Stream(cfg.seed, "train"), generator=frozen, prior_ebm=prior)
    if resume:
        trainer.load_state_dict(arrays)
    writer = MetricsWriter(out / "metrics.csv")
    every = cfg["output"]["checkpoint_every"]

    def on_step(tr, row):
        if tr.metrics and tr.metrics[-1] is row:
            writer.write(row)
        if every and tr.step_count % every == 0:
            save_checkpoint(*_trainer_checkpoint(tr, cfg, frozen, prior), out / f"checkpoint_{tr.step_count:08d}.eblc")

    try:
        trainer.run(callback=on_step)
    finally:
        writer.close()
    save_checkpoint(*_trainer_checkpoint(trainer, cfg, frozen, prior), out / "checkpoint.eblc")
    last = trainer.metrics[-1] if trainer.metrics else {}
    return {"final_step": trainer.step_count, "checkpoint": "checkpoint.eblc",
            "last_metrics": {k: last.get(k) for k in METRIC_COLUMNS if k != "wall_ms"}}


def _bank_states(arrays, meta):
    for key in ("bank.images", "bank.states", "dual.update.states"):
        if key in arrays:
            return arrays[key]
    raise CheckpointError("checkpoint holds no bank")


def _require_checkpoint(resume):
    if not resume:
        raise ValueError("this subcommand needs a checkpoint (--resume)")
    return load_checkpoint(resume)


def _one_row(step, model, x, **extra):
    e = model._energy(x)
    row = {"step": step, "lr": "", "mean_pos_energy": "", "mean_neg_energy": float(np.mean(e)),
           "grad_norm": "", "diversity": batch_diversity(x) if x.shape[0] > 1 else "",
           "rejuvenation_count": "", "promotion_count": "", "wall_ms": ""}
    row.update(extra)
    return row


def cmd_sample(cfg: ExperimentConfig, out: Path, resume: str | None) -> dict:
    ds = load_dataset(cfg["data"]["dataset"])
    arrays, meta = _require_checkpoint(resume)
    model = model_from_checkpoint(arrays, meta)
    s = cfg["sampler"]
    n, init = s["num_chains"], s["init"]
    rng = Stream(cfg.seed, "sample-init").generator()
    if init == "generator":
        gen = generator_from_checkpoint(arrays, meta)
        x0 = gen.generate(rng.standard_normal((n, gen.latent_dim)))
    elif init == "data":
        x0 = ds.sample(n, rng)
    elif init == "noise":
        x0 = rng.standard_normal((n, ds.dim))
    else:
        x0 = _bank_states(arrays, meta)[:n]
    lc = LangevinConfig(s["langevin_epsilon"], s["mcmc_steps"], s["mcmc_temperature"],
                        stream=Stream(cfg.seed, "sample"))
    x = langevin_run(model, x0, lc).final_state
    np.savetxt(out / "samples.csv", x, delimiter=",", header=",".join(f"x{j}" for j in range(x.shape[1])),
               comments="", fmt="%.17g")
    w = MetricsWriter(out / "metrics.csv")
    w.write(_one_row(s["mcmc_steps"], model, x))
    w.close()
    return {"samples": "samples.csv", "num_chains": int(x.shape[0]), "init": init, "steps": s["mcmc_steps"]}


def cmd_steady_state(cfg: ExperimentConfig, out: Path, resume: str | None) -> dict:
    ds = load_dataset(cfg["data"]["dataset"])
    if ds.grid is None or not ds.has_density:
        raise ValueError(f"dataset {ds.name} has no grid oracle")
    s = cfg["sampler"]
    rng = Stream(cfg.seed, "steady-init").generator()
    n = s["steady_state_chains"]
    if cfg["energy"]["model"] == "data":
        model, temperature = ds.energy_model(), 1.0
        x0 = ds.sample(n, rng)
    else:
        arrays, meta = _require_checkpoint(resume)
        model, temperature = model_from_checkpoint(arrays, meta), s["mcmc_temperature"]
        gen = generator_from_checkpoint(arrays, meta)
        x0 = gen.generate(rng.standard_normal((n, gen.latent_dim))) if gen else ds.sample(n, rng)
    steps = s["steady_state_steps"]
    lc = LangevinConfig(s["langevin_epsilon"], steps, temperature, record_every=s["record_every"],
                        stream=Stream(cfg.seed, "steady"))
    tr = langevin_run(model, x0, lc)
    pooled = tr.recorded_states[tr.recorded_steps >= steps // 2].reshape(-1, ds.dim)
    g = ds.grid
    grid = Grid(g.lows, g.highs, (s["steady_state_bins"],) * ds.dim)
    emp = empirical_pmf(pooled, grid)
    report = {
        "kl_vs_data": kl_divergence(emp, pmf_from_density(ds.density, grid)),
        "kl_vs_model": kl_divergence(emp, grid_boltzmann(model, grid, temperature)),
        "kl_final_vs_data": kl_divergence(empirical_pmf(tr.final_state, grid), pmf_from_density(ds.density, grid)),
        "overflow": emp.overflow, "pooled_samples": int(pooled.shape[0]), "steps": steps, "bins": grid.bins,
    }
    (out / "steady_state.json").write_text(json.dumps(report, indent=2))
    w = MetricsWriter(out / "metrics.csv")
    w.write(_one_row(steps, model, tr.final_state))
    w.close()
    return report


def cmd_bank_stats(cfg: ExperimentConfig, out: Path, resume: str | None) -> dict:
    arrays, meta = _require_checkpoint(resume)
    report = {}
    for prefix in ("bank", "dual.burn_in", "dual.update"):
        key = f"{prefix}.rejuvenation_lifetimes"
        if key not in arrays:
            continue
        st = lifetime_stats(arrays[key])
        report[prefix] = {
            "events": st.n_events, "mean_lifetime": None if st.empty else st.mean,
            "histogram": {"counts": st.counts.tolist(), "edges": st.edges.tolist()},
            "current_mean_lifetime": float(np.mean(arrays[f"{prefix}.lifetimes"])),
        }
    if "dual.counts" in arrays:
        report["dual"] = {"promotions": int(arrays["dual.promotions"][0]),
                          "mean_count": float(np.mean(arrays["dual.counts"]))}
    (out / "bank_stats.json").write_text(json.dumps(report, indent=2))
    w = MetricsWriter(out / "metrics.csv")
    bank = report.get("bank") or report.get("dual.burn_in") or {}
    w.write({"step": meta.get("step", ""), "rejuvenation_count": bank.get("events", ""),
             "promotion_count": report.get("dual", {}).get("promotions", "")})
    w.close()
    return report


def cmd_defend(cfg: ExperimentConfig, out: Path, resume: str | None) -> dict:
    ds = load_dataset(cfg["data"]["dataset"])
    d = cfg["defense"]
    if cfg["energy"]["model"] == "data":
        ebm = ds.energy_model()
    else:
        arrays, meta = _require_checkpoint(resume)
        ebm = model_from_checkpoint(arrays, meta)
    rng = Stream(cfg.seed, "classifier").generator()
    xtr = ds.sample(2000, rng)
    clf = fit_classifier(xtr, ds.labels(xtr), ds.num_classes, d["classifier_hidden"], rng, d["classifier_steps"])
    xte = ds.sample(d["num_examples"], Stream(cfg.seed, "test").generator())
    yte = ds.labels(xte)
    ac, dc = cfg.attack_config(), cfg.defense_config()
    rec = evaluate_defense(xte, yte, clf, ebm, ac, dc, Stream(cfg.seed, "defend"), bounds=ds.bounds)
    base = plain_pgd(xte, yte, clf, ac, Stream(cfg.seed, "defend"), bounds=ds.bounds)
    with open(out / "defense.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["example", "natural_pred", "defended", "first_break"])
        w.writeheader()
        w.writerows(rec.rows())
    mw = MetricsWriter(out / "metrics.csv")
    mw.write({"step": ac.num_steps})
    mw.close()
    return {"natural_accuracy": rec.natural_accuracy, "robust_accuracy": rec.robust_accuracy,
            "undefended_robust_accuracy": base.robust_accuracy, "examples": int(yte.size)}


COMMANDS = {
    "train-shortrun": ("shortrun", cmd_train),
    "train-midrun": ("midrun", cmd_train),
    "train-longrun": ("longrun", cmd_train),
    "sample": (None, cmd_sample),
    "defend": (None, cmd_defend),
    "steady-state": (None, cmd_steady_state),
    "bank-stats": (None, cmd_bank_stats),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ebm-lifecycle", description=__doc__.split("\n\n")[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to resume from (or to read, for non-training commands)")
    p.add_argument("--seed", type=int, help="overrides [output] seed")
    return p


def _fail(out: Path | None, kind: str, messages: list[str], code: int) -> int:
    record = {"error": kind, "messages": messages}
    print(json.dumps(record), file=sys.stderr)
    if out is not None and out.is_dir():
        (out / "error.json").write_text(json.dumps(record, indent=2))
    return code


def run(subcommand: str, config_path, out_dir, resume=None, seed: int | None = None) -> int:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        return _fail(None, "OSError", [str(e)], 1)
    regime, fn = COMMANDS[subcommand]
    overrides = {("output", "seed"): seed} if seed is not None else None
    try:
        cfg = parse_config(config_path, regime=regime, overrides=overrides)
    except ConfigError as e:
        return _fail(out, "ConfigError", e.errors, 2)
    except OSError as e:
        return _fail(out, "OSError", [str(e)], 2)
    started = time.time()
    t0 = time.perf_counter()
    try:
        result = fn(cfg, out, resume)
    except (CheckpointError, ValueError, FloatingPointError, OSError, RuntimeError) as e:
        log.debug("%s", traceback.format_exc())
        return _fail(out, type(e).__name__, [str(e)], 1)
    manifest = {
        "subcommand": subcommand, "config": cfg.to_dict(), "config_digest": cfg.digest(),
        "seed": cfg.seed, "code_version": code_version(), "resumed_from": resume,
        "started_unix": started, "wall_time_s": time.perf_counter() - t0, "result": result,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_json_default))
    (out / "config.ini").write_text(cfg.to_ini())
    return 0


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o).__name__)


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("EBM_LIFECYCLE_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return run(args.subcommand, args.config, args.out, args.resume, args.seed)


if __name__ == "__main__":
    sys.exit(main())
