import json
import subprocess
import sys

import numpy as np
import pytest

from ebm_lifecycle.checkpoint import load_checkpoint
from ebm_lifecycle.cli import main, read_metrics
from ebm_lifecycle.trainer import METRIC_COLUMNS

MIDRUN = """
[data]
dataset = ring-4-2d
[sampler]
langevin_epsilon = 0.05
mcmc_steps = 10
mcmc_temperature = 1
[bank]
persistent_bank_size = 200
rejuvenation_probability = 0.1
[trainer]
training_steps = 20
data_epsilon = 0
ebm_lr = 1e-3
generator_fit_steps = 30
batch_size = 16
[output]
seed = 3
checkpoint_every = 10
"""


def write(tmp_path, text, name="cfg.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("train")
    cfg = write(d, MIDRUN)
    assert main(["train-midrun", "--config", cfg, "--out", str(d / "run")]) == 0
    return d, cfg


def test_train_outputs(trained):
    d, _ = trained
    run = d / "run"
    man = json.loads((run / "manifest.json").read_text())
    assert man["seed"] == 3 and man["config"]["trainer"]["regime"] == "midrun"
    assert man["config"]["bank"]["rejuvenation_probability"] == 0.1
    assert {"code_version", "wall_time_s", "config_digest"} <= set(man)
    rows = read_metrics(run / "metrics.csv")
    assert len(rows) == 20 and list(rows[0]) == list(METRIC_COLUMNS)
    assert (run / "checkpoint_00000010.eblc").exists() and (run / "config.ini").exists()


def test_resume_matches_uninterrupted(trained):
    d, cfg = trained
    out = d / "resumed"
    assert main(["train-midrun", "--config", cfg, "--out", str(out),
                 "--resume", str(d / "run" / "checkpoint_00000010.eblc")]) == 0
    a, _ = load_checkpoint(d / "run" / "checkpoint.eblc")
    b, _ = load_checkpoint(out / "checkpoint.eblc")
    assert set(a) == set(b)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows]
    assert strip(read_metrics(d / "run" / "metrics.csv")[10:]) == strip(read_metrics(out / "metrics.csv"))


def test_resume_rejects_other_config(trained, tmp_path):
    d, _ = trained
    other = write(tmp_path, MIDRUN.replace("mcmc_steps = 10", "mcmc_steps = 11"))
    code = main(["train-midrun", "--config", other, "--out", str(tmp_path / "o"),
                 "--resume", str(d / "run" / "checkpoint_00000010.eblc")])
    assert code == 1
    assert json.loads((tmp_path / "o" / "error.json").read_text())["error"] == "CheckpointError"


def test_sample_with_zero_steps_returns_init(trained, tmp_path):
    d, _ = trained
    text = MIDRUN.replace("mcmc_steps = 10", "mcmc_steps = 0") + "\n[energy]\n"
    text = text.replace("[sampler]", "[sampler]\ninit = bank\nnum_chains = 50")
    cfg = write(tmp_path, text)
    ck = d / "run" / "checkpoint.eblc"
    assert main(["sample", "--config", cfg, "--out", str(tmp_path / "s"), "--resume", str(ck)]) == 0
    x = np.loadtxt(tmp_path / "s" / "samples.csv", delimiter=",", skiprows=1)
    arrays, _ = load_checkpoint(ck)
    np.testing.assert_array_equal(x, arrays["bank.states"][:50])


def test_bank_stats(trained, tmp_path):
    d, cfg = trained
    assert main(["bank-stats", "--config", cfg, "--out", str(tmp_path / "b"),
                 "--resume", str(d / "run" / "checkpoint.eblc")]) == 0
    rep = json.loads((tmp_path / "b" / "bank_stats.json").read_text())
    assert rep["bank"]["events"] > 0 and rep["bank"]["mean_lifetime"] >= 10
    assert sum(rep["bank"]["histogram"]["counts"]) == rep["bank"]["events"]


def test_steady_state_on_true_energy(tmp_path):
    cfg = write(tmp_path, """
[data]
dataset = double-well-1d
[energy]
model = data
[sampler]
langevin_epsilon = 0.05
steady_state_steps = 4000
steady_state_chains = 256
record_every = 100
[output]
seed = 1
""")
    assert main(["steady-state", "--config", cfg, "--out", str(tmp_path / "ss")]) == 0
    rep = json.loads((tmp_path / "ss" / "steady_state.json").read_text())
    assert rep["kl_vs_data"] < 0.05 and rep["overflow"] == 0


def test_defend_runs(tmp_path):
    cfg = write(tmp_path, """
[data]
dataset = defense-2d
[energy]
model = data
[defense]
langevin_steps = 20
eot_attack_reps = 2
eot_defense_reps = 2
num_examples = 6
adversarial_epsilon = 0.5
adversarial_eta = 0.125
adversarial_steps = 3
langevin_epsilon = 0.02
mcmc_temperature = 1
classifier_steps = 200
[output]
seed = 2
""")
    assert main(["defend", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
    res = json.loads((tmp_path / "d" / "manifest.json").read_text())["result"]
    assert 0 <= res["robust_accuracy"] <= res["natural_accuracy"] <= 1
    assert len((tmp_path / "d" / "defense.csv").read_text().splitlines()) == 7


def test_config_error_exit_code(tmp_path):
    cfg = write(tmp_path, MIDRUN.replace("rejuvenation_probability = 0.1", "rejuvenation_probabilty = 0.1"))
    assert main(["train-midrun", "--config", cfg, "--out", str(tmp_path / "e")]) == 2
    err = json.loads((tmp_path / "e" / "error.json").read_text())
    assert err["error"] == "ConfigError" and "rejuvenation_probabilty" in err["messages"][0]
    assert not (tmp_path / "e" / "manifest.json").exists()


def test_missing_checkpoint_is_runtime_error(tmp_path):
    cfg = write(tmp_path, MIDRUN)
    assert main(["sample", "--config", cfg, "--out", str(tmp_path / "m")]) == 1


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "ebm_lifecycle.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "train-midrun" in r.stdout
    cfg = write(tmp_path, "[output]\n")
    r = subprocess.run([sys.executable, "-m", "ebm_lifecycle.cli", "train-shortrun", "--config", cfg,
                        "--out", str(tmp_path / "x")], capture_output=True, text=True)
    assert r.returncode == 2 and "seed" in r.stderr
