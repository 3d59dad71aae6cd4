# %% [markdown]
# # The `qafnet` command line
#
# The pipeline stages run as subcommands that communicate through files:
# datasets in the data directory, checkpoints and the calibration file in the
# checkpoint directory, CSV reports in the report directory.  Every stage
# writes the configuration it ran with as `run_config.ini` next to its
# outputs, so a run can be repeated from that file alone.
#
# This script calls the same entry point as the installed `qafnet` command,
# with a small configuration so that it finishes in seconds.

# %%
import os
import tempfile
from pathlib import Path

from qafnet.cli import main
from qafnet.config import RunConfig

work = Path(tempfile.mkdtemp())
os.chdir(work)
cfg = RunConfig(seed=1).with_overrides(**{
    "data.n_buses": 3, "data.n_per_bus": 60, "data.n_loc": 8,
    "model.m": 32, "model.d": 8, "model.p": 8, "model.s": 8, "model.fourier_m": 8,
    "model.branch_hidden": (16,), "model.trunk_hidden": (16,), "model.head_hidden": (8,),
    "fed.total_rounds": 200, "fed.k_local": 5, "finetune.max_epochs": 10})
cfg.write("run.ini")
print(Path("run.ini").read_text())

# %%
for cmd in ("gen-data", "pretrain", "finetune", "calibrate", "evaluate"):
    print(f"$ qafnet {cmd} --config run.ini")
    assert main([cmd, "--config", "run.ini"]) == 0

# %% [markdown]
# Stages refuse to overwrite their outputs unless asked, and errors map to
# distinct exit codes (6 for a missing or existing artifact).

# %%
print("exit code", main(["gen-data", "--config", "run.ini"]))

# %% [markdown]
# ## Predicting from an observed curve
#
# `predict` reads a `time,voltage` CSV that covers the observed window and
# writes the interval for every later grid time.

# %%
from qafnet import datagen as D

traj, _ = D.load_trajectories("data/bus02.traj")
seg = D.segment(traj[-1], cfg.dt_obs)
with open("observed.csv", "w") as fh:
    fh.write("time,voltage\n")
    for t, v in zip(seg.u_times, seg.u_values):
        fh.write(f"{float(t)!r},{float(v)!r}\n")
assert main(["predict", "observed.csv", "--config", "run.ini", "--out", "curve.csv"]) == 0
print("\n".join(Path("curve.csv").read_text().splitlines()[:4]))
