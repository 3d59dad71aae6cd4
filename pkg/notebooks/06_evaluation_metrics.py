# %% [markdown]
# # Coverage and width
#
# PICP is the fraction of true values inside the closed predicted interval.
# PINAW is the mean interval width divided by the range of the true values.
# Both are computed per test trajectory and then averaged.

# %%
import numpy as np

from qafnet import conformal as C
from qafnet import datagen as D
from qafnet import evaluation as E
from qafnet import model as M

y = np.array([1.0, 1.2, 0.9, 1.1])
lo, hi = y - 0.05, y + 0.05
lo[2] = 0.95
print("PICP", E.picp(y, lo, hi), "PINAW", E.pinaw(y, lo, hi))

# %% [markdown]
# Widening every interval by `q` on both sides adds `2 q / range` to PINAW, up
# to rounding, and can only raise PICP.

# %%
q = 0.02
print("PINAW gain", E.pinaw(y, lo - q, hi + q) - E.pinaw(y, lo, hi), "expected", 2 * q / (y.max() - y.min()))

# %% [markdown]
# ## Reports for a model on held-out trajectories

# %%
cfg = M.ModelConfig(m=16, patch=4, d=4, p=4, s=4, fourier_m=4, branch_hidden=(8,), trunk_hidden=(8,),
                    head_hidden=(4,), t_max_input=D.default_t_max(0.4))
model = M.init_model(cfg, 0)
trajs = D.generate_bus(5, 0, 10)
raw = E.evaluate_model(model, None, trajs, 0.4)
cal = E.evaluate_model(model, C.CalibrationResult(0.05, np.zeros(1), 1, 0.05, 1), trajs, 0.4)
print(f"raw        PICP {raw.mean_picp:.3f}  PINAW {raw.mean_pinaw:.3f}  crossing {raw.mean_crossing_rate:.3f}")
print(f"calibrated PICP {cal.mean_picp:.3f}  PINAW {cal.mean_pinaw:.3f}")

# %% [markdown]
# `write_report` stores one row per trajectory plus a mean footer;
# `write_plot_data` stores the curve of one trajectory for plotting elsewhere.

# %%
import tempfile
from pathlib import Path

out = Path(tempfile.mkdtemp())
E.write_report(raw, out / "report.csv")
E.write_plot_data(model, None, trajs[0], 0.4, out / "curve.csv")
print((out / "report.csv").read_text().splitlines()[-1])
print((out / "curve.csv").read_text().splitlines()[0])
