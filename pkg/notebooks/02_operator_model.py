# %% [markdown]
# # The quantile operator network
#
# The branch network reads the observed part of a voltage curve, sampled at
# `m` fixed sensors and zero padded after the last observation.  The trunk
# network reads a query time through fixed Fourier features.  Two pairs of
# heads turn the branch and trunk bases into a lower and an upper quantile.

# %%
import numpy as np

from qafnet import datagen as D
from qafnet import model as M

cfg = M.ModelConfig(m=64, patch=4, d=16, p=16, s=16, fourier_m=16, branch_hidden=(32,),
                    trunk_hidden=(32, 32), head_hidden=(16,), t_max_input=D.default_t_max(0.4))
model = M.init_model(cfg, seed=0)
print("parameters", model.n_params, "quantile levels", cfg.taus)

# %% [markdown]
# ## Padding an observed trajectory

# %%
traj = D.generate_bus(seed=0, bus_id=0, n=1)[0]
pin = D.pad_input(traj, 0.4, cfg.sensor_times())
print("sensors", cfg.m, "observed", pin.valid_len, "tail zeros", np.all(pin.values[pin.valid_len:] == 0))

# %% [markdown]
# ## Bases and raw quantiles at a few query times

# %%
phi = M.branch_forward(model, pin)
psi = M.trunk_forward(model, 3.0)
print("phi", phi.shape, "psi", psi.shape)
for t in (2.5, 4.0, 8.0):
    lo, hi = M.predict_quantiles(model, pin, t)
    print(f"t={t:4.1f}  lo={lo:+.4f}  hi={hi:+.4f}")

# %% [markdown]
# An untrained model can put the lower quantile above the upper one.
# `predict_interval` returns the order-fixed interval and flags such crossings.

# %%
times = np.arange(2.5, 8.5, 0.5)
lo, hi, crossed = M.predict_interval(model, pin.values[None, :], [pin.valid_len], times,
                                     np.zeros(times.size, dtype=np.int64))
print("crossing rate", crossed.mean())

# %% [markdown]
# ## Joint pinball loss and its gradient

# %%
ds = D.assemble_triplets([traj], 0.4, cfg.m, 8, np.random.default_rng(0))
U, valid, index, t, G = ds.compact_batch()
loss, grads = M.loss_and_grads(model, U, valid, t, G, index)
print("loss", loss, "largest gradient entry", max(float(np.max(np.abs(g))) for g in grads.values()))
