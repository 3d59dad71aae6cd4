# %% [markdown]
# # Synthetic post-fault voltage trajectories
#
# Each trajectory has three stages: a flat pre-fault level, a depressed level
# while the fault is on, and a damped oscillation towards a new level after
# clearing.  Unstable scenarios have negative damping and are clipped.  Buses
# differ through a `BusProfile` that shifts load, depth and damping.

# %%
import numpy as np

from qafnet import datagen as D

profiles = D.make_bus_profiles(3, seed=0)
for b, prof in enumerate(profiles):
    print(b, prof)

# %%
trajs = D.generate_bus(seed=0, bus_id=1, n=200, profile=profiles[1])
stable = np.mean([tr.scenario.stable for tr in trajs])
duration = np.array([tr.scenario.t_cl - tr.scenario.t_f for tr in trajs])
print(f"stable fraction {stable:.2f}, fault duration {duration.min():.3f} to {duration.max():.3f} s")

# %% [markdown]
# ## One trajectory, stage by stage

# %%
tr = trajs[0]
s = tr.scenario
for label, mask in (("pre-fault", tr.times < s.t_f), ("fault on", (tr.times >= s.t_f) & (tr.times < s.t_cl)),
                    ("post-fault", tr.times >= s.t_cl)):
    v = tr.values[mask]
    print(f"{label:10s} {mask.sum():4d} samples  min {v.min():.3f}  max {v.max():.3f}")

# %% [markdown]
# ## Observed input and unobserved target
#
# The model sees everything up to `t_cl + dt_obs` and predicts the rest.

# %%
seg = D.segment(tr, dt_obs=0.4)
print("input ends at", seg.u_times[-1], "target starts at", seg.v_times[0])

# %% [markdown]
# ## Training triplets
#
# Each trajectory contributes `n_loc` triplets `(u, t, G(u)(t))` with query
# times drawn from the unobserved window.  The padded input is stored once per
# trajectory.

# %%
ds = D.assemble_triplets(trajs, 0.4, m=64, n_loc=16, rng=np.random.default_rng(0))
print("triplets", len(ds), "trajectories", ds.n_trajectories, "input matrix", ds.inputs.shape)
