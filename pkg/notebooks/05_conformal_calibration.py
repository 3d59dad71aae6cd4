# %% [markdown]
# # Split conformal calibration
#
# The score of a calibration triplet is how far its true value lies outside
# the raw interval, negative when it lies inside.  The offset `q_hat` is the
# `ceil((n + 1)(1 - alpha))`-th smallest score.  Widening every interval by
# `q_hat` on both sides gives marginal coverage of at least `1 - alpha` on
# exchangeable data, whatever the model.

# %%
import numpy as np

from qafnet import conformal as C
from qafnet import datagen as D
from qafnet import federated as F
from qafnet import model as M
from qafnet import numerics as nx

alpha, dt_obs, m = 0.05, 0.4, 16
print("smallest calibration set for alpha=0.05:", C.min_calibration_size(alpha))
q, k, _ = C.conformal_quantile(np.arange(1.0, 100.0), alpha)
print("scores 1..99 give rank", k, "and q_hat", q)

# %% [markdown]
# ## A deliberately poor model
#
# A small model trained briefly gives raw intervals that miss their target.


# %%
def iid_triplets(seed, n):
    # one query per trajectory keeps the triplets exchangeable
    return D.assemble_triplets(D.generate_bus(seed, 0, n), dt_obs, m, 1, np.random.default_rng(seed))


cfg = M.ModelConfig(m=m, patch=4, d=4, p=4, s=4, fourier_m=4, branch_hidden=(8,), trunk_hidden=(8,),
                    head_hidden=(4,), t_max_input=D.default_t_max(dt_obs))
train = D.assemble_triplets(D.generate_bus(100, 0, 100), dt_obs, m, 8, np.random.default_rng(100))
model, _ = F.train_centralized(M.init_model(cfg, 0), train, 200, batch_size=64, optimizer=nx.Adam(lr=1e-2))

cal, test = iid_triplets(1, 300), iid_triplets(2, 3000)
U, valid, index, t, G = test.compact_batch()
lo, hi, _ = M.predict_interval(model, U, valid, t, index)
print("raw coverage", np.mean((G >= lo) & (G <= hi)))

# %% [markdown]
# ## Calibrate and re-check

# %%
res = C.calibrate(model, cal, alpha)
lo_c, hi_c = C.calibrated_interval(model, res, U, t, valid, index)
print(f"q_hat {res.q_hat:+.4f} from {res.n_cal} scores (rank {res.k})")
print("calibrated coverage", np.mean((G >= lo_c) & (G <= hi_c)))

# %% [markdown]
# Triplets from the same trajectory share an input and are not exchangeable.
# The trajectory mode keeps one random triplet per trajectory instead.

# %%
grouped = D.assemble_triplets(D.generate_bus(3, 0, 60), dt_obs, m, 8, np.random.default_rng(3))
res_traj = C.calibrate(model, grouped, alpha, mode="trajectory", rng=np.random.default_rng(0))
print("trajectory mode uses", res_traj.n_cal, "scores; q_hat", res_traj.q_hat)

# %% [markdown]
# The guarantee holds on average over calibration draws; a single draw can
# land a little below `1 - alpha`.  Splitting one large pool of exchangeable
# triplets at random many times shows the average.

# %%
Up, vp, ip, tp, Gp = iid_triplets(7, 20000).compact_batch()
lo_p, hi_p, _ = M.predict_interval(model, Up, vp, tp, ip)
pool_scores = np.maximum(lo_p - Gp, Gp - hi_p)
rng = np.random.default_rng(0)
covers = []
for _ in range(500):
    perm = rng.permutation(pool_scores.size)
    q_hat = C.conformal_quantile(pool_scores[perm[:300]], alpha)[0]
    covers.append(np.mean(pool_scores[perm[300:3300]] <= q_hat))
print(f"coverage over 500 random splits: mean {np.mean(covers):.4f}, 5th percentile {np.quantile(covers, 0.05):.4f}")
