# %% [markdown]
# # Federated pre-training and fine-tuning
#
# Neighbour buses train local copies of one model on their own triplets.
# Every `k_local` rounds the server replaces all copies by their uniform mean.
# Only flat parameter vectors cross client boundaries; the message log refuses
# anything else.  The pre-trained model is then fine-tuned on the target bus
# with early stopping on a held-out split.

# %%
import numpy as np

from qafnet import datagen as D
from qafnet import federated as F
from qafnet import model as M

dt_obs, m = 0.4, 32
cfg = M.ModelConfig(m=m, patch=4, d=8, p=8, s=8, fourier_m=8, branch_hidden=(16,), trunk_hidden=(16,),
                    head_hidden=(8,), t_max_input=D.default_t_max(dt_obs))
profiles = D.make_bus_profiles(4, seed=1)
data = {}
for b in range(3):
    trajs = D.generate_bus(1, b, 60, profiles[b])
    data[b] = D.assemble_triplets(trajs, dt_obs, m, 8, np.random.default_rng([1, b]))
target = D.assemble_triplets(D.generate_bus(1, 3, 60, profiles[3]), dt_obs, m, 8, np.random.default_rng([1, 3]))

# %%
log = F.MessageLog()
fed = F.FedConfig(k_local=5, total_rounds=300, batch_size=64, lr=5e-3, seed=1)
base, history = F.pretrain(fed, data, cfg, log=log)
print("averaging events", len(log.averaging_rounds), "messages", len(log.messages),
      "data records moved", log.data_transfers())
for k in (0, 99, 199, 299):
    losses = [loss for r, _, loss in history if r == k]
    print(f"round {k:3d}  mean client loss {np.mean(losses):.4f}")

# %% [markdown]
# ## Fine-tuning on the target bus
#
# Epoch 0 is the pre-trained model itself, so fine-tuning can never return a
# model that validates worse than its starting point.

# %%
tuned, ft_history = F.finetune(base, target, F.FineTuneConfig(max_epochs=15, patience=3, lr=1e-3, seed=1))
for epoch, train_loss, val_loss in ft_history:
    print(f"epoch {epoch:2d}  train {train_loss:.4f}  val {val_loss:.4f}")
print("target loss before", F.dataset_loss(base, target), "after", F.dataset_loss(tuned, target))
