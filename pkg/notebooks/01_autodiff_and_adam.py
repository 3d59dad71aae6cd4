# %% [markdown]
# # Gradients on a tape, and Adam
#
# Every trainable quantity in the package is a float64 array.  Operations on
# tensors that sit on a `Tape` are recorded, and `Tape.backward` walks the
# record in reverse to produce one gradient per named leaf.

# %%
import numpy as np

from qafnet import numerics as nx

tape = nx.Tape()
w = tape.leaf("w", np.array([[0.5, -1.0], [2.0, 0.3]]))
x = np.array([[1.0, 2.0]])
loss = nx.reduce_sum(nx.tanh(nx.matmul(x, w)))
grads = tape.backward(loss)
print("loss", loss.item())
print("dloss/dw\n", grads["w"])

# %% [markdown]
# Central differences give an independent check of the same gradient.


# %%
def f(params):
    return float(np.sum(np.tanh(x @ params["w"])))


fd = nx.finite_difference_grad(f, {"w": w.data}, "w")
print("max abs difference", np.max(np.abs(fd - grads["w"])))

# %% [markdown]
# The `plain` namespace runs the same ops on bare arrays.  It is what the model
# uses when nothing needs a gradient, and it gives identical numbers.

# %%
same = nx.plain.reduce_sum(nx.plain.tanh(nx.plain.matmul(x, w.data)))
print("taped", loss.item(), "plain", float(same))

# %% [markdown]
# ## Adam
#
# Minimise `(w - 3)^2` from `w = 0`.  `Adam.step` returns new arrays and keeps
# the moment estimates internally.

# %%
opt = nx.Adam(lr=0.1)
params = {"w": np.array([0.0])}
for step in range(100):
    t = nx.Tape()
    leaf = t.leaf("w", params["w"])
    d = leaf - 3.0
    params = opt.step(params, t.backward(nx.reduce_sum(d * d)))
print("w after 100 steps", params["w"][0])
