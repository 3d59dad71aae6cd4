"""Attention/Fourier DeepONet with two quantile heads.

Layout of one forward pass for a batch of ``n`` (input function, query time)
pairs::

    u (n, m) --patches--> (n, T, patch) --tanh embed--> (n, T, d)
             --self-attention--> (n, T, d) --pool--> (n, T*d) --branch MLP--> phi (n, p)
    t (n,)   --[sin(Bt), cos(Bt)]--> (n, 2F) --trunk MLP--> psi (n, p)

    lo = <head_lo_branch(phi), head_lo_trunk(psi)>     (tau = alpha / 2)
    hi = <head_hi_branch(phi), head_hi_trunk(psi)>     (tau = 1 - alpha / 2)

Tokens are non-overlapping windows of ``patch`` consecutive sensors, so
``T = m / patch``.  The embedding is nonlinear on purpose: with an affine
embedding of scalar tokens every value row lies on one line and the pooled
attention output collapses to a function of a single number.

Pooling defaults to flattening the ``T x d`` attention output, which keeps
token order; ``pooling="mean"`` averages over tokens instead and makes the
branch blind to *where* in time a value occurred (fault onset, clearing).

The Fourier matrix ``B`` is drawn once at construction and is not a
trainable parameter; it lives on the model next to ``params`` and never
enters an optimizer.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ArtifactError, ConfigError, ContractError, DomainError, ShapeError

__all__ = [
    "ModelConfig",
    "QafModel",
    "PaddedInput",
    "init_model",
    "fourier_features",
    "branch_forward",
    "attention_output",
    "trunk_forward",
    "forward",
    "predict_quantiles",
    "predict_batch",
    "predict_interval",
    "pinball_loss",
    "batch_loss",
    "loss_and_grads",
    "save_checkpoint",
    "load_checkpoint",
    "file_sha256",
]

CHECKPOINT_FORMAT = "qafnet-checkpoint"
CHECKPOINT_VERSION = 1

HEADS = ("head_lo_branch", "head_lo_trunk", "head_hi_branch", "head_hi_trunk")


@dataclass(frozen=True)
class ModelConfig:
    m: int = 256
    patch: int = 4
    d: int = 16
    p: int = 32
    s: int = 16
    fourier_m: int = 32
    fourier_sigma: float = 2.0
    branch_hidden: tuple = (64,)
    trunk_hidden: tuple = (64, 64)
    head_hidden: tuple = (32,)
    alpha: float = 0.05
    t_max_input: float = 2.5
    horizon: float = 8.5
    attention_mask: bool = False
    pooling: str = "flatten"

    def __post_init__(self):
        for name in ("branch_hidden", "trunk_hidden", "head_hidden"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        if min(self.m, self.patch, self.d, self.p, self.s, self.fourier_m) < 1:
            raise ConfigError("m, patch, d, p, s and fourier_m must all be >= 1")
        if self.pooling not in ("flatten", "mean"):
            raise ConfigError(f"pooling must be 'flatten' or 'mean', got {self.pooling!r}")
        if self.m % self.patch:
            raise ConfigError(f"m = {self.m} is not a multiple of patch = {self.patch}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.fourier_sigma > 0.0:
            raise ConfigError(f"fourier_sigma must be > 0, got {self.fourier_sigma}")
        if not 0.0 < self.t_max_input < self.horizon:
            raise ConfigError(
                f"need 0 < t_max_input < horizon, got {self.t_max_input} and {self.horizon}")

    @property
    def n_tokens(self) -> int:
        return self.m // self.patch

    @property
    def pooled_width(self) -> int:
        return self.d * (self.n_tokens if self.pooling == "flatten" else 1)

    @property
    def taus(self) -> tuple[float, float]:
        return self.alpha / 2.0, 1.0 - self.alpha / 2.0

    def sensor_times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_max_input, self.m)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class PaddedInput:
    """Input function on the fixed sensor grid, zero past ``valid_len``."""

    values: np.ndarray
    valid_len: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ShapeError(f"padded input must be 1-D, got shape {values.shape}")
        if not 1 <= self.valid_len <= values.size:
            raise ContractError(f"valid_len {self.valid_len} outside [1, {values.size}]")
        if np.any(values[self.valid_len:] != 0.0):
            raise ContractError("padded tail must be exactly zero")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid_len", int(self.valid_len))

    @property
    def m(self) -> int:
        return self.values.size


@dataclass
class QafModel:
    config: ModelConfig
    params: dict
    trunk_B: np.ndarray
    seed: int = 0

    @property
    def param_names(self) -> list[str]:
        return list(self.params)

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.params.values())

    def copy(self) -> "QafModel":
        return QafModel(self.config, {k: a.copy() for k, a in self.params.items()},
                        self.trunk_B.copy(), self.seed)

    def with_params(self, params: dict) -> "QafModel":
        if list(params) != list(self.params):
            raise ContractError("parameter names/order differ from the model's")
        return QafModel(self.config, params, self.trunk_B, self.seed)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.params.values()])

    def from_flat(self, vec: np.ndarray) -> "QafModel":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params:
            raise ShapeError(f"flat vector has {vec.size} entries, model has {self.n_params}")
        out, i = {}, 0
        for name, a in self.params.items():
            out[name] = vec[i:i + a.size].reshape(a.shape).copy()
            i += a.size
        return self.with_params(out)


def _mlp_shapes(prefix, sizes):
    return [(f"{prefix}.{i}", sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1)]


def _layer_plan(cfg: ModelConfig):
    plan = [("attn.wq", cfg.d, cfg.d), ("attn.wk", cfg.d, cfg.d), ("attn.wv", cfg.d, cfg.d)]
    plan += _mlp_shapes("branch", [cfg.pooled_width, *cfg.branch_hidden, cfg.p])
    plan += _mlp_shapes("trunk", [2 * cfg.fourier_m, *cfg.trunk_hidden, cfg.p])
    for head in HEADS:
        plan += _mlp_shapes(head, [cfg.p, *cfg.head_hidden, cfg.s])
    return plan


def init_model(config: ModelConfig, seed: int = 0) -> QafModel:
    """Glorot-uniform weights, zero biases, Fourier matrix from N(0, sigma^2)."""
    rng = np.random.default_rng(seed)
    trunk_B = rng.normal(0.0, config.fourier_sigma, size=(config.fourier_m, 1))
    params = {
        "embed.w": nx.glorot_uniform(rng, config.patch, config.d),
        "embed.b": np.zeros(config.d),
    }
    for name, fan_in, fan_out in _layer_plan(config):
        params[name if name.startswith("attn.") else f"{name}.w"] = nx.glorot_uniform(rng, fan_in, fan_out)
        if not name.startswith("attn."):
            params[f"{name}.b"] = np.zeros(fan_out)
    return QafModel(config, params, trunk_B, seed)


def _mlp(P, prefix, x, ops=nx):
    i = 0
    while f"{prefix}.{i}.w" in P:
        x = ops.matmul(x, P[f"{prefix}.{i}.w"]) + P[f"{prefix}.{i}.b"]
        if f"{prefix}.{i + 1}.w" in P:
            x = ops.tanh(x)
        i += 1
    return x


def fourier_features(trunk_B: np.ndarray, t) -> np.ndarray:
    """``[sin(B t), cos(B t)]`` for each query time; shape ``(n, 2F)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    bt = t[:, None] * trunk_B[:, 0][None, :]
    return np.concatenate([np.sin(bt), np.cos(bt)], axis=1)


def _check_times(cfg: ModelConfig, t: np.ndarray):
    bad = (t <= 0.0) | (t > cfg.horizon) | ~np.isfinite(t)
    if np.any(bad):
        raise DomainError(f"query time {t[bad][0]} outside the output domain (0, {cfg.horizon}]")


def _as_batch(cfg: ModelConfig, u, valid_len=None):
    if isinstance(u, PaddedInput):
        U, valid = u.values[None, :], np.array([u.valid_len])
    else:
        U = np.atleast_2d(np.asarray(u, dtype=np.float64))
        valid = (np.full(U.shape[0], U.shape[1]) if valid_len is None
                 else np.atleast_1d(np.asarray(valid_len, dtype=np.int64)))
    if U.shape[1] != cfg.m:
        raise ShapeError(f"expected {cfg.m} sensors, got {U.shape[1]}")
    return U, valid


def _tokens(cfg, U, valid):
    n = U.shape[0]
    tokens = U.reshape(n, cfg.n_tokens, cfg.patch)
    keep = np.arange(cfg.n_tokens)[None, :] * cfg.patch < valid[:, None]
    return tokens, keep


def _attention(cfg, P, U, valid, ops=nx):
    tokens, keep = _tokens(cfg, U, valid)
    x = ops.tanh(ops.matmul(tokens, P["embed.w"]) + P["embed.b"])
    q = ops.matmul(x, P["attn.wq"])
    k = ops.matmul(x, P["attn.wk"])
    v = ops.matmul(x, P["attn.wv"])
    scores = ops.matmul(q, ops.swap_last(k))
    mask = keep[:, None, :] if cfg.attention_mask else None
    return ops.matmul(ops.softmax_rows(scores, mask=mask), v), keep


def _branch(cfg, P, U, valid, ops=nx):
    o, keep = _attention(cfg, P, U, valid, ops)
    if cfg.pooling == "flatten":
        if cfg.attention_mask:
            o = ops.mul(o, keep[:, :, None])
        pooled = ops.reshape(o, (o.shape[0], cfg.pooled_width))
    elif cfg.attention_mask:
        n_keep = keep.sum(axis=1)
        pooled = ops.mul(ops.reduce_sum(ops.mul(o, keep[:, :, None]), axis=1), (1.0 / n_keep)[:, None])
    else:
        pooled = ops.reduce_mean(o, axis=1)
    return _mlp(P, "branch", pooled, ops)


def attention_output(model: QafModel, u) -> np.ndarray:
    """Self-attention output ``softmax(Q K^T) V`` for one input, shape ``(T, d)``."""
    U, valid = _as_batch(model.config, u)
    return _attention(model.config, model.params, U, valid, nx.plain)[0][0].copy()


def _trunk(model, P, t, ops=nx):
    return _mlp(P, "trunk", fourier_features(model.trunk_B, t), ops)


def _ops_for(P):
    return nx if any(isinstance(a, nx.Tensor) for a in P.values()) else nx.plain


def _forward(model: QafModel, U, valid_len, t, P, index=None, with_mean=False):
    cfg = model.config
    ops = _ops_for(P)
    U, valid = _as_batch(cfg, U, valid_len)
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    n = U.shape[0] if index is None else len(index)
    if t.shape[0] != n:
        raise ShapeError(f"{n} inputs but {t.shape[0]} query times")
    _check_times(cfg, t)

    phi = _branch(cfg, P, U, valid, ops)
    if index is not None:
        phi = ops.take_rows(phi, index)
    psi = _trunk(model, P, t, ops)
    lo = ops.reduce_sum(_mlp(P, "head_lo_branch", phi, ops) * _mlp(P, "head_lo_trunk", psi, ops), axis=1)
    hi = ops.reduce_sum(_mlp(P, "head_hi_branch", phi, ops) * _mlp(P, "head_hi_trunk", psi, ops), axis=1)
    if with_mean:
        return lo, hi, ops.reduce_sum(phi * psi, axis=1)
    return lo, hi


def forward(model: QafModel, U, valid_len, t, params=None, index=None, with_mean=False):
    """Batched forward pass; returns ``(lo, hi)`` tensors of shape ``(n,)``.

    ``params`` may map names to tape leaves; by default the model's own
    arrays are used and nothing is recorded.  When ``index`` is given, row
    ``i`` of the output pairs input ``U[index[i]]`` with ``t[i]`` and the
    branch runs once per row of ``U``.  With ``with_mean`` a third tensor,
    the plain ``<phi, psi>`` output, is appended for diagnostics.
    """
    P = model.params if params is None else params
    out = _forward(model, U, valid_len, t, P, index, with_mean)
    return tuple(nx.as_tensor(x) for x in out)


def branch_forward(model: QafModel, u) -> np.ndarray:
    """Branch basis ``phi`` (length p) for one padded input."""
    U, valid = _as_batch(model.config, u)
    if U.shape[0] != 1:
        raise ShapeError("branch_forward takes a single input function")
    return _branch(model.config, model.params, U, valid, nx.plain)[0].copy()


def trunk_forward(model: QafModel, t: float) -> np.ndarray:
    """Trunk basis ``psi`` (length p) for one query time."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    _check_times(model.config, t)
    return _trunk(model, model.params, t, nx.plain)[0].copy()


def predict_batch(model: QafModel, U, valid_len, t, index=None):
    return _forward(model, U, valid_len, t, model.params, index)


def predict_quantiles(model: QafModel, u, t: float) -> tuple[float, float]:
    """Raw ``(lo, hi)`` quantile estimates; ``lo <= hi`` is not enforced."""
    lo, hi = predict_batch(model, u, None, [t])
    return float(lo[0]), float(hi[0])


def predict_interval(model: QafModel, U, valid_len, t, index=None):
    """Order-fixed interval ``(min(lo, hi), max(lo, hi))`` plus the crossing mask."""
    lo, hi = predict_batch(model, U, valid_len, t, index)
    return np.minimum(lo, hi), np.maximum(lo, hi), lo > hi


def pinball_loss(tau: float, y, yhat):
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"quantile level must lie in (0, 1), got {tau}")
    r = np.asarray(y, dtype=np.float64) - np.asarray(yhat, dtype=np.float64)
    out = np.where(r > 0, tau * r, (1.0 - tau) * -r)
    return float(out) if out.ndim == 0 else out


def _joint_loss(model, U, valid, t, G, params, index=None):
    G = np.atleast_1d(np.asarray(G, dtype=np.float64))
    if G.size == 0:
        raise ContractError("batch must be nonempty")
    lo_tau, hi_tau = model.config.taus
    P = model.params if params is None else params
    ops = _ops_for(P)
    lo, hi = _forward(model, U, valid, t, P, index)
    return ops.reduce_mean(ops.pinball(G, lo, lo_tau) + ops.pinball(G, hi, hi_tau))


def batch_loss(model: QafModel, U, valid_len, t, G, index=None) -> float:
    """Mean over triplets of the lower- plus upper-quantile pinball losses."""
    return float(_joint_loss(model, U, valid_len, t, G, None, index))


def loss_and_grads(model: QafModel, U, valid_len, t, G, index=None):
    tape = nx.Tape()
    leaves = {name: tape.leaf(name, a) for name, a in model.params.items()}
    loss = _joint_loss(model, U, valid_len, t, G, leaves, index)
    return loss.item(), tape.backward(loss)


def _floats(a) -> list:
    return [float(x) for x in np.asarray(a, dtype=np.float64).reshape(-1)]


def save_checkpoint(model: QafModel, path, extra: dict | None = None) -> str:
    """Write a JSON checkpoint and return its sha256.

    Floats are written with ``repr`` precision so loading is bit-exact.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "seed": int(model.seed),
        "trunk_B": {"shape": list(model.trunk_B.shape), "data": _floats(model.trunk_B)},
        "params": [{"name": k, "shape": list(a.shape), "data": _floats(a)}
                   for k, a in model.params.items()],
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, separators=(",", ":")) + "\n")
    return file_sha256(path)


def load_checkpoint(path) -> QafModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ArtifactError(f"checkpoint not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"checkpoint {path} is not valid JSON: {exc}") from None
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ArtifactError(f"{path}: unsupported checkpoint format/version")
    config = ModelConfig.from_dict(doc["config"])
    B = np.array(doc["trunk_B"]["data"], dtype=np.float64).reshape(doc["trunk_B"]["shape"])
    params = {e["name"]: np.array(e["data"], dtype=np.float64).reshape(e["shape"])
              for e in doc["params"]}
    return QafModel(config, params, B, doc["seed"])


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
