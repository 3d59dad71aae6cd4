"""Simulated federated pre-training and single-bus fine-tuning.

Clients run one Adam step per round on their own data.  Every ``k_local``
rounds the server replaces each client's parameters with the uniform mean
over clients.  Only flat parameter vectors cross the client boundary; the
:class:`MessageLog` records every transfer so that can be checked.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import TripletDataset
from .errors import ContractError, FederationError, TrainingError
from .model import QafModel, batch_loss, init_model, loss_and_grads, save_checkpoint
from .numerics import Adam

__all__ = [
    "FedConfig",
    "FineTuneConfig",
    "ClientState",
    "Message",
    "MessageLog",
    "local_round",
    "average_params",
    "pretrain",
    "train_centralized",
    "finetune",
    "dataset_loss",
]


@dataclass(frozen=True)
class FedConfig:
    k_local: int = 5
    total_rounds: int = 1000
    batch_size: int = 64
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    reset_optimizer_on_sync: bool = False

    def __post_init__(self):
        if self.k_local < 1:
            raise ContractError(f"k_local must be >= 1, got {self.k_local}")
        if self.total_rounds < 0 or self.batch_size < 1:
            raise ContractError("total_rounds must be >= 0 and batch_size >= 1")

    def make_optimizer(self) -> Adam:
        return Adam(self.lr, self.beta1, self.beta2, self.eps)


@dataclass(frozen=True)
class FineTuneConfig:
    max_epochs: int = 30
    patience: int = 5
    val_fraction: float = 0.2
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ContractError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ContractError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.max_epochs < 0 or self.batch_size < 1:
            raise ContractError("max_epochs must be >= 0 and batch_size >= 1")


@dataclass
class ClientState:
    bus_id: int
    model: QafModel
    optimizer: Adam
    dataset: TripletDataset
    rng: np.random.Generator
    batch_size: int = 64
    rounds_done: int = 0
    last_loss: float = float("nan")


@dataclass(frozen=True)
class Message:
    round: int
    sender: str
    receiver: str
    kind: str
    n_values: int


@dataclass
class MessageLog:
    messages: list = field(default_factory=list)
    averaging_rounds: list = field(default_factory=list)

    def send(self, round_, sender, receiver, payload):
        payload = np.asarray(payload)
        if payload.ndim != 1 or payload.dtype != np.float64:
            raise FederationError("only flat float64 parameter vectors may cross client boundaries")
        self.messages.append(Message(round_, sender, receiver, "params", int(payload.size)))

    def data_transfers(self) -> int:
        return sum(1 for m in self.messages if m.kind != "params")


def _pick_rows(client: ClientState) -> np.ndarray:
    n = len(client.dataset)
    if client.batch_size >= n:
        return np.arange(n)
    return np.sort(client.rng.choice(n, size=client.batch_size, replace=False))


def local_round(client: ClientState, round_index: int | None = None) -> ClientState:
    """One minibatch Adam step of ``client`` on its own data (in place)."""
    if len(client.dataset) == 0:
        raise ContractError(f"client {client.bus_id} has an empty dataset")
    k = client.rounds_done if round_index is None else round_index
    U, valid, index, t, G = client.dataset.compact_batch(_pick_rows(client))
    loss, grads = loss_and_grads(client.model, U, valid, t, G, index)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss on client {client.bus_id} at round {k}", round_index=k)
    try:
        new = client.optimizer.step(client.model.params, grads)
    except TrainingError as exc:
        raise TrainingError(f"{exc} (client {client.bus_id}, round {k})",
                            leaf_id=exc.leaf_id, round_index=k) from None
    client.model = client.model.with_params(new)
    client.rounds_done += 1
    client.last_loss = loss
    return client


def _check_architectures(clients):
    ref = clients[0].model
    shapes = [(k, a.shape) for k, a in ref.params.items()]
    for c in clients[1:]:
        if c.model.config != ref.config or [(k, a.shape) for k, a in c.model.params.items()] != shapes:
            raise FederationError(f"client {c.bus_id} architecture differs from client {clients[0].bus_id}")


def average_params(clients, log: MessageLog | None = None, round_index: int = -1,
                   reset_optimizer: bool = False) -> np.ndarray:
    """Uniform mean of the clients' flat parameters, written back to each client.

    The mean is taken as ``x0 + sum(x_c - x0) / N`` so averaging clients
    that already agree returns their common value bit for bit.
    """
    if not clients:
        raise ContractError("no clients to average")
    _check_architectures(clients)
    vecs = [c.model.flat_params() for c in clients]
    for c, v in zip(clients, vecs):
        if log is not None:
            log.send(round_index, f"bus{c.bus_id}", "server", v)
    ref = vecs[0]
    acc = np.zeros_like(ref)
    for v in vecs:
        acc += v - ref
    mean = ref + acc / len(vecs)
    for c in clients:
        if log is not None:
            log.send(round_index, "server", f"bus{c.bus_id}", mean)
        c.model = c.model.from_flat(mean)
        if reset_optimizer:
            c.optimizer.reset()
    if log is not None:
        log.averaging_rounds.append(round_index)
    return mean


def _make_clients(fed: FedConfig, datasets, init: QafModel):
    clients = []
    for bus_id, ds in datasets.items():
        if len(ds) == 0:
            raise ContractError(f"bus {bus_id} dataset is empty")
        clients.append(ClientState(int(bus_id), init.copy(), fed.make_optimizer(), ds,
                                   np.random.default_rng([fed.seed, int(bus_id), 0xFED]),
                                   fed.batch_size))
    return clients


def pretrain(fed: FedConfig, datasets: dict, model_config=None, init: QafModel | None = None,
             log: MessageLog | None = None, telemetry_path=None, checkpoint_dir=None,
             threads: int = 1):
    """Federated pre-training over ``datasets`` (bus id -> TripletDataset).

    Returns ``(model, history)`` where ``history`` holds one
    ``(round, bus_id, loss)`` row per client and round.  If ``total_rounds``
    is not a multiple of ``k_local`` a last averaging event closes the run.
    """
    if not datasets:
        raise ContractError("no client datasets")
    if init is None:
        if model_config is None:
            raise ContractError("need either model_config or an initial model")
        init = init_model(model_config, fed.seed)
    clients = _make_clients(fed, datasets, init)
    history = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for k in range(fed.total_rounds):
            if pool is None:
                for c in clients:
                    local_round(c, k)
            else:
                list(pool.map(lambda c: local_round(c, k), clients))
            history.extend((k, c.bus_id, c.last_loss) for c in clients)
            if (k + 1) % fed.k_local == 0:
                average_params(clients, log, k, fed.reset_optimizer_on_sync)
                if checkpoint_dir is not None:
                    save_checkpoint(clients[0].model, Path(checkpoint_dir) / f"pretrain_round{k + 1:06d}.json",
                                    extra={"round": k + 1})
    finally:
        if pool is not None:
            pool.shutdown()
    if fed.total_rounds % fed.k_local != 0:
        average_params(clients, log, fed.total_rounds - 1, fed.reset_optimizer_on_sync)
    if telemetry_path is not None:
        write_telemetry(history, telemetry_path)
    return clients[0].model.copy(), history


def train_centralized(model: QafModel, dataset: TripletDataset, rounds: int, batch_size: int = 64,
                      optimizer: Adam | None = None, seed: int = 0, bus_id: int = 0):
    """Plain single-site training: ``rounds`` calls of :func:`local_round`."""
    client = ClientState(bus_id, model.copy(), optimizer or Adam(), dataset,
                         np.random.default_rng([seed, bus_id, 0xFED]), batch_size)
    losses = []
    for k in range(rounds):
        local_round(client, k)
        losses.append(client.last_loss)
    return client.model, losses


def write_telemetry(history, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "client", "loss"])
        for k, bus, loss in history:
            w.writerow([k, bus, repr(float(loss))])


def dataset_loss(model: QafModel, ds: TripletDataset, chunk: int = 1024) -> float:
    """Mean joint pinball loss over every triplet of ``ds``."""
    total = 0.0
    for start in range(0, len(ds), chunk):
        rows = np.arange(start, min(start + chunk, len(ds)))
        U, valid, index, t, G = ds.compact_batch(rows)
        total += batch_loss(model, U, valid, t, G, index) * rows.size
    return total / len(ds)


def _split(ds: TripletDataset, val_fraction: float, rng):
    if ds.n_trajectories >= 2:
        order = rng.permutation(ds.n_trajectories)
        n_val = min(max(1, int(round(val_fraction * ds.n_trajectories))), ds.n_trajectories - 1)
        return ds.select_trajectories(np.sort(order[n_val:])), ds.select_trajectories(np.sort(order[:n_val]))
    if len(ds) < 2:
        raise ContractError("fine-tuning needs at least two triplets to hold out a validation split")
    order = rng.permutation(len(ds))
    n_val = min(max(1, int(round(val_fraction * len(ds)))), len(ds) - 1)
    return ds.select_triplets(np.sort(order[n_val:])), ds.select_triplets(np.sort(order[:n_val]))


def finetune(base: QafModel, dataset: TripletDataset, cfg: FineTuneConfig, val_loss_fn=None,
             telemetry_path=None):
    """Adam fine-tuning with early stopping on a held-out split.

    The split is made by trajectory when there are at least two.  The
    untouched ``base`` counts as epoch 0, so the returned model is the one
    with the lowest recorded validation loss, ``base`` included.
    ``val_loss_fn(model, val_set, epoch)`` replaces the default metric.

    Returns ``(model, history)`` with ``history`` a list of
    ``(epoch, train_loss, val_loss)``.
    """
    if len(dataset) == 0:
        raise ContractError("target dataset is empty")
    if dataset.inputs.shape[1] != base.config.m:
        raise ContractError(f"dataset has {dataset.inputs.shape[1]} sensors, model expects {base.config.m}")
    rng = np.random.default_rng([cfg.seed, 0xF1E])
    train, val = _split(dataset, cfg.val_fraction, rng)

    def metric(model, epoch):
        if val_loss_fn is not None:
            return float(val_loss_fn(model, val, epoch))
        return dataset_loss(model, val)

    best_model, best_val = base.copy(), metric(base, 0)
    history = [(0, float("nan"), best_val)]
    model = base.copy()
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(train), cfg.batch_size):
            rows = np.sort(order[start:start + cfg.batch_size])
            U, valid, index, t, G = train.compact_batch(rows)
            loss, grads = loss_and_grads(model, U, valid, t, G, index)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss in fine-tuning epoch {epoch}", round_index=epoch)
            model = model.with_params(opt.step(model.params, grads))
            losses.append(loss)
        val_loss = metric(model, epoch)
        history.append((epoch, float(np.mean(losses)), val_loss))
        if val_loss < best_val:
            best_val, best_model, stale = val_loss, model.copy(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if telemetry_path is not None:
        path = Path(telemetry_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for e, tl, vl in history:
                w.writerow([e, repr(tl), repr(vl)])
    return best_model, history
