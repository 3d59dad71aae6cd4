import numpy as np
import pytest

from qafnet import federated as F
from qafnet import numerics as nx
from qafnet.datagen import TripletDataset
from qafnet.errors import ContractError, FederationError, TrainingError
from qafnet.model import init_model, loss_and_grads

from conftest import tiny_config


def _client(model, ds, bus=0, lr=1e-2, batch=10_000):
    return F.ClientState(bus, model.copy(), nx.Adam(lr=lr), ds, np.random.default_rng(bus), batch)


def _fake_clients(vectors, tiny_model):
    out = []
    for i, v in enumerate(vectors):
        model = tiny_model.from_flat(np.asarray(v, dtype=np.float64))
        out.append(F.ClientState(i, model, nx.Adam(), None, np.random.default_rng(i)))
    return out


def test_configs_validate():
    with pytest.raises(ContractError):
        F.FedConfig(k_local=0)
    with pytest.raises(ContractError):
        F.FineTuneConfig(patience=0)
    with pytest.raises(ContractError):
        F.FineTuneConfig(val_fraction=1.0)


# ---------------------------------------------------------------- local rounds

def test_local_round_equals_direct_adam_step(tiny_model, small_bus_data):
    ds = small_bus_data[0]
    client = _client(tiny_model, ds)
    F.local_round(client)
    U, valid, index, t, G = ds.compact_batch()
    _, grads = loss_and_grads(tiny_model, U, valid, t, G, index)
    expected = nx.Adam(lr=1e-2).step(tiny_model.params, grads)
    for k in expected:
        assert np.array_equal(client.model.params[k], expected[k])
    assert client.rounds_done == 1


def test_zero_loss_batch_leaves_params(small_bus_data):
    cfg = tiny_config(s=1)
    model = init_model(cfg, 0)
    params = dict(model.params)
    for head, c in zip(("head_lo_branch", "head_lo_trunk", "head_hi_branch", "head_hi_trunk"),
                       (1.0, 0.9, 1.0, 0.9)):
        params[f"{head}.1.w"] = np.zeros_like(params[f"{head}.1.w"])
        params[f"{head}.1.b"] = np.full(1, c)
    model = model.with_params(params)
    ds = small_bus_data[0].select_triplets([0, 1, 2])
    ds = TripletDataset(ds.inputs, ds.valid_len, ds.index, ds.t, np.full(3, 0.9), ds.traj_bus, ds.traj_id, ds.meta)
    client = _client(model, ds)
    F.local_round(client)
    assert np.array_equal(client.model.flat_params(), model.flat_params())


def test_vanishing_lr_means_no_drift(tiny_model, small_bus_data):
    client = _client(tiny_model, small_bus_data[0], lr=1e-300)
    F.local_round(client)
    F.local_round(client)
    assert np.max(np.abs(client.model.flat_params() - tiny_model.flat_params())) < 1e-290


def test_local_round_only_touches_its_client(tiny_model, small_bus_data):
    a, b = _client(tiny_model, small_bus_data[0]), _client(tiny_model, small_bus_data[1], bus=1)
    F.local_round(a)
    assert np.array_equal(b.model.flat_params(), tiny_model.flat_params())


def test_non_finite_loss_reports_round(tiny_model, small_bus_data):
    ds = small_bus_data[0]
    bad = TripletDataset(ds.inputs, ds.valid_len, ds.index, ds.t, np.full(len(ds), np.nan),
                         ds.traj_bus, ds.traj_id, ds.meta)
    with pytest.raises(TrainingError) as exc:
        F.local_round(_client(tiny_model, bad), round_index=7)
    assert exc.value.round_index == 7


# ---------------------------------------------------------------- averaging

def test_average_two_clients(tiny_model):
    n = tiny_model.n_params
    clients = _fake_clients([np.r_[1.0, 3.0, np.zeros(n - 2)], np.r_[3.0, 5.0, np.zeros(n - 2)]], tiny_model)
    mean = F.average_params(clients)
    assert np.array_equal(mean[:2], [2.0, 4.0])
    for c in clients:
        assert np.array_equal(c.model.flat_params(), mean)


def test_average_single_client_is_identity(tiny_model):
    clients = _fake_clients([tiny_model.flat_params()], tiny_model)
    assert np.array_equal(F.average_params(clients), tiny_model.flat_params())


def test_average_matches_loop_oracle(tiny_model):
    rng = np.random.default_rng(0)
    vecs = [rng.normal(size=tiny_model.n_params) for _ in range(5)]
    mean = F.average_params(_fake_clients(vecs, tiny_model))
    oracle = np.array([sum(v[i] for v in vecs) / 5 for i in range(tiny_model.n_params)])
    np.testing.assert_allclose(mean, oracle, rtol=1e-13, atol=1e-15)


def test_average_is_idempotent(tiny_model):
    rng = np.random.default_rng(1)
    clients = _fake_clients([rng.normal(size=tiny_model.n_params) for _ in range(3)], tiny_model)
    first = F.average_params(clients)
    assert np.array_equal(F.average_params(clients), first)


def test_architecture_mismatch(tiny_model):
    other = init_model(tiny_config(p=5), 0)
    clients = [F.ClientState(0, tiny_model, nx.Adam(), None, None), F.ClientState(1, other, nx.Adam(), None, None)]
    with pytest.raises(FederationError):
        F.average_params(clients)


def test_message_log_rejects_records():
    log = F.MessageLog()
    with pytest.raises(FederationError):
        log.send(0, "bus0", "server", np.ones((2, 2)))
    with pytest.raises(FederationError):
        log.send(0, "bus0", "server", np.arange(3))


# ---------------------------------------------------------------- pretraining

def test_single_averaging_when_k_equals_rounds(small_bus_data):
    log = F.MessageLog()
    F.pretrain(F.FedConfig(k_local=4, total_rounds=4, batch_size=8), {0: small_bus_data[0], 1: small_bus_data[1]},
               tiny_config(), log=log)
    assert log.averaging_rounds == [3]


def test_trailing_rounds_get_final_average(small_bus_data):
    log = F.MessageLog()
    F.pretrain(F.FedConfig(k_local=3, total_rounds=7, batch_size=8), {0: small_bus_data[0], 1: small_bus_data[1]},
               tiny_config(), log=log)
    assert log.averaging_rounds == [2, 5, 6]


def test_two_clients_hand_trace(small_bus_data):
    # 2 clients, K = 2, 2 rounds of full-batch Adam, then one mean
    cfg = tiny_config()
    init = init_model(cfg, 4)
    data = {0: small_bus_data[0].select_trajectories([0, 1]), 1: small_bus_data[1].select_trajectories([0, 1])}
    fed = F.FedConfig(k_local=2, total_rounds=2, batch_size=10_000, lr=1e-2, seed=4)
    got, history = F.pretrain(fed, data, init=init)
    finals = []
    for b, ds in data.items():
        params, opt = init.params, nx.Adam(lr=1e-2)
        U, valid, index, t, G = ds.compact_batch()
        for _ in range(2):
            _, g = loss_and_grads(init.with_params(params), U, valid, t, G, index)
            params = opt.step(params, g)
        finals.append(init.with_params(params).flat_params())
    np.testing.assert_allclose(got.flat_params(), (finals[0] + finals[1]) / 2, rtol=1e-13, atol=1e-16)
    assert [(r, c) for r, c, _ in history] == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_parallel_schedule_matches_serial(small_bus_data):
    fed = F.FedConfig(k_local=2, total_rounds=6, batch_size=8, seed=1)
    data = {b: small_bus_data[b] for b in (0, 1, 2)}
    serial, _ = F.pretrain(fed, data, tiny_config())
    parallel, _ = F.pretrain(fed, data, tiny_config(), threads=3)
    assert np.array_equal(serial.flat_params(), parallel.flat_params())


def test_reset_optimizer_option(small_bus_data):
    fed = F.FedConfig(k_local=1, total_rounds=3, batch_size=8, reset_optimizer_on_sync=True)
    data = {0: small_bus_data[0], 1: small_bus_data[1]}
    model, _ = F.pretrain(fed, data, tiny_config())
    kept, _ = F.pretrain(F.FedConfig(k_local=1, total_rounds=3, batch_size=8), data, tiny_config())
    assert not np.array_equal(model.flat_params(), kept.flat_params())


def test_telemetry_and_round_checkpoints(tmp_path, small_bus_data):
    fed = F.FedConfig(k_local=2, total_rounds=4, batch_size=8)
    F.pretrain(fed, {0: small_bus_data[0], 1: small_bus_data[1]}, tiny_config(),
               telemetry_path=tmp_path / "t.csv", checkpoint_dir=tmp_path / "ck")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "round,client,loss" and len(lines) == 1 + 4 * 2
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["pretrain_round000002.json",
                                                                   "pretrain_round000004.json"]


def test_pretrain_contract_errors(small_bus_data):
    with pytest.raises(ContractError):
        F.pretrain(F.FedConfig(), {}, tiny_config())
    with pytest.raises(ContractError):
        F.pretrain(F.FedConfig(), {0: small_bus_data[0]})


# ---------------------------------------------------------------- fine-tuning

def test_finetune_zero_epochs_returns_base(tiny_model, small_bus_data):
    model, history = F.finetune(tiny_model, small_bus_data[2], F.FineTuneConfig(max_epochs=0))
    assert np.array_equal(model.flat_params(), tiny_model.flat_params())
    assert len(history) == 1


def test_finetune_rising_val_loss_stops_at_base(tiny_model, small_bus_data):
    def rising(model, val, epoch):
        return float(epoch)

    model, history = F.finetune(tiny_model, small_bus_data[2], F.FineTuneConfig(max_epochs=10, patience=1),
                                val_loss_fn=rising)
    assert np.array_equal(model.flat_params(), tiny_model.flat_params())
    assert len(history) == 2


def test_finetune_improving_val_loss_runs_all_epochs(tiny_model, small_bus_data):
    seen = {}

    def falling(model, val, epoch):
        seen[epoch] = model.flat_params().copy()
        return -float(epoch)

    model, history = F.finetune(tiny_model, small_bus_data[2], F.FineTuneConfig(max_epochs=4, patience=1),
                                val_loss_fn=falling)
    assert [h[0] for h in history] == [0, 1, 2, 3, 4]
    assert np.array_equal(model.flat_params(), seen[4])


def test_finetune_returns_best_not_last(tiny_model, small_bus_data):
    schedule = {0: 5.0, 1: 3.0, 2: 1.0, 3: 2.0, 4: 4.0}
    seen = {}

    def scripted(model, val, epoch):
        seen[epoch] = model.flat_params().copy()
        return schedule[epoch]

    model, history = F.finetune(tiny_model, small_bus_data[2], F.FineTuneConfig(max_epochs=4, patience=2),
                                val_loss_fn=scripted)
    assert len(history) == 5
    assert np.array_equal(model.flat_params(), seen[2])


def test_finetune_errors(tiny_model, small_bus_data):
    with pytest.raises(ContractError):
        F.finetune(tiny_model, small_bus_data[2].select_triplets([]), F.FineTuneConfig())
    wide = init_model(tiny_config(m=20), 0)
    with pytest.raises(ContractError):
        F.finetune(wide, small_bus_data[2], F.FineTuneConfig())


def test_finetune_telemetry(tmp_path, tiny_model, small_bus_data):
    F.finetune(tiny_model, small_bus_data[2], F.FineTuneConfig(max_epochs=2, patience=5),
               telemetry_path=tmp_path / "ft.csv")
    lines = (tmp_path / "ft.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss" and len(lines) == 4
