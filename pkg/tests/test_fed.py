import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamfed.data import ClientData
from beamfed.fed import (
    ClientUpdate,
    ConvergenceTracker,
    FedConfig,
    ServerState,
    aggregate,
    fedavg_step,
    fedlion_step,
    init_server,
    run_round,
    select_clients,
    train_to_convergence,
)
from beamfed.nn.model import CnnArch, ModelParams, local_train

ARCH = CnnArch(conv1_filters=2, conv2_filters=2, fc1_units=6, fc2_units=5, num_classes=4,
               input_shape=(3, 2))


def _state(w, m=None, kind="fedlion", **kw):
    w = np.asarray(w)
    params = ModelParams(w.copy(), (("w", w.shape, 0),))
    return ServerState(params, np.zeros_like(w) if m is None else np.asarray(m, w.dtype),
                       optimizer_kind=kind, **kw)


def _client(k, n, seed=0, n_val=4):
    rng = np.random.default_rng([seed, k])
    X = rng.normal(size=(n + n_val, 2, 3, 2)).astype(np.float32)
    y = rng.integers(0, 4, size=n + n_val)
    return ClientData(k, X[:n], y[:n], X[n:], y[n:])


# -- selection ----------------------------------------------------------------


def test_full_participation_selects_everyone():
    assert select_clients(8, 1.0, 0).participating == tuple(range(8))


def test_quarter_fraction_selects_two():
    plan = select_clients(8, 0.25, 3)
    assert len(set(plan.participating)) == 2
    assert plan == select_clients(8, 0.25, 3)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.floats(0.01, 1.0), st.integers(0, 10**6))
def test_selection_size_is_ceiling(k, c, seed):
    plan = select_clients(k, c, seed)
    assert len(plan.participating) == len(set(plan.participating)) == math.ceil(round(c * k, 9))
    assert all(0 <= i < k for i in plan.participating)


def test_selection_rejects_bad_arguments():
    with pytest.raises(ValueError):
        select_clients(0, 1.0, 0)
    with pytest.raises(ValueError):
        select_clients(4, 0.0, 0)


# -- aggregation --------------------------------------------------------------


def test_aggregate_examples():
    d = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(aggregate([ClientUpdate(0, d, 5), ClientUpdate(1, -d, 5)]), 0.0)
    np.testing.assert_array_equal(aggregate([ClientUpdate(3, d, 7)]), d)
    ups = [ClientUpdate(i, d.copy(), n) for i, n in enumerate((1, 2, 3))]
    np.testing.assert_allclose(aggregate(ups), d, rtol=1e-15)
    assert aggregate([]) is None
    with pytest.raises(ValueError):
        aggregate([ClientUpdate(0, d, 1), ClientUpdate(1, d[:2], 1)])
    with pytest.raises(ValueError):
        ClientUpdate(0, d, 0)


def test_aggregate_is_order_independent():
    rng = np.random.default_rng(0)
    ups = [ClientUpdate(i, rng.normal(size=50).astype(np.float32), int(rng.integers(1, 100)))
           for i in range(6)]
    a = aggregate(ups)
    b = aggregate(ups[::-1])
    assert a.tobytes() == b.tobytes()
    n = sum(u.sample_count for u in ups)
    np.testing.assert_allclose(a, sum(u.sample_count * u.delta.astype(np.float64) for u in ups) / n,
                               rtol=1e-6)


# -- FedAvg -------------------------------------------------------------------


def test_fedavg_examples():
    s = _state(np.array([1.0, 2.0]), kind="fedavg", server_lr=1.0)
    np.testing.assert_array_equal(fedavg_step(s, np.zeros(2)).weights.values, [1.0, 2.0])
    out = fedavg_step(s, np.array([0.5, -1.0]))
    np.testing.assert_array_equal(out.weights.values, [1.5, 1.0])
    assert out.round == 1
    s = replace(_state(np.zeros(2), kind="fedavg", server_lr=0.4, server_lr_decay=0.5), round=3)
    np.testing.assert_allclose(fedavg_step(s, np.ones(2)).weights.values, 0.4 / 2.5)


def test_fedavg_identity_gives_weighted_average_of_client_models():
    """eta=1, no decay, full participation: one round is the n_k-weighted model average."""
    cfg = FedConfig(arch=ARCH, optimizer="fedavg", server_lr=1.0, local_ep=2, local_bs=4, lr=0.1,
                    fraction=1.0, seed=4)
    clients = [_client(k, n) for k, n in enumerate((3, 7, 12))]
    server = init_server(cfg)
    plan = select_clients(3, 1.0, 0)
    new, _ = run_round(server, clients, plan, cfg, round_index=0)

    from beamfed.fed import client_stream

    models, ns = [], []
    for c in clients:
        p, n = local_train(server.weights, ARCH, c.X_train, c.y_train, 2, 4, 0.1,
                           rng=client_stream(4, 0, c.client_id))
        models.append(p.values.astype(np.float64))
        ns.append(n)
    expected = sum(n * m for n, m in zip(ns, models)) / sum(ns)
    np.testing.assert_allclose(new.weights.values, expected, atol=1e-6)


# -- FedLion ------------------------------------------------------------------


def lion_oracle(w, m, u, eta, lam, b1, b2, convention):
    """Scalar loop over coordinates."""
    new_w, new_m = [], []
    for wi, mi, ui in zip(w, m, u):
        c = b1 * mi + (1 - b1) * ui
        s = 1.0 if c > 0 else (-1.0 if c < 0 else 0.0)
        if convention == "literal":
            new_w.append(wi - eta * (s + lam * wi))
        else:
            new_w.append(wi + eta * s - eta * lam * wi)
        new_m.append(b2 * mi + (1 - b2) * ui)
    return np.array(new_w), np.array(new_m)


@pytest.mark.parametrize("convention", ["descent", "literal"])
def test_fedlion_matches_scalar_oracle(convention):
    rng = np.random.default_rng(77)
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        w, m, u = rng.normal(size=(3, n))
        eta, lam = rng.uniform(0, 0.1), rng.uniform(0, 0.5)
        b1, b2 = rng.uniform(0, 0.999, size=2)
        s = _state(w, m, server_lr=eta, lmbda=lam, beta1=b1, beta2=b2, lion_convention=convention)
        out = fedlion_step(s, u)
        ew, em = lion_oracle(w, m, u, eta, lam, b1, b2, convention)
        np.testing.assert_allclose(out.weights.values, ew, rtol=0, atol=1e-7)
        np.testing.assert_allclose(out.momentum, em, rtol=0, atol=1e-7)
        assert out.round == 1


def test_fedlion_examples():
    w = np.array([0.5, -1.0, 2.0])
    out = fedlion_step(_state(w, server_lr=0.1), np.zeros(3))
    np.testing.assert_array_equal(out.weights.values, w)

    out = fedlion_step(_state(w, server_lr=0.1, lmbda=0.2), np.zeros(3))
    np.testing.assert_allclose(out.weights.values, w - 0.1 * 0.2 * w, rtol=1e-15)

    # the step as literally written: positive U lowers every weight by eta_t
    out = fedlion_step(_state(w, server_lr=0.1, lion_convention="literal"), np.array([1.0, 3.0, 0.2]))
    np.testing.assert_allclose(out.weights.values, w - 0.1, rtol=1e-15)
    # the default convention follows the client delta instead
    out = fedlion_step(_state(w, server_lr=0.1), np.array([1.0, 3.0, 0.2]))
    np.testing.assert_allclose(out.weights.values, w + 0.1, rtol=1e-15)


def test_fedlion_direction_uses_old_momentum():
    s = _state(np.zeros(1), m=np.array([1.0]), server_lr=1.0, beta1=0.9, beta2=0.5)
    out = fedlion_step(s, np.array([-5.0]))
    # c = 0.9 - 0.5 = 0.4 > 0
    assert out.weights.values[0] == 1.0
    assert out.momentum[0] == pytest.approx(0.5 - 2.5)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["descent", "literal"]))
def test_fedlion_step_bound(seed, convention):
    rng = np.random.default_rng(seed)
    w, m, u = rng.normal(size=(3, 20)) * rng.uniform(0.01, 100)
    eta, lam = rng.uniform(0, 1), rng.uniform(0, 1)
    s = _state(w, m, server_lr=eta, lmbda=lam, lion_convention=convention)
    dw = fedlion_step(s, u).weights.values - w
    assert np.all(np.abs(dw) <= eta * (1 + lam * np.abs(w)) * (1 + 1e-12))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_fedlion_ignores_update_scale_from_zero_momentum(seed, scale):
    rng = np.random.default_rng(seed)
    w, u = rng.normal(size=(2, 10))
    a = fedlion_step(_state(w, server_lr=0.01), u).weights.values
    b = fedlion_step(_state(w, server_lr=0.01), scale * u).weights.values
    np.testing.assert_array_equal(a, b)


def test_state_validation():
    with pytest.raises(ValueError):
        _state(np.zeros(2), m=np.zeros(3))
    with pytest.raises(ValueError):
        _state(np.zeros(2), beta1=1.0)
    with pytest.raises(ValueError):
        _state(np.zeros(2), kind="sgd")


def test_initial_momentum_is_zero():
    s = init_server(FedConfig(arch=ARCH))
    assert not s.momentum.any() and s.round == 0


# -- rounds -------------------------------------------------------------------


def test_single_client_round_gives_client_weights():
    cfg = FedConfig(arch=ARCH, optimizer="fedavg", server_lr=1.0, local_ep=1, local_bs=4, lr=0.1,
                    seed=2)
    c = _client(0, 9)
    server = init_server(cfg)
    new, ups = run_round(server, [c], select_clients(1, 1.0, 0), cfg, 0)
    from beamfed.fed import client_stream

    p, _ = local_train(server.weights, ARCH, c.X_train, c.y_train, 1, 4, 0.1,
                       rng=client_stream(2, 0, 0))
    np.testing.assert_allclose(new.weights.values, p.values, atol=1e-7)
    assert ups[0].sample_count == 9


@pytest.mark.parametrize("opt", ["fedavg", "fedlion"])
def test_zero_local_epochs_leave_weights(opt):
    cfg = FedConfig(arch=ARCH, optimizer=opt, local_ep=0, server_lr=0.5)
    server = init_server(cfg)
    new, _ = run_round(server, [_client(0, 5), _client(1, 5)], select_clients(2, 1.0, 0), cfg, 0)
    np.testing.assert_array_equal(new.weights.values, server.weights.values)


def test_all_empty_clients_is_a_noop(caplog):
    cfg = FedConfig(arch=ARCH)
    server = init_server(cfg)
    empty = _client(0, 0)
    new, ups = run_round(server, [empty], select_clients(1, 1.0, 0), cfg, 0)
    assert new is server and ups == []
    assert "no client" in caplog.text


@pytest.mark.parametrize("opt", ["fedavg", "fedlion"])
def test_round_is_deterministic_across_worker_counts(opt):
    clients = [_client(0, 12), _client(1, 20)]
    outs = []
    for workers in (1, 2, 1):
        cfg = FedConfig(arch=ARCH, optimizer=opt, local_bs=5, lr=0.05, server_lr=0.01, seed=9,
                        workers=workers)
        new, _ = run_round(init_server(cfg), clients, select_clients(2, 1.0, 0), cfg, 0)
        outs.append(new.weights.values.tobytes() + new.momentum.tobytes())
    assert len(set(outs)) == 1


# -- convergence --------------------------------------------------------------


def test_patience_zero_runs_one_interval():
    cfg = FedConfig(arch=ARCH, patience=0, eval_interval=3, max_rounds=20, local_bs=8)
    _, hist = train_to_convergence(init_server(cfg), [_client(0, 10)], cfg)
    assert len(hist) == 3
    assert not math.isnan(hist[-1]["val_loss"])


def test_max_rounds_zero_returns_initial_state():
    cfg = FedConfig(arch=ARCH, max_rounds=0)
    server = init_server(cfg)
    out, hist = train_to_convergence(server, [_client(0, 10)], cfg)
    assert out is server and hist == []


def test_history_counts_local_epochs_and_returns_best():
    cfg = FedConfig(arch=ARCH, optimizer="fedavg", local_ep=2, max_rounds=6, patience=2,
                    local_bs=8, lr=0.2)
    clients = [_client(0, 10), _client(1, 6), _client(2, 0)]
    best, hist = train_to_convergence(init_server(cfg), clients, cfg)
    assert [h["cumulative_local_epochs"] for h in hist] == [4 * (i + 1) for i in range(len(hist))]
    best_row = min(hist, key=lambda h: h["val_loss"])
    assert best.round == best_row["round"]


def test_tracker_keeps_first_snapshot_on_nan():
    t = ConvergenceTracker(patience=1)
    assert not t.update(math.nan, lambda: "a")
    assert t.best == "a"
