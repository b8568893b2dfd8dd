import math

import numpy as np
import pytest

from pfcm import nn_core
from pfcm.dataset import ClientDataset
from pfcm.exceptions import DataError
from pfcm.federation import (ClientUpdate, GlobalModelState, TrainConfig, aggregate,
                             apply_update, local_train, run_fedavg)
from pfcm.nn_core import CnnSpec, init_weights

SPEC = CnnSpec(conv1_channels=2, conv2_channels=3, fc_hidden=5)


def make_client(cid, n, seed):
    rng = np.random.default_rng(seed)
    return ClientDataset(cid, rng.random((n, 1, 9, 9)), rng.integers(0, 3, n))


def test_zero_learning_rate_gives_zero_delta():
    w = init_weights(SPEC, 0)
    upd = local_train(w, make_client("a", 3, 1), SPEC, TrainConfig(lr=0.0, local_epochs=3))
    assert np.all(upd.delta.values == 0)
    assert upd.num_samples == 3


def test_delta_plus_global_is_trained_weights():
    w = init_weights(SPEC, 0)
    client = make_client("a", 4, 2)
    cfg = TrainConfig(local_epochs=3)
    upd = local_train(w, client, SPEC, cfg)
    X, y = client.arrays()
    trained, _ = nn_core.train_epochs(w, SPEC, X, y, 3, lr=cfg.lr, momentum=cfg.momentum)
    np.testing.assert_allclose(upd.delta.values + w.values, trained.values, rtol=0, atol=1e-15)


def test_single_sample_one_epoch_is_minus_lr_grad():
    w = init_weights(SPEC, 1)
    client = make_client("a", 1, 3)
    upd = local_train(w, client, SPEC, TrainConfig(lr=0.1, momentum=0.5))
    _, grad = nn_core.loss_and_grad(w, SPEC, *client.arrays())
    # first step: velocity = grad, so the update is -lr * grad
    np.testing.assert_allclose(upd.delta.values, -0.1 * grad.values, rtol=1e-9, atol=1e-16)


def test_local_train_requires_positive_epochs():
    with pytest.raises(ValueError):
        local_train(init_weights(SPEC, 0), make_client("a", 2, 0), SPEC, epochs=0)


def _updates(m, seed=0, scale=1e-3):
    rng = np.random.default_rng(seed)
    w = init_weights(SPEC, 0)
    return [ClientUpdate(f"c{i}", w.replace(scale * rng.normal(size=len(w))), 1)
            for i in range(m)]


def test_aggregate_single_update():
    u = _updates(1)
    assert np.array_equal(aggregate(u).values, u[0].delta.values)


def test_aggregate_identical_deltas():
    d = _updates(1)[0].delta
    ups = [ClientUpdate(f"c{i}", d, 2) for i in range(4)]
    np.testing.assert_allclose(aggregate(ups).values, d.values, rtol=1e-15)


def test_aggregate_matches_fsum_oracle():
    ups = _updates(7, seed=3)
    got = aggregate(ups).values
    mat = np.stack([u.delta.values for u in ups])
    oracle = np.array([math.fsum(mat[:, j]) / 7 for j in range(mat.shape[1])])
    np.testing.assert_allclose(got, oracle, rtol=0, atol=1e-12)


def test_aggregate_is_order_invariant_bitwise():
    ups = _updates(6, seed=4)
    shuffled = [ups[i] for i in np.random.default_rng(0).permutation(6)]
    assert aggregate(ups).values.tobytes() == aggregate(shuffled).values.tobytes()


def test_aggregate_is_linear():
    ups = _updates(5, seed=5)
    c = 3.7
    scaled = [ClientUpdate(u.client_id, u.delta.replace(c * u.delta.values), 1) for u in ups]
    np.testing.assert_allclose(aggregate(scaled).values, c * aggregate(ups).values,
                               rtol=0, atol=1e-12)


def test_aggregate_weighted_by_samples():
    w = init_weights(SPEC, 0)
    a = ClientUpdate("a", w.replace(np.ones(len(w))), 1)
    b = ClientUpdate("b", w.replace(np.full(len(w), 4.0)), 3)
    np.testing.assert_allclose(aggregate([a, b], weighted=True).values, 3.25)
    np.testing.assert_allclose(aggregate([a, b]).values, 2.5)


def test_aggregate_empty_raises():
    with pytest.raises(ValueError):
        aggregate([])


def test_apply_update_cases():
    w = init_weights(SPEC, 0)
    d = w.replace(np.random.default_rng(0).normal(size=len(w)))
    s1 = apply_update(GlobalModelState(w, 0, 1.0), d)
    assert np.array_equal(s1.weights.values, w.values + d.values)
    assert s1.round == 1
    s0 = apply_update(GlobalModelState(w, 4, 0.0), d)
    assert np.array_equal(s0.weights.values, w.values) and s0.round == 5
    zero = w.replace(np.zeros(len(w)))
    half = apply_update(GlobalModelState(zero, 0, 0.5), d)
    np.testing.assert_allclose(half.weights.values, 0.5 * d.values, rtol=0, atol=0)


def centralized_sgd(weights, client, epochs, cfg):
    """Plain SGD on one client's data; one fresh optimizer per epoch."""
    X, y = client.X, client.y
    for _ in range(epochs):
        opt = nn_core.OptimizerState(cfg.lr, cfg.momentum)
        _, g = nn_core.loss_and_grad(weights, SPEC, X, y)
        weights = nn_core.sgd_step(weights, g, opt)
    return weights


def test_single_client_fedavg_equals_centralized_sgd():
    cfg = TrainConfig(rounds=6, seed=2)
    client = make_client("only", 4, 8)
    init = init_weights(SPEC, 9)
    state, reports = run_fedavg([client], SPEC, cfg, initial=init)
    ref = centralized_sgd(init, client, 6, cfg)
    assert np.max(np.abs(state.weights.values - ref.values)) <= 1e-12
    assert state.round == 6 and len(reports) == 6


def test_zero_rounds_returns_initial():
    init = init_weights(SPEC, 3)
    state, reports = run_fedavg([make_client("a", 2, 0)], SPEC, TrainConfig(rounds=0),
                                initial=init)
    assert np.array_equal(state.weights.values, init.values) and reports == []


def test_identical_clients_follow_single_client_trajectory():
    base = make_client("a", 3, 1)
    clones = [ClientDataset(f"c{i}", base.X, base.y) for i in range(4)]
    init = init_weights(SPEC, 0)
    cfg = TrainConfig(rounds=4)
    one, _ = run_fedavg([base], SPEC, cfg, initial=init)
    many, _ = run_fedavg(clones, SPEC, cfg, initial=init)
    np.testing.assert_allclose(many.weights.values, one.weights.values, rtol=0, atol=1e-12)


def test_run_fedavg_is_deterministic():
    clients = [make_client(f"c{i}", 3, i) for i in range(3)]
    a, ra = run_fedavg(clients, SPEC, TrainConfig(rounds=3, seed=5))
    b, rb = run_fedavg(list(reversed(clients)), SPEC, TrainConfig(rounds=3, seed=5))
    assert a.weights.values.tobytes() == b.weights.values.tobytes()
    assert [r.loss for r in ra] == [r.loss for r in rb]
    assert all(np.isfinite(r.loss) for r in ra)


def test_run_fedavg_without_clients():
    with pytest.raises(DataError):
        run_fedavg([], SPEC, TrainConfig(rounds=1))


def test_local_train_only_reads_its_client():
    from pfcm.dataset import ledger
    clients = [make_client(f"c{i}", 2, i) for i in range(3)]
    ledger.clear()
    with ledger.phase_scope("solo"):
        local_train(init_weights(SPEC, 0), clients[1], SPEC)
    assert ledger.touched("solo") == set(clients[1].sample_ids)
    ledger.clear()
