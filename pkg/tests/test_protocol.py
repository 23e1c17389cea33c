import json

import numpy as np
import pytest

from splitattack.data import Dataset
from splitattack.engine import ConfigurationError, InputError, OptimizerState, build_network, forward, train_step
from splitattack.protocol import (
    ROUND_PATTERN,
    Channel,
    Client,
    Server,
    SplitPlan,
    batch_schedule,
    honest_round,
    partition,
    train_honest,
)

NET = [
    {"kind": "conv2d", "out_channels": 3, "kernel": 3, "padding": 1},
    {"kind": "relu"},
    {"kind": "residual-block", "kernel": 3},
    {"kind": "avgpool2d", "size": 2},
    {"kind": "flatten"},
    {"kind": "dense", "units": 4},
]
SHAPE = (1, 6, 6)
PLANS = [SplitPlan(1, 4, 1), SplitPlan(2, 3, 1), SplitPlan(3, 1, 2)]


def toy_clients(seed, n_clients=3, per_client=20, classes=4):
    rng = np.random.default_rng(seed)
    return [
        Dataset(rng.uniform(0, 1, (per_client,) + SHAPE), rng.integers(0, classes, per_client), classes)
        for _ in range(n_clients)
    ]


def params_of(net):
    return [v for p in net.parameters() for v in p.values()]


def monolithic(seed, clients, rounds, batch_size=8, lr=0.05, momentum=0.9):
    net = build_network(SHAPE, NET, seed=seed)
    state = OptimizerState(net, lr, momentum)
    for _, x, y in batch_schedule(clients, rounds, batch_size, seed):
        train_step(net, state, x, y)
    return net


def test_partition_counts():
    net = build_network(SHAPE, NET, seed=0)
    model = partition(net, SplitPlan(2, 3, 1))
    assert [len(s.net) for s in (model.input, model.server, model.output)] == [2, 3, 1]
    assert [s.owner for s in (model.input, model.server, model.output)] == ["client", "server", "client"]
    assert model.plan == SplitPlan(2, 3, 1)


def test_partition_moves_parameters():
    net = build_network(SHAPE, NET, seed=0)
    model = partition(net, SplitPlan(1, 4, 1))
    assert model.input.net.layers[0] is net.layers[0]
    assert model.input.net.layers[0].params["W"] is net.layers[0].params["W"]


@pytest.mark.parametrize("plan", [SplitPlan(2, 3, 2), SplitPlan(0, 5, 1), SplitPlan(1, 5, 1)])
def test_partition_rejects_bad_plans(plan):
    with pytest.raises(ConfigurationError):
        partition(build_network(SHAPE, NET, seed=0), plan)


@pytest.mark.parametrize("plan", PLANS)
@pytest.mark.parametrize("seed", [0, 1])
def test_split_matches_monolithic_bitwise(plan, seed):
    clients = toy_clients(seed)
    ref = monolithic(seed, clients, 12)
    model = partition(build_network(SHAPE, NET, seed=seed), plan, lr=0.05, momentum=0.9)
    train_honest(model, clients, 12, batch_size=8, seed=seed)
    for a, b in zip(params_of(ref), params_of(model.full_network())):
        assert np.array_equal(a, b)


def test_single_round_loss_matches_monolithic():
    rng = np.random.default_rng(3)
    x, y = rng.uniform(0, 1, (5,) + SHAPE), rng.integers(0, 4, 5)
    net = build_network(SHAPE, NET, seed=3)
    ref_loss = train_step(net.copy(), OptimizerState(net, 0.1), x, y)
    model = partition(net, SplitPlan(1, 4, 1), lr=0.1, momentum=0.0)
    assert honest_round(model, x, y) == ref_loss


def test_zero_learning_rate_is_a_no_op():
    rng = np.random.default_rng(4)
    x, y = rng.uniform(0, 1, (5,) + SHAPE), rng.integers(0, 4, 5)
    net = build_network(SHAPE, NET, seed=4)
    before = [p.copy() for p in params_of(net)]
    full_loss = train_step(net.copy(), OptimizerState(net, 0.0), x, y)
    model = partition(net, SplitPlan(2, 3, 1), lr=0.0, momentum=0.9)
    assert honest_round(model, x, y) == full_loss
    for a, b in zip(before, params_of(model.full_network())):
        assert np.array_equal(a, b)


def test_scalar_net_hand_computed_loss():
    # dense(1->1, w=2, b=0), relu, dense(1->2) with logits (z, -z): loss = log(1 + exp(-2z)) for label 0
    net = build_network((1,), [{"kind": "dense", "units": 1}, {"kind": "relu"}, {"kind": "dense", "units": 2}], seed=0)
    net.layers[0].params["W"][:] = 2.0
    net.layers[0].params["b"][:] = 0.0
    net.layers[2].params["W"][:] = [[1.0], [-1.0]]
    net.layers[2].params["b"][:] = 0.0
    model = partition(net, SplitPlan(1, 1, 1), lr=0.0)
    loss = honest_round(model, np.array([[0.5]]), [0])
    assert loss == pytest.approx(np.log1p(np.exp(-2.0)), abs=1e-12)


def test_zero_rounds_leave_model_unchanged():
    net = build_network(SHAPE, NET, seed=5)
    before = [p.copy() for p in params_of(net)]
    model = partition(net, SplitPlan(1, 4, 1))
    assert train_honest(model, toy_clients(5), 0) == []
    for a, b in zip(before, params_of(model.full_network())):
        assert np.array_equal(a, b)


def test_single_client_matches_plain_sgd():
    clients = toy_clients(6, n_clients=1)
    ref = monolithic(6, clients, 9)
    model = partition(build_network(SHAPE, NET, seed=6), SplitPlan(1, 4, 1), lr=0.05, momentum=0.9)
    train_honest(model, clients, 9, batch_size=8, seed=6)
    for a, b in zip(params_of(ref), params_of(model.full_network())):
        assert np.array_equal(a, b)


def test_message_discipline():
    model = partition(build_network(SHAPE, NET, seed=7), SplitPlan(2, 3, 1))
    channel = Channel()
    train_honest(model, toy_clients(7), 5, batch_size=4, seed=7, channel=channel)
    assert len(channel.trace) == 4 * 5
    o1_shape = [4, *model.input.net.output_shape]
    o2_shape = [4, *model.server.net.output_shape]
    for r in range(5):
        recs = channel.trace[4 * r : 4 * r + 4]
        assert [(m["direction"], m["kind"]) for m in recs] == list(ROUND_PATTERN)
        assert {m["round"] for m in recs} == {r}
        assert [m["shape"] for m in recs] == [o1_shape, o2_shape, o2_shape, o1_shape]


def test_trace_log_is_json_lines(tmp_path):
    model = partition(build_network(SHAPE, NET, seed=8), SplitPlan(1, 4, 1))
    channel = Channel()
    train_honest(model, toy_clients(8), 2, batch_size=4, seed=8, channel=channel)
    path = tmp_path / "trace.jsonl"
    channel.write_trace(path)
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(lines) == 8
    assert set(lines[0]) == {"round", "direction", "kind", "shape", "checksum"}


def test_out_of_order_receive_is_rejected():
    model = partition(build_network(SHAPE, NET, seed=9), SplitPlan(1, 4, 1))
    channel = Channel()
    Client(model).send_activation(channel, np.zeros((2,) + SHAPE), 0)
    with pytest.raises(ConfigurationError):
        channel.receive("server->client", "gradient")


def test_server_rejects_wrong_activation_shape():
    model = partition(build_network(SHAPE, NET, seed=9), SplitPlan(1, 4, 1))
    other = partition(build_network((1, 4, 4), NET, seed=9), SplitPlan(1, 4, 1))
    channel = Channel()
    Client(other).send_activation(channel, np.zeros((2, 1, 4, 4)), 0)
    with pytest.raises(ConfigurationError):
        Server(model.server).on_activation(channel)


def test_server_never_holds_client_state():
    model = partition(build_network(SHAPE, NET, seed=10), SplitPlan(1, 4, 1))
    server = Server(model.server)
    clients = toy_clients(10)
    from splitattack.protocol import train_rounds

    train_rounds(model, clients, 3, server, batch_size=4, seed=10)
    client_arrays = params_of(model.input.net) + params_of(model.output.net)
    client_arrays += [ds.images for ds in clients]
    server_arrays = [v for v in vars(server).values() if isinstance(v, np.ndarray)]
    server_arrays += params_of(server.segment.net)
    for s in server_arrays:
        assert not any(s is c for c in client_arrays)
    assert set(vars(server)) == {"segment", "_trace2"}


def test_schedule_round_robin_and_deterministic():
    clients = toy_clients(11)
    a = list(batch_schedule(clients, 7, 8, seed=3))
    b = list(batch_schedule(clients, 7, 8, seed=3))
    assert [k for k, _, _ in a] == [0, 1, 2, 0, 1, 2, 0]
    for (_, xa, ya), (_, xb, yb) in zip(a, b):
        assert np.array_equal(xa, xb) and np.array_equal(ya, yb)


def test_schedule_rejects_empty_client():
    clients = toy_clients(12) + [Dataset(np.zeros((0,) + SHAPE), np.zeros(0, dtype=np.int64), 4)]
    with pytest.raises(InputError):
        list(batch_schedule(clients, 4, 8, seed=0))
    with pytest.raises(InputError):
        list(batch_schedule([], 4, 8, seed=0))


def test_honest_training_beats_majority_baseline():
    rng = np.random.default_rng(13)
    # two well separated classes: bright top half vs bright bottom half
    def make(n):
        y = rng.integers(0, 2, n)
        x = rng.uniform(0, 0.2, (n,) + SHAPE)
        x[y == 0, :, :3] += 0.7
        x[y == 1, :, 3:] += 0.7
        return Dataset(x, y, 2)

    clients = [make(30) for _ in range(3)]
    test = make(100)
    net = build_network(SHAPE, NET[:-1] + [{"kind": "dense", "units": 2}], seed=13)
    model = partition(net, SplitPlan(1, 4, 1), lr=0.05)
    train_honest(model, clients, 60, batch_size=8, seed=13)
    pred = forward(model.full_network(), test.images).output.argmax(axis=1)
    assert np.mean(pred == test.labels) > max(np.mean(test.labels), 1 - np.mean(test.labels))
