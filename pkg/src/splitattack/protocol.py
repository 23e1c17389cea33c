"""U-shaped split learning: clients hold the first and last segments, the server the middle.

Parties only talk through :class:`ProtocolMessage` objects pushed onto a
:class:`Channel`. One round exchanges exactly four messages::

    client -> server   activation   o1 = F1(x)
    server -> client   activation   o2 = F2(o1)
    client -> server   gradient     dL/do2
    server -> client   gradient     dL/do1  (possibly tampered by the server)
"""

from __future__ import annotations

import json
import zlib
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .data import Dataset
from .engine import (
    ConfigurationError,
    InputError,
    Network,
    OptimizerState,
    backward,
    forward,
    sgd_momentum_step,
    softmax_cross_entropy,
)

CLIENT_TO_SERVER = "client->server"
SERVER_TO_CLIENT = "server->client"
ACTIVATION = "activation"
GRADIENT = "gradient"

# (direction, kind) of the four messages of one round, in order
ROUND_PATTERN = (
    (CLIENT_TO_SERVER, ACTIVATION),
    (SERVER_TO_CLIENT, ACTIVATION),
    (CLIENT_TO_SERVER, GRADIENT),
    (SERVER_TO_CLIENT, GRADIENT),
)


@dataclass(frozen=True)
class SplitPlan:
    n_input: int
    n_server: int
    n_output: int

    def validate(self, total: int) -> None:
        counts = (self.n_input, self.n_server, self.n_output)
        if min(counts) < 1:
            raise ConfigurationError(f"every segment needs at least one layer, got {counts}")
        if sum(counts) != total:
            raise ConfigurationError(f"split plan {counts} sums to {sum(counts)}, network has {total} layers")


@dataclass
class Segment:
    net: Network
    opt: OptimizerState
    owner: str  # "client" | "server"


@dataclass
class SplitModel:
    input: Segment
    server: Segment
    output: Segment

    def full_network(self) -> Network:
        """The deployed model F3(F2(F1(.))), sharing parameters with the segments."""
        return Network(self.input.net.layers + self.server.net.layers + self.output.net.layers)

    @property
    def plan(self) -> SplitPlan:
        return SplitPlan(len(self.input.net), len(self.server.net), len(self.output.net))


def partition(net: Network, plan: SplitPlan, lr: float = 0.01, momentum: float = 0.9) -> SplitModel:
    """Cut ``net`` into three contiguous segments.

    Layers (and their parameter arrays) move into the segments; ``net`` should
    not be trained separately afterwards.
    """
    plan.validate(len(net))
    a, b = plan.n_input, plan.n_input + plan.n_server
    segs = []
    for layers, owner in ((net.layers[:a], "client"), (net.layers[a:b], "server"), (net.layers[b:], "client")):
        seg_net = Network(layers)
        segs.append(Segment(seg_net, OptimizerState(seg_net, lr, momentum), owner))
    return SplitModel(*segs)


# --------------------------------------------------------------------------
# messages
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ProtocolMessage:
    direction: str
    kind: str
    batch_id: int
    payload: np.ndarray

    def record(self, round_index: int) -> dict:
        return {
            "round": round_index,
            "direction": self.direction,
            "kind": self.kind,
            "shape": list(self.payload.shape),
            "checksum": zlib.crc32(np.ascontiguousarray(self.payload).tobytes()),
        }


class Channel:
    """In-memory transport; keeps a trace of every message it carried."""

    def __init__(self, keep_trace: bool = True):
        self._queue: deque[ProtocolMessage] = deque()
        self.trace: list[dict] = []
        self.keep_trace = keep_trace
        self.next_batch_id = 0
        self.rounds = 0

    def new_batch(self) -> int:
        bid = self.next_batch_id
        self.next_batch_id += 1
        return bid

    def send(self, msg: ProtocolMessage) -> None:
        if self.keep_trace:
            self.trace.append(msg.record(msg.batch_id))
        self._queue.append(msg)

    def receive(self, direction: str, kind: str) -> ProtocolMessage:
        if not self._queue:
            raise ConfigurationError("receive on an empty channel")
        msg = self._queue.popleft()
        if (msg.direction, msg.kind) != (direction, kind):
            raise ConfigurationError(f"expected {direction} {kind}, got {msg.direction} {msg.kind}")
        return msg

    def write_trace(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.trace:
                fh.write(json.dumps(rec) + "\n")


# --------------------------------------------------------------------------
# parties
# --------------------------------------------------------------------------


class Client:
    """Holds the input and output segments, the raw data and the labels."""

    def __init__(self, model: SplitModel):
        self.input = model.input
        self.output = model.output
        self._trace1 = None
        self._trace3 = None

    def send_activation(self, channel: Channel, x: np.ndarray, batch_id: int) -> None:
        self._trace1 = forward(self.input.net, x)
        channel.send(ProtocolMessage(CLIENT_TO_SERVER, ACTIVATION, batch_id, self._trace1.output))

    def compute_loss(self, channel: Channel, y) -> float:
        msg = channel.receive(SERVER_TO_CLIENT, ACTIVATION)
        self._trace3 = forward(self.output.net, msg.payload)
        loss, g = softmax_cross_entropy(self._trace3.output, y)
        grads3, g_o2 = backward(self.output.net, self._trace3, g)
        sgd_momentum_step(self.output.net.parameters(), grads3, self.output.opt)
        channel.send(ProtocolMessage(CLIENT_TO_SERVER, GRADIENT, msg.batch_id, g_o2))
        return loss

    def apply_gradient(self, channel: Channel) -> None:
        msg = channel.receive(SERVER_TO_CLIENT, GRADIENT)
        if msg.payload.shape != self._trace1.output.shape:
            raise ConfigurationError(f"returned gradient shape {msg.payload.shape} != o1 shape")
        grads1, _ = backward(self.input.net, self._trace1, msg.payload, need_input=False)
        sgd_momentum_step(self.input.net.parameters(), grads1, self.input.opt)
        self._trace1 = self._trace3 = None


class Server:
    """Honest server: sees o1 and dL/do2, owns only the server segment."""

    def __init__(self, segment: Segment):
        self.segment = segment
        self._trace2 = None

    def on_activation(self, channel: Channel) -> None:
        msg = channel.receive(CLIENT_TO_SERVER, ACTIVATION)
        if msg.payload.shape[1:] != self.segment.net.input_shape:
            raise ConfigurationError(f"o1 shape {msg.payload.shape[1:]} != server input {self.segment.net.input_shape}")
        self._trace2 = forward(self.segment.net, msg.payload)
        self.observe_activation(msg.payload)
        channel.send(ProtocolMessage(SERVER_TO_CLIENT, ACTIVATION, msg.batch_id, self._trace2.output))

    def on_gradient(self, channel: Channel) -> None:
        msg = channel.receive(CLIENT_TO_SERVER, GRADIENT)
        grads2, g1 = backward(self.segment.net, self._trace2, msg.payload)
        sgd_momentum_step(self.segment.net.parameters(), grads2, self.segment.opt)
        self._trace2 = None
        channel.send(ProtocolMessage(SERVER_TO_CLIENT, GRADIENT, msg.batch_id, self.outgoing_gradient(g1)))

    # hooks for a malicious server
    def observe_activation(self, o1: np.ndarray) -> None:
        pass

    def outgoing_gradient(self, g1: np.ndarray) -> np.ndarray:
        return g1


def run_round(client: Client, server: Server, channel: Channel, x: np.ndarray, y) -> float:
    """Drive one protocol round and return the client's task loss."""
    bid = channel.new_batch()
    client.send_activation(channel, x, bid)
    server.on_activation(channel)
    loss = client.compute_loss(channel, y)
    server.on_gradient(channel)
    client.apply_gradient(channel)
    channel.rounds += 1
    return loss


def honest_round(model: SplitModel, x: np.ndarray, y, channel: Channel | None = None) -> float:
    channel = channel if channel is not None else Channel(keep_trace=False)
    return run_round(Client(model), Server(model.server), channel, x, y)


# --------------------------------------------------------------------------
# multi-client training
# --------------------------------------------------------------------------


def batch_schedule(
    client_datasets: Sequence[Dataset], rounds: int, batch_size: int, seed: int
) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
    """Yield ``(client, x, y)`` for each round, clients taking turns.

    Each client walks its own shard in freshly shuffled epochs. The sequence
    depends only on the shards, ``batch_size`` and ``seed``.
    """
    if not client_datasets:
        raise InputError("need at least one client dataset")
    if any(len(ds) == 0 for ds in client_datasets):
        raise InputError("client dataset is empty")
    rng = np.random.default_rng(seed)
    orders = [rng.permutation(len(ds)) for ds in client_datasets]
    cursors = [0] * len(client_datasets)
    for t in range(rounds):
        k = t % len(client_datasets)
        ds = client_datasets[k]
        bs = min(batch_size, len(ds))
        if cursors[k] + bs > len(ds):
            orders[k] = rng.permutation(len(ds))
            cursors[k] = 0
        idx = orders[k][cursors[k] : cursors[k] + bs]
        cursors[k] += bs
        yield k, ds.images[idx], ds.labels[idx]


def train_rounds(
    model: SplitModel,
    client_datasets: Sequence[Dataset],
    rounds: int,
    server: Server,
    batch_size: int = 32,
    seed: int = 0,
    channel: Channel | None = None,
    on_round: Callable[[int, float], None] | None = None,
) -> list[float]:
    channel = channel if channel is not None else Channel(keep_trace=False)
    client = Client(model)
    losses = []
    for t, (_, x, y) in enumerate(batch_schedule(client_datasets, rounds, batch_size, seed)):
        loss = run_round(client, server, channel, x, y)
        losses.append(loss)
        if on_round is not None:
            on_round(t, loss)
    return losses


def train_honest(
    model: SplitModel,
    client_datasets: Sequence[Dataset],
    rounds: int,
    batch_size: int = 32,
    seed: int = 0,
    channel: Channel | None = None,
    on_round: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Run ``rounds`` honest rounds with round-robin clients sharing one model."""
    return train_rounds(model, client_datasets, rounds, Server(model.server), batch_size, seed, channel, on_round)
