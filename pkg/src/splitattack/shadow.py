"""Malicious-server shadow training of substitute input layers.

During ordinary split training the server fits its own copy of the input
layers to the ``o1`` activations it receives, using unlabeled attacker data,
and folds the similarity gradient into the gradient it returns to clients.
Clients see messages of the usual kinds and shapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Dataset
from .engine import (
    ConfigurationError,
    InputError,
    Network,
    OptimizerState,
    Shape,
    backward,
    build_network,
    forward,
    sgd_momentum_step,
)
from .protocol import Channel, Client, Segment, Server, SplitModel, run_round, train_rounds


def default_shadow_arch(input_shape: Shape, o1_shape: Shape, kernel: int = 3) -> list[dict]:
    """Two same-padded convolutions joined by a skip connection.

    A projection conv maps the input channels to ``o1``'s channels (striding
    down when ``o1`` is an integer factor smaller), then a residual block adds
    a conv-relu-conv branch on top.
    """
    if len(o1_shape) != 3 or len(input_shape) != 3:
        raise ConfigurationError(f"default shadow needs image-shaped o1, got {o1_shape}")
    h, w = input_shape[1:]
    ho, wo = o1_shape[1:]
    stride = h // ho if ho else 0
    if stride < 1 or (h + stride - 1) // stride != ho or (w + stride - 1) // stride != wo:
        raise ConfigurationError(f"o1 spatial size {o1_shape[1:]} is not a stride of input {input_shape[1:]}")
    return [
        {"kind": "conv2d", "out_channels": int(o1_shape[0]), "kernel": kernel, "stride": stride, "padding": kernel // 2},
        {"kind": "residual-block", "kernel": kernel},
    ]


@dataclass
class ShadowConfig:
    alpha: float = 1.0
    shadow_arch: list[dict] | None = None
    shadow_lr: float = 0.01
    attacker_dataset: Dataset | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.alpha < 0:
            raise ConfigurationError("alpha must be non-negative")
        if self.shadow_lr <= 0:
            raise ConfigurationError("shadow_lr must be positive")
        if self.attacker_dataset is None or len(self.attacker_dataset) == 0:
            raise InputError("shadow training needs a non-empty attacker dataset")


@dataclass
class ShadowState:
    net: Network
    opt: OptimizerState
    rng: np.random.Generator
    sim_history: list[float] = field(default_factory=list)

    def window_means(self, window: int = 100) -> list[float]:
        h = np.asarray(self.sim_history)
        return [float(h[i : i + window].mean()) for i in range(0, len(h), window)]


def init_shadow(cfg: ShadowConfig, model: SplitModel) -> ShadowState:
    """Build the shadow input layers for ``model`` from ``cfg`` (plain SGD)."""
    cfg.validate()
    input_shape = model.input.net.input_shape
    o1_shape = model.input.net.output_shape
    if cfg.attacker_dataset.sample_shape != input_shape:
        raise ConfigurationError(f"attacker samples {cfg.attacker_dataset.sample_shape} != client inputs {input_shape}")
    arch = cfg.shadow_arch if cfg.shadow_arch is not None else default_shadow_arch(input_shape, o1_shape)
    net = build_network(input_shape, arch, seed=cfg.seed + 104729)
    if net.output_shape != o1_shape:
        raise ConfigurationError(f"shadow output {net.output_shape} != o1 shape {o1_shape}")
    return ShadowState(net, OptimizerState(net, cfg.shadow_lr, 0.0), np.random.default_rng(cfg.seed + 15485863))


def sim_loss(shadow_out: np.ndarray, o1: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Batch mean of per-sample L2 distances and its gradients.

    Returns ``(loss, d loss / d shadow_out, d loss / d o1)``. Samples whose
    distance is exactly zero contribute a zero subgradient.
    """
    if shadow_out.shape != o1.shape:
        raise ConfigurationError(f"shadow output {shadow_out.shape} != o1 {o1.shape}; wrong shadow_arch?")
    n = shadow_out.shape[0]
    diff = (shadow_out - o1).reshape(n, -1)
    norms = np.sqrt(np.sum(diff * diff, axis=1))
    safe = np.where(norms > 0, norms, 1.0)
    g = (diff / (safe[:, None] * n)).reshape(shadow_out.shape)
    g[norms == 0] = 0.0
    return float(norms.mean()), g, -g


def fuse_gradients(g1: np.ndarray, g2: np.ndarray, alpha: float) -> np.ndarray:
    if g1.shape != g2.shape:
        raise RuntimeError(f"cannot fuse gradients of shapes {g1.shape} and {g2.shape}")
    if alpha == 0:
        return g1.copy()
    return g1 + alpha * g2


class ShadowServer(Server):
    """Server that trains shadow input layers and tampers with the returned gradient."""

    def __init__(self, segment: Segment, state: ShadowState, cfg: ShadowConfig):
        super().__init__(segment)
        self.state = state
        self.cfg = cfg
        self._g2 = None

    def observe_activation(self, o1: np.ndarray) -> None:
        pool = self.cfg.attacker_dataset
        idx = self.state.rng.integers(0, len(pool), size=o1.shape[0])
        trace = forward(self.state.net, pool.images[idx])
        loss, g_shadow, self._g2 = sim_loss(trace.output, o1)
        grads, _ = backward(self.state.net, trace, g_shadow, need_input=False)
        sgd_momentum_step(self.state.net.parameters(), grads, self.state.opt)
        self.state.sim_history.append(loss)

    def outgoing_gradient(self, g1: np.ndarray) -> np.ndarray:
        g = fuse_gradients(g1, self._g2, self.cfg.alpha)
        self._g2 = None
        return g


def shadow_round(
    model: SplitModel, state: ShadowState, cfg: ShadowConfig, x: np.ndarray, y, channel: Channel | None = None
) -> float:
    channel = channel if channel is not None else Channel(keep_trace=False)
    return run_round(Client(model), ShadowServer(model.server, state, cfg), channel, x, y)


def train_shadow(
    model: SplitModel,
    client_datasets: Sequence[Dataset],
    rounds: int,
    cfg: ShadowConfig,
    state: ShadowState | None = None,
    batch_size: int = 32,
    seed: int = 0,
    channel: Channel | None = None,
    on_round: Callable[[int, float], None] | None = None,
) -> tuple[list[float], ShadowState]:
    """Split training with a malicious server; returns task losses and the shadow state."""
    state = state if state is not None else init_shadow(cfg, model)
    server = ShadowServer(model.server, state, cfg)
    losses = train_rounds(model, client_datasets, rounds, server, batch_size, seed, channel, on_round)
    return losses, state
