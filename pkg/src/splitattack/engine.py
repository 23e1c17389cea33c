"""Minimal numpy neural-network engine with hand-written backward passes.

All tensors are float64 ``numpy.ndarray`` values with the batch on the leading
axis. Layers carry their own parameters in a ``params`` dict; gradients are
returned as dicts with the same keys so optimizers can zip them together.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ConfigurationError(ValueError):
    """Raised when shapes, plans or layer stacks do not compose."""


class InputError(ValueError):
    """Raised for out-of-range labels, empty datasets and similar bad inputs."""


Shape = tuple[int, ...]


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------


def he_uniform(rng: np.random.Generator, shape: Shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


class Layer:
    """Base class. ``input_shape`` is the per-sample shape (no batch axis)."""

    kind: str = ""

    def __init__(self, input_shape: Shape):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.params: dict[str, np.ndarray] = {}

    @property
    def output_shape(self) -> Shape:
        return self.input_shape

    def hyper(self) -> list[int]:
        """Integer hyperparameters beyond the input shape, in checkpoint order."""
        return []

    def forward(self, x: np.ndarray):
        raise NotImplementedError

    def backward(self, cache, grad_out: np.ndarray, need_input: bool = True):
        """Return ``(grad_in, param_grads)``; ``grad_in`` may be None when not needed."""
        raise NotImplementedError

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def __repr__(self) -> str:
        return f"{type(self).__name__}(in={self.input_shape}, out={self.output_shape})"


class Dense(Layer):
    kind = "dense"

    def __init__(self, input_shape: Shape, units: int, rng: np.random.Generator | None = None):
        super().__init__(input_shape)
        if len(self.input_shape) != 1:
            raise ConfigurationError(f"dense expects flat input, got {self.input_shape}")
        self.units = int(units)
        fan_in = self.input_shape[0]
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            "W": he_uniform(rng, (self.units, fan_in), fan_in),
            "b": np.zeros(self.units, dtype=DTYPE),
        }

    @property
    def output_shape(self) -> Shape:
        return (self.units,)

    def hyper(self) -> list[int]:
        return [self.units]

    def forward(self, x):
        return x @ self.params["W"].T + self.params["b"], x

    def backward(self, cache, grad_out, need_input=True):
        x = cache
        grads = {"W": grad_out.T @ x, "b": grad_out.sum(axis=0)}
        return (grad_out @ self.params["W"] if need_input else None), grads


def _im2col(xp, kh, kw, ho, wo, stride):
    """(N, C, Hp, Wp) -> (N, C*kh*kw, ho*wo), columns ordered like a (C, kh, kw) filter."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _pad(x, p):
    if not p:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=DTYPE)
    xp[:, :, p:-p, p:-p] = x
    return xp


def _conv_forward(x, W, b, stride, padding):
    n, _, h, w = x.shape
    o, c, kh, kw = W.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = _im2col(_pad(x, padding), kh, kw, ho, wo, stride)
    out = W.reshape(o, -1) @ cols + b[:, None]
    return out.reshape(n, o, ho, wo), cols


def _conv_backward(x_shape, cols, W, grad_out, stride, padding, need_input=True):
    n, c, h, w = x_shape
    o, _, kh, kw = W.shape
    ho, wo = grad_out.shape[2:]
    g = grad_out.reshape(n, o, ho * wo)
    dW = (g @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(W.shape)
    db = g.sum(axis=(0, 2))
    if not need_input:
        return None, dW, db
    if stride == 1 and kh - 1 - padding >= 0 and kw == kh:
        # stride-1 input gradient is a full correlation with the flipped filters
        q = kh - 1 - padding
        gcols = _im2col(_pad(grad_out, q), kh, kw, h, w, 1)
        wt = W[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
        return (wt @ gcols).reshape(n, c, h, w), dW, db
    dcols = (W.reshape(o, -1).T @ g).reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp, dW, db


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(
        self,
        input_shape: Shape,
        out_channels: int,
        kernel: int = 3,
        stride: int = 1,
        padding: int = 0,
        rng: np.random.Generator | None = None,
    ):
        super().__init__(input_shape)
        if len(self.input_shape) != 3:
            raise ConfigurationError(f"conv2d expects (C, H, W) input, got {self.input_shape}")
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.padding = int(padding)
        c = self.input_shape[0]
        if min(self.output_shape[1:]) < 1:
            raise ConfigurationError(f"conv2d kernel {kernel} too large for {self.input_shape}")
        fan_in = c * self.kernel * self.kernel
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            "W": he_uniform(rng, (self.out_channels, c, self.kernel, self.kernel), fan_in),
            "b": np.zeros(self.out_channels, dtype=DTYPE),
        }

    @property
    def output_shape(self) -> Shape:
        _, h, w = self.input_shape
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        return (self.out_channels, ho, wo)

    def hyper(self) -> list[int]:
        return [self.out_channels, self.kernel, self.stride, self.padding]

    def forward(self, x):
        out, cols = _conv_forward(x, self.params["W"], self.params["b"], self.stride, self.padding)
        return out, (x.shape, cols)

    def backward(self, cache, grad_out, need_input=True):
        x_shape, cols = cache
        dx, dW, db = _conv_backward(
            x_shape, cols, self.params["W"], grad_out, self.stride, self.padding, need_input
        )
        return dx, {"W": dW, "b": db}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, cache, grad_out, need_input=True):
        return grad_out * cache, {}


class AvgPool2D(Layer):
    """Non-overlapping average pooling; spatial dims must divide by the pool size."""

    kind = "avgpool2d"

    def __init__(self, input_shape: Shape, size: int = 2):
        super().__init__(input_shape)
        self.size = int(size)
        if len(self.input_shape) != 3:
            raise ConfigurationError(f"avgpool2d expects (C, H, W) input, got {self.input_shape}")
        _, h, w = self.input_shape
        if h % self.size or w % self.size:
            raise ConfigurationError(f"avgpool2d size {size} does not divide {self.input_shape}")

    @property
    def output_shape(self) -> Shape:
        c, h, w = self.input_shape
        return (c, h // self.size, w // self.size)

    def hyper(self) -> list[int]:
        return [self.size]

    def forward(self, x):
        n, c, h, w = x.shape
        k = self.size
        return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5)), x.shape

    def backward(self, cache, grad_out, need_input=True):
        k = self.size
        g = np.repeat(np.repeat(grad_out, k, axis=2), k, axis=3) / (k * k)
        return g, {}


class Flatten(Layer):
    kind = "flatten"

    @property
    def output_shape(self) -> Shape:
        return (int(np.prod(self.input_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, grad_out, need_input=True):
        return grad_out.reshape(cache), {}


class ResidualBlock(Layer):
    """``y = x + conv2(relu(conv1(x)))`` with same-padded 3x3-style convs."""

    kind = "residual-block"

    def __init__(self, input_shape: Shape, kernel: int = 3, rng: np.random.Generator | None = None):
        super().__init__(input_shape)
        if len(self.input_shape) != 3:
            raise ConfigurationError(f"residual-block expects (C, H, W) input, got {self.input_shape}")
        if kernel % 2 != 1:
            raise ConfigurationError("residual-block kernel must be odd to preserve shape")
        self.kernel = int(kernel)
        self.padding = self.kernel // 2
        c = self.input_shape[0]
        fan_in = c * self.kernel * self.kernel
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            "W1": he_uniform(rng, (c, c, self.kernel, self.kernel), fan_in),
            "b1": np.zeros(c, dtype=DTYPE),
            "W2": he_uniform(rng, (c, c, self.kernel, self.kernel), fan_in),
            "b2": np.zeros(c, dtype=DTYPE),
        }

    def hyper(self) -> list[int]:
        return [self.kernel]

    def forward(self, x):
        p = self.params
        h, cols1 = _conv_forward(x, p["W1"], p["b1"], 1, self.padding)
        mask = h > 0
        a = h * mask
        r, cols2 = _conv_forward(a, p["W2"], p["b2"], 1, self.padding)
        return x + r, (x.shape, cols1, mask, a.shape, cols2)

    def backward(self, cache, grad_out, need_input=True):
        x_shape, cols1, mask, a_shape, cols2 = cache
        p = self.params
        da, dW2, db2 = _conv_backward(a_shape, cols2, p["W2"], grad_out, 1, self.padding)
        dh = da * mask
        dx, dW1, db1 = _conv_backward(x_shape, cols1, p["W1"], dh, 1, self.padding, need_input)
        grads = {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}
        return (grad_out + dx if need_input else None), grads


LAYER_KINDS: dict[str, type[Layer]] = {
    cls.kind: cls for cls in (Dense, Conv2D, ReLU, AvgPool2D, Flatten, ResidualBlock)
}


def make_layer(kind: str, input_shape: Shape, rng: np.random.Generator | None = None, **hp) -> Layer:
    """Build a layer from its kind name and keyword hyperparameters."""
    try:
        cls = LAYER_KINDS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown layer kind {kind!r}") from None
    if cls in (Dense, Conv2D, ResidualBlock):
        hp.setdefault("rng", rng)
    try:
        return cls(input_shape, **hp)
    except TypeError as exc:
        raise ConfigurationError(f"bad hyperparameters for {kind}: {exc}") from None


# --------------------------------------------------------------------------
# networks
# --------------------------------------------------------------------------


class Network:
    """An ordered layer stack whose adjacent shapes compose."""

    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)
        if not self.layers:
            raise ConfigurationError("network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.output_shape != nxt.input_shape:
                raise ConfigurationError(
                    f"{prev!r} output {prev.output_shape} does not feed {nxt!r} input {nxt.input_shape}"
                )

    @property
    def input_shape(self) -> Shape:
        return self.layers[0].input_shape

    @property
    def output_shape(self) -> Shape:
        return self.layers[-1].output_shape

    def __len__(self) -> int:
        return len(self.layers)

    def n_params(self) -> int:
        return sum(layer.n_params() for layer in self.layers)

    def parameters(self) -> list[dict[str, np.ndarray]]:
        return [layer.params for layer in self.layers]

    def copy(self) -> "Network":
        import copy

        return copy.deepcopy(self)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x).output


def build_network(input_shape: Shape, layer_specs: Sequence[dict], seed: int = 0) -> Network:
    """Instantiate a network from ``[{"kind": ..., **hyper}, ...]`` specs.

    Shapes are inferred layer by layer; weights use one seeded generator so the
    same specs and seed always give the same parameters.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(input_shape)
    layers = []
    for spec in layer_specs:
        spec = dict(spec)
        kind = spec.pop("kind")
        layer = make_layer(kind, shape, rng=rng, **spec)
        layers.append(layer)
        shape = layer.output_shape
    return Network(layers)


@dataclass
class ActivationTrace:
    """Per-layer caches from one forward pass, consumed by :func:`backward`."""

    input_shape: tuple
    caches: list
    outputs: list[np.ndarray] = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.outputs[-1]


def forward(net: Network, x: np.ndarray, keep_outputs: bool = True) -> ActivationTrace:
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[1:] != net.input_shape:
        raise ConfigurationError(f"input shape {x.shape[1:]} does not match network input {net.input_shape}")
    caches, outputs = [], []
    h = x
    for layer in net.layers:
        h, cache = layer.forward(h)
        caches.append(cache)
        if keep_outputs:
            outputs.append(h)
    if not keep_outputs:
        outputs.append(h)
    return ActivationTrace(x.shape, caches, outputs)


def backward(
    net: Network, trace: ActivationTrace, upstream: np.ndarray, need_input: bool = True
) -> tuple[list[dict[str, np.ndarray]], np.ndarray | None]:
    """Chain rule through ``net`` for a vector-Jacobian product with ``upstream``.

    With ``need_input=False`` the first layer skips its input gradient and
    ``None`` is returned in its place.
    """
    if len(trace.caches) != len(net.layers):
        raise ConfigurationError("activation trace does not belong to this network")
    if upstream.shape != trace.output.shape:
        raise ConfigurationError(f"upstream shape {upstream.shape} != output shape {trace.output.shape}")
    grads: list[dict[str, np.ndarray]] = [None] * len(net.layers)  # type: ignore[list-item]
    g = upstream
    for i in range(len(net.layers) - 1, -1, -1):
        g, grads[i] = net.layers[i].backward(trace.caches[i], g, need_input or i > 0)
    return grads, g


def input_gradient(net: Network, x: np.ndarray, upstream_fn) -> tuple[np.ndarray, np.ndarray]:
    """Forward ``x``, build an upstream gradient from the output, return (output, d/dx)."""
    trace = forward(net, x, keep_outputs=False)
    up = upstream_fn(trace.output)
    _, gx = backward(net, trace, up)
    return trace.output, gx


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Batch-mean cross-entropy and its gradient w.r.t. ``logits``.

    A 1-D ``logits`` vector with a scalar label is treated as a batch of one and
    the returned gradient keeps the 1-D shape.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    single = logits.ndim == 1
    if single:
        logits = logits[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = logits.shape
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"label out of range for {c} classes")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsumexp - z[rows, labels]))
    grad = softmax(logits)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, (grad[0] if single else grad)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


class OptimizerState:
    """Classic momentum SGD: ``v <- mu*v + g; p <- p - lr*v``."""

    def __init__(self, net: Network, lr: float, momentum: float = 0.0):
        if lr < 0:
            raise ConfigurationError("learning rate must be non-negative")
        if not 0.0 <= momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in net.parameters()]


def sgd_momentum_step(
    params: list[dict[str, np.ndarray]], grads: list[dict[str, np.ndarray]], state: OptimizerState
) -> None:
    """Update ``params`` and ``state`` in place."""
    if len(params) != len(grads) or len(params) != len(state.velocity):
        raise ConfigurationError("parameter, gradient and velocity lists differ in length")
    lr, mu = state.lr, state.momentum
    for p, g, v in zip(params, grads, state.velocity):
        for key, value in p.items():
            gk = g[key]
            if gk.shape != value.shape:
                raise ConfigurationError(f"gradient {key} shape {gk.shape} != parameter {value.shape}")
            if mu:
                v[key] *= mu
                v[key] += gk
                value -= lr * v[key]
            else:
                v[key][...] = gk
                value -= lr * gk


def train_step(net: Network, state: OptimizerState, x: np.ndarray, y) -> float:
    """One monolithic cross-entropy step on the whole network."""
    trace = forward(net, x)
    loss, g = softmax_cross_entropy(trace.output, y)
    grads, _ = backward(net, trace, g)
    sgd_momentum_step(net.parameters(), grads, state)
    return loss


def predict(net: Network, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = [forward(net, x[i : i + batch_size], keep_outputs=False).output.argmax(axis=1)
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(net: Network, x: np.ndarray, y) -> float:
    return float(np.mean(predict(net, x) == np.asarray(y)))


# --------------------------------------------------------------------------
# finite differences
# --------------------------------------------------------------------------


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (``x`` is restored afterwards)."""
    x = np.ascontiguousarray(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad
