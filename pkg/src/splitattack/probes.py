"""Measurements that check the reasoning behind the attack on concrete models.

* ``d_hat``: worst-case output gap between the real and the shadow input layers
  over a finite probe set.
* ``alignment_cos``: how well one-step perturbations crafted through the shadow
  agree with the ones crafted through the real input layers.
* ``sign_fraction``: how often the task-loss gradient at the server output
  points against the server output itself.
* ``transfer_cos``: cosine between clean and attacked server outputs on the real
  pipeline.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .attack import AttackConfig, DegenerateInputError, craft
from .data import Dataset
from .engine import DTYPE, Network, backward, forward, softmax


@dataclass
class ProbeReport:
    d_hat: float
    alignment_cos: float
    sign_fraction: float
    transfer_cos: float
    # fraction of samples where real and proxy server outputs have a positive dot product
    o2_agreement: float

    def to_dict(self) -> dict:
        return asdict(self)


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(len(a), -1)


def _row_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = _flat(a), _flat(b)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na * nb
    out = np.zeros(len(a))
    ok = denom > 0
    out[ok] = np.einsum("ij,ij->i", a[ok], b[ok]) / denom[ok]
    return np.clip(out, -1.0, 1.0)


def _batched(net: Network, x: np.ndarray, batch: int = 512) -> np.ndarray:
    return np.concatenate([forward(net, x[i : i + batch], keep_outputs=False).output for i in range(0, len(x), batch)])


def probe_output_distance(theta1: Network, theta1p: Network, probe_x: np.ndarray) -> float:
    """Largest per-sample L2 distance between the two input-layer stacks on ``probe_x``."""
    if len(probe_x) == 0:
        raise ValueError("empty probe set")
    diff = _flat(_batched(theta1, probe_x) - _batched(theta1p, probe_x))
    return float(np.max(np.linalg.norm(diff, axis=1)))


def probe_alignment(
    theta1: Network, theta1p: Network, theta2: Network, x: np.ndarray, cfg: AttackConfig | None = None
) -> float:
    """Mean per-sample cosine between the one-step deltas crafted through the shadow and the real layers.

    Both deltas come from :func:`craft` with ``cfg`` forced to a single step
    and no input-range clamp: the clamp is the same projection for both
    pipelines and would add agreement that has nothing to do with the layers.
    Samples where either pipeline has a zero clean output get no delta and are
    left out; if none remain the alignment is 0.
    """
    if len(x) == 0:
        raise ValueError("empty sample set")
    cfg = replace(cfg if cfg is not None else AttackConfig(), K=1, input_range=(-np.inf, np.inf))
    x = np.asarray(x, dtype=DTYPE)
    shadow_pipe = Network(theta1p.layers + theta2.layers)
    true_pipe = Network(theta1.layers + theta2.layers)
    live = (np.linalg.norm(_flat(_batched(shadow_pipe, x)), axis=1) > 0) & (
        np.linalg.norm(_flat(_batched(true_pipe, x)), axis=1) > 0
    )
    if not np.any(live):
        return 0.0
    d_shadow = craft(shadow_pipe, x[live], cfg).delta
    d_true = craft(true_pipe, x[live], cfg).delta
    return float(np.mean(_row_cosines(d_shadow, d_true)))


def closed_form_delta(theta1p: Network, theta2: Network, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Perturbation of L2 norm ``epsilon`` minimising the linearised ``o2 . F(x + delta)``.

    ``o2`` is the clean proxy output, so the direction is ``-J^T o2`` with ``J``
    the proxy Jacobian at ``x``; each sample is normalised separately.
    """
    x = np.asarray(x, dtype=DTYPE)
    if epsilon == 0:
        return np.zeros_like(x)
    proxy = Network(theta1p.layers + theta2.layers)
    trace = forward(proxy, x, keep_outputs=False)
    _, g = backward(proxy, trace, trace.output)
    norms = np.linalg.norm(_flat(g), axis=1)
    if np.any(norms == 0):
        raise DegenerateInputError("zero gradient of the linearised objective")
    return -(epsilon * _flat(g) / norms[:, None]).reshape(x.shape)


def loss_gradient_inner(theta3: Network, o2: np.ndarray, labels) -> np.ndarray:
    """Per-sample ``dL/do2 . o2`` for the cross-entropy head ``theta3``."""
    labels = np.asarray(labels, dtype=np.int64)
    trace = forward(theta3, o2, keep_outputs=False)
    g = softmax(trace.output)
    g[np.arange(len(labels)), labels] -= 1.0
    _, g_o2 = backward(theta3, trace, g)
    return np.einsum("ij,ij->i", _flat(g_o2), _flat(o2))


def probe_loss_sign(theta1: Network, theta2: Network, theta3: Network, testset: Dataset) -> float:
    """Fraction of test samples where the loss gradient at ``o2`` has a negative inner product with ``o2``."""
    o2 = _batched(Network(theta1.layers + theta2.layers), testset.images)
    inner = loss_gradient_inner(theta3, o2, testset.labels)
    return float(np.mean(inner < 0))


def probe_transfer(theta1: Network, theta2: Network, x: np.ndarray, x_adv: np.ndarray) -> float:
    """Mean cosine between clean and adversarial server outputs on the real pipeline."""
    true_pipe = Network(theta1.layers + theta2.layers)
    return float(np.mean(_row_cosines(_batched(true_pipe, x), _batched(true_pipe, x_adv))))


def run_probes(
    theta1: Network,
    theta1p: Network,
    theta2: Network,
    theta3: Network,
    testset: Dataset,
    probe_x: np.ndarray,
    cfg: AttackConfig,
    x_adv: np.ndarray | None = None,
) -> ProbeReport:
    """All probes on one trained model; ``probe_x`` is the set used for ``d_hat``."""
    if x_adv is None:
        x_adv = craft(Network(theta1p.layers + theta2.layers), testset.images, cfg).x_adv
    o2_true = _batched(Network(theta1.layers + theta2.layers), testset.images)
    o2_proxy = _batched(Network(theta1p.layers + theta2.layers), testset.images)
    agree = np.einsum("ij,ij->i", _flat(o2_true), _flat(o2_proxy)) > 0
    return ProbeReport(
        d_hat=probe_output_distance(theta1, theta1p, probe_x),
        alignment_cos=probe_alignment(theta1, theta1p, theta2, testset.images, cfg),
        sign_fraction=probe_loss_sign(theta1, theta2, theta3, testset),
        transfer_cos=probe_transfer(theta1, theta2, testset.images, x_adv),
        o2_agreement=float(np.mean(agree)),
    )
