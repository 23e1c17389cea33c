"""Feature-space adversarial examples crafted on a proxy (shadow input layers + server layers).

The proxy has no output layers, so instead of a label loss the attack lowers
the cosine similarity between the proxy's intermediate output on the clean
input and on the perturbed input, inside an infinity-norm ball.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .engine import DTYPE, ConfigurationError, Network, accuracy, backward, forward

log = logging.getLogger(__name__)

COS_FLOOR = 1e-12
# cosine this close to 1 means o2' is parallel to o2, where the cosine is stationary
STATIONARY_TOL = 1e-9


class DegenerateInputError(ValueError):
    """The clean intermediate output is the zero vector, so the cosine is undefined."""


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.3
    beta: float = 0.3
    K: int = 1
    input_range: tuple[float, float] = (0.0, 1.0)
    step: str = "sign"  # sign | raw

    def validate(self) -> None:
        lo, hi = self.input_range
        if hi <= lo:
            raise ConfigurationError("input_range must be increasing")
        if self.epsilon < 0 or self.epsilon > hi - lo:
            raise ConfigurationError(f"epsilon must lie in [0, {hi - lo}]")
        if self.beta <= 0:
            raise ConfigurationError("beta must be positive")
        if self.K < 1:
            raise ConfigurationError("K must be a positive integer")
        if self.step not in ("sign", "raw"):
            raise ConfigurationError(f"unknown step rule {self.step!r}")


@dataclass
class AdversarialBatch:
    x: np.ndarray
    delta: np.ndarray
    x_adv: np.ndarray
    skipped: int = 0


def attack_loss(o2: np.ndarray, o2p: np.ndarray):
    """Cosine similarity between clean ``o2`` and perturbed ``o2p``, with its gradient w.r.t. ``o2p``.

    Batched inputs give one cosine per sample and the per-sample gradients
    (no batch averaging). A 1-D pair gives a float and a 1-D gradient.
    """
    o2 = np.asarray(o2, dtype=DTYPE)
    o2p = np.asarray(o2p, dtype=DTYPE)
    if o2.shape != o2p.shape:
        raise ConfigurationError(f"shape mismatch {o2.shape} vs {o2p.shape}")
    single = o2.ndim == 1
    a = o2.reshape(1, -1) if single else o2.reshape(len(o2), -1)
    b = o2p.reshape(1, -1) if single else o2p.reshape(len(o2p), -1)
    na = np.linalg.norm(a, axis=1)
    if np.any(na == 0):
        raise DegenerateInputError("clean activation vector is zero")
    nb = np.linalg.norm(b, axis=1)
    denom = np.maximum(na * nb, COS_FLOOR)
    cos = np.einsum("ij,ij->i", a, b) / denom
    cos = np.clip(cos, -1.0, 1.0)
    nb_safe = np.maximum(nb, np.sqrt(COS_FLOOR))
    grad = a / denom[:, None] - cos[:, None] * b / (nb_safe**2)[:, None]
    if single:
        return float(cos[0]), grad[0]
    return cos, grad.reshape(o2p.shape)


def clip_to_budget(delta: np.ndarray, x: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Project ``delta`` into the epsilon box, then keep ``x + delta`` inside the input range.

    Entries that need no range clamp are left untouched, so the projection is
    idempotent bit for bit.
    """
    lo, hi = cfg.input_range
    d = np.clip(delta, -cfg.epsilon, cfg.epsilon)
    shifted = x + d
    over = shifted > hi
    under = shifted < lo
    d = np.where(over, hi - x, d)
    d = np.where(under, lo - x, d)
    return d


def _step_gradient(proxy: Network, x_adv: np.ndarray, o2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(cosines, d cos / d x)`` for every sample of ``x_adv``.

    Where ``o2'`` is still parallel to ``o2`` (always the case at delta = 0)
    the cosine gradient vanishes identically; those samples use the gradient of
    the linearised objective ``o2 . o2' / (|o2| |o2'|)`` with the ``|o2'|``
    factor held fixed, i.e. the direction that lowers ``o2 . F(x + delta)``.
    """
    trace = forward(proxy, x_adv, keep_outputs=False)
    o2p = trace.output
    cos, g = attack_loss(o2, o2p)
    n = len(o2)
    stationary = cos >= 1.0 - STATIONARY_TOL
    if np.any(stationary):
        a = o2.reshape(n, -1)
        b = o2p.reshape(n, -1)
        denom = np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), COS_FLOOR)
        lin = (a / denom[:, None]).reshape(o2.shape)
        g = np.where(stationary.reshape((n,) + (1,) * (o2.ndim - 1)), lin, g)
    _, gx = backward(proxy, trace, g)
    return cos, gx


def attack_direction(proxy: Network, x: np.ndarray) -> np.ndarray:
    """Descent direction of the first attack step (before any clipping)."""
    o2 = forward(proxy, x, keep_outputs=False).output
    _, gx = _step_gradient(proxy, np.asarray(x, dtype=DTYPE), o2)
    return -gx


def craft(proxy: Network, x: np.ndarray, cfg: AttackConfig, chunk: int = 256) -> AdversarialBatch:
    """Run ``K`` projected steps on the cosine loss starting from delta = 0.

    Samples whose clean proxy output is the zero vector are left unperturbed
    and counted in ``skipped``.
    """
    cfg.validate()
    x = np.asarray(x, dtype=DTYPE)
    delta = np.zeros_like(x)
    skipped = 0
    lo, hi = cfg.input_range
    for start in range(0, len(x), chunk):
        xs = x[start : start + chunk]
        o2 = forward(proxy, xs, keep_outputs=False).output
        norms = np.linalg.norm(o2.reshape(len(xs), -1), axis=1)
        live = norms > 0
        if not np.all(live):
            n_dead = int((~live).sum())
            skipped += n_dead
            log.warning("skipping %d samples with zero clean activation", n_dead)
        if not np.any(live) or cfg.epsilon == 0:
            continue
        xs, o2 = xs[live], o2[live]
        d = np.zeros_like(xs)
        for _ in range(cfg.K):
            _, g = _step_gradient(proxy, xs + d, o2)
            step = np.sign(g) if cfg.step == "sign" else g
            d = clip_to_budget(d - cfg.beta * step, xs, cfg)
        delta[start : start + chunk][live] = d
    x_adv = np.clip(x + delta, lo, hi)
    return AdversarialBatch(x, delta, x_adv, skipped)


def random_noise(x: np.ndarray, cfg: AttackConfig, seed: int = 0) -> AdversarialBatch:
    """Uniform noise in the same epsilon box, as a non-adversarial baseline."""
    rng = np.random.default_rng(seed)
    delta = clip_to_budget(rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), x, cfg)
    lo, hi = cfg.input_range
    return AdversarialBatch(x, delta, np.clip(x + delta, lo, hi))


@dataclass
class AttackReport:
    clean_accuracy: float
    adversarial_accuracy: float
    accuracy_drop: float  # percentage points
    random_noise_accuracy: float
    random_noise_drop: float
    skipped: int
    n_samples: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_attack(
    target: Network, testset: Dataset, proxy: Network, cfg: AttackConfig, seed: int = 0
) -> tuple[AttackReport, AdversarialBatch]:
    """Accuracy of the deployed model on clean, attacked and randomly perturbed test data."""
    if len(testset) == 0:
        raise ValueError("empty test set")
    adv = craft(proxy, testset.images, cfg)
    noise = random_noise(testset.images, cfg, seed)
    clean = accuracy(target, testset.images, testset.labels)
    adv_acc = accuracy(target, adv.x_adv, testset.labels)
    noise_acc = accuracy(target, noise.x_adv, testset.labels)
    report = AttackReport(
        clean_accuracy=clean,
        adversarial_accuracy=adv_acc,
        accuracy_drop=100.0 * (clean - adv_acc),
        random_noise_accuracy=noise_acc,
        random_noise_drop=100.0 * (clean - noise_acc),
        skipped=adv.skipped,
        n_samples=len(testset),
    )
    return report, adv


def export_batch(batch: AdversarialBatch, out_dir, cfg: AttackConfig, seed: int, name: str = "adv") -> None:
    """Write ``x``, ``delta`` and ``x_adv`` as an SLNN tensor bundle plus a JSON sidecar."""
    from .checkpoint import save_tensors

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_tensors(out / f"{name}.slnn", [batch.x, batch.delta, batch.x_adv])
    sidecar = {"epsilon": cfg.epsilon, "beta": cfg.beta, "K": cfg.K, "seed": seed,
               "tensors": ["x", "delta", "x_adv"], "step": cfg.step}
    (out / f"{name}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
