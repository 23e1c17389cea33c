"""Datasets: IDX ingestion, synthetic desk tasks and client/attacker partitioning."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import DTYPE, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

GENERATORS = ("digits", "bars", "blobs")

# presets for the attacker-pool sweep
ATTACKER_POOL_SIZES = (128, 256, 1024, 2048, 4096)


class FormatError(ValueError):
    """Malformed IDX data; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise InputError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise InputError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise InputError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count)


# --------------------------------------------------------------------------
# IDX files
# --------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{what} file too short for magic number", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"bad {what} magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{what} header truncated", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = int(np.prod(dims)) if dims else 0
    if len(raw) < header_end + count:
        raise FormatError(f"{what} payload truncated: need {count} bytes", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def load_idx(images_path, labels_path, class_count: int | None = None) -> Dataset:
    """Read an IDX image/label pair (optionally gzip-compressed), scaling pixels to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, "image")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, "label")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", 4)
    labels = labels.astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 1
    return Dataset(images[:, None, :, :].astype(DTYPE) / 255.0, labels, class_count)


# --------------------------------------------------------------------------
# synthetic tasks
# --------------------------------------------------------------------------

# seven-segment layout: (row0, row1, col0, col1) on a 10x6 glyph box
_SEGMENTS = {
    "a": (0, 2, 0, 6),
    "b": (0, 5, 4, 6),
    "c": (5, 10, 4, 6),
    "d": (8, 10, 0, 6),
    "e": (5, 10, 0, 2),
    "f": (0, 5, 0, 2),
    "g": (4, 6, 0, 6),
}
_DIGITS = ["abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg"]


@dataclass(frozen=True)
class SynthSpec:
    classes: int = 10
    size: int = 12
    samples_per_class: int = 500
    generator: str = "digits"
    noise: float = 0.1

    def validate(self) -> None:
        if self.classes < 1 or self.samples_per_class < 1:
            raise InputError("synthetic task needs positive classes and samples_per_class")
        if self.generator not in GENERATORS:
            raise InputError(f"unknown generator {self.generator!r}; choose from {GENERATORS}")
        if self.size < 12:
            raise InputError("synthetic images must be at least 12 pixels wide")
        if self.generator == "digits" and self.classes > len(_DIGITS):
            raise InputError("digits generator supports at most 10 classes")


def _glyph(label: int, size: int) -> np.ndarray:
    img = np.zeros((size, size), dtype=DTYPE)
    r0, c0 = (size - 10) // 2, (size - 6) // 2
    for seg in _DIGITS[label]:
        a, b, c, d = _SEGMENTS[seg]
        img[r0 + a : r0 + b, c0 + c : c0 + d] = 1.0
    return img


def _bar(label: int, classes: int, size: int) -> np.ndarray:
    img = np.zeros((size, size), dtype=DTYPE)
    half = (classes + 1) // 2
    slot = label % half
    pos = 1 + int(round(slot * (size - 4) / max(half - 1, 1)))
    if label < half:
        img[pos : pos + 2, 1:-1] = 1.0
    else:
        img[1:-1, pos : pos + 2] = 1.0
    return img


def _blob(label: int, classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    angle = 2 * np.pi * label / classes
    cy = size / 2 - 0.5 + 0.3 * size * np.sin(angle)
    cx = size / 2 - 0.5 + 0.3 * size * np.cos(angle)
    sigma = rng.uniform(1.2, 2.0)
    yy, xx = np.mgrid[0:size, 0:size]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))


def synth_task(spec: SynthSpec | dict, seed: int) -> Dataset:
    """Generate a deterministic, class-separable single-channel image task.

    Every sample is a class prototype shifted by up to one pixel, scaled by a
    random stroke intensity and corrupted with Gaussian pixel noise, then
    clipped to [0, 1]. Samples are shuffled with the same seed.
    """
    if isinstance(spec, dict):
        spec = SynthSpec(**spec)
    spec.validate()
    rng = np.random.default_rng(seed)
    n = spec.classes * spec.samples_per_class
    images = np.empty((n, 1, spec.size, spec.size), dtype=DTYPE)
    labels = np.repeat(np.arange(spec.classes), spec.samples_per_class)
    for i, label in enumerate(labels):
        if spec.generator == "digits":
            base = _glyph(int(label), spec.size)
        elif spec.generator == "bars":
            base = _bar(int(label), spec.classes, spec.size)
        else:
            base = _blob(int(label), spec.classes, spec.size, rng)
        dy, dx = rng.integers(-1, 2, size=2)
        base = np.roll(base, (dy, dx), axis=(0, 1))
        img = rng.uniform(0.6, 1.0) * base + rng.normal(0.0, spec.noise, base.shape)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    order = rng.permutation(n)
    return Dataset(images[order], labels[order], spec.classes)


# --------------------------------------------------------------------------
# partitioning
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PartitionPlan:
    n_clients: int = 10
    scheme: str = "iid"  # iid | label-shards | dirichlet
    seed: int = 0
    labels_per_client: int = 2
    concentration: float = 0.5
    client_fraction: float = 1.0
    attacker_size: int = 0
    attacker_source: str = "same"  # same | shifted
    attacker_generator: str = "bars"

    def validate(self) -> None:
        if self.n_clients < 1:
            raise InputError("need at least one client")
        if self.scheme not in ("iid", "label-shards", "dirichlet"):
            raise InputError(f"unknown partition scheme {self.scheme!r}")
        if not 0.0 < self.client_fraction <= 1.0:
            raise InputError("client_fraction must lie in (0, 1]")
        if self.attacker_source not in ("same", "shifted"):
            raise InputError(f"unknown attacker source {self.attacker_source!r}")
        if self.attacker_size < 0:
            raise InputError("attacker_size must be non-negative")


def _split_clients(labels: np.ndarray, idx: np.ndarray, plan: PartitionPlan, rng, class_count: int):
    n = plan.n_clients
    if plan.scheme == "iid":
        idx = rng.permutation(idx)
        per = len(idx) // n
        return [idx[i * per : (i + 1) * per] for i in range(n)]

    if plan.scheme == "label-shards":
        k = plan.labels_per_client
        if not 1 <= k <= class_count:
            raise InputError(f"labels_per_client must lie in [1, {class_count}]")
        owners: dict[int, list[int]] = {c: [] for c in range(class_count)}
        for client in range(n):
            for j in range(k):
                owners[(client * k + j) % class_count].append(client)
        shards: list[list[int]] = [[] for _ in range(n)]
        for c, clients in owners.items():
            members = rng.permutation(idx[labels[idx] == c])
            if not clients:
                continue
            if len(members) < len(clients):
                raise InputError(f"class {c} has too few samples for {len(clients)} clients")
            for part, client in zip(np.array_split(members, len(clients)), clients):
                shards[client].extend(part.tolist())
        return [np.sort(np.asarray(s, dtype=np.int64)) for s in shards]

    shards = [[] for _ in range(n)]
    for c in range(class_count):
        members = rng.permutation(idx[labels[idx] == c])
        props = rng.dirichlet(np.full(n, plan.concentration))
        cuts = (np.cumsum(props)[:-1] * len(members)).astype(int)
        for client, part in enumerate(np.split(members, cuts)):
            shards[client].extend(part.tolist())
    return [np.sort(np.asarray(s, dtype=np.int64)) for s in shards]


def partition(ds: Dataset, plan: PartitionPlan, shifted_spec: SynthSpec | None = None):
    """Split ``ds`` into client shards and build the attacker pool.

    A ``same`` attacker pool is drawn from the samples left over after the
    client fraction is taken; a ``shifted`` pool comes from a different
    synthetic generator and never touches ``ds``.
    """
    plan.validate()
    rng = np.random.default_rng(plan.seed)
    n_total = len(ds)
    order = rng.permutation(n_total)
    n_client_pool = int(round(plan.client_fraction * n_total))
    client_idx, rest_idx = order[:n_client_pool], order[n_client_pool:]
    if n_client_pool < plan.n_clients:
        raise InputError(f"{n_client_pool} samples cannot feed {plan.n_clients} clients")

    shards_idx = _split_clients(ds.labels, client_idx, plan, rng, ds.class_count)
    if any(len(s) == 0 for s in shards_idx):
        raise InputError("partition left a client without samples")
    shards = [ds.subset(s) for s in shards_idx]

    if plan.attacker_size == 0:
        pool = ds.subset(np.zeros(0, dtype=np.int64))
    elif plan.attacker_source == "same":
        if len(rest_idx) < plan.attacker_size:
            raise InputError(f"only {len(rest_idx)} held-out samples for an attacker pool of {plan.attacker_size}")
        pool = ds.subset(rest_idx[: plan.attacker_size])
    else:
        h = ds.sample_shape[1]
        spec = shifted_spec or SynthSpec(
            classes=ds.class_count,
            size=h,
            samples_per_class=-(-plan.attacker_size // ds.class_count),
            generator=plan.attacker_generator,
        )
        shifted = synth_task(spec, seed=plan.seed + 7919)
        pool = shifted.subset(np.arange(plan.attacker_size))
    return shards, pool
