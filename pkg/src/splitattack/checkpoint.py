"""SLNN binary checkpoints (little-endian).

Layout::

    b"SLNN"  u32 version  u32 layer_count
    per layer:
        u8 kind code
        u32 n_hyper, i32 x n_hyper      -- [ndim_in, *input_shape, *kind hyperparameters]
        u32 n_tensors
        per tensor: u32 ndim, u32 x ndim dims, f64 x prod(dims) payload

Tensor bundles (adversarial dumps) reuse the layout with one kind-255 record
per tensor and an empty hyperparameter block.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .engine import DTYPE, Layer, Network, make_layer

MAGIC = b"SLNN"
VERSION = 1
TENSOR_KIND = 255

KIND_CODES = {"dense": 1, "conv2d": 2, "relu": 3, "avgpool2d": 4, "flatten": 5, "residual-block": 6}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}
HYPER_NAMES = {
    "dense": ("units",),
    "conv2d": ("out_channels", "kernel", "stride", "padding"),
    "avgpool2d": ("size",),
    "residual-block": ("kernel",),
    "relu": (),
    "flatten": (),
}


class CheckpointError(ValueError):
    pass


def _pack_tensor(t: np.ndarray) -> bytes:
    t = np.asarray(t, dtype="<f8")
    return struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape) + t.tobytes()


def _pack_record(code: int, hyper: Sequence[int], tensors: Sequence[np.ndarray]) -> bytes:
    out = [struct.pack("<BI", code, len(hyper)), struct.pack(f"<{len(hyper)}i", *hyper)]
    out.append(struct.pack("<I", len(tensors)))
    out.extend(_pack_tensor(t) for t in tensors)
    return b"".join(out)


def _write(path, records: list[bytes]) -> None:
    blob = MAGIC + struct.pack("<II", VERSION, len(records)) + b"".join(records)
    Path(path).write_bytes(blob)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        vals = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return vals

    def tensor(self) -> np.ndarray:
        (ndim,) = self.take("<I")
        dims = self.take(f"<{ndim}I")
        count = int(np.prod(dims)) if ndim else 1
        if self.pos + 8 * count > len(self.raw):
            raise CheckpointError(f"truncated tensor payload at byte {self.pos}")
        arr = np.frombuffer(self.raw, dtype="<f8", count=count, offset=self.pos).reshape(dims)
        self.pos += 8 * count
        return arr.astype(DTYPE)


def _read_records(path) -> list[tuple[int, list[int], list[np.ndarray]]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an SLNN file")
    r = _Reader(raw)
    r.pos = 4
    version, count = r.take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported SLNN version {version}")
    records = []
    for _ in range(count):
        code, n_hyper = r.take("<BI")
        hyper = list(r.take(f"<{n_hyper}i"))
        (n_tensors,) = r.take("<I")
        records.append((code, hyper, [r.tensor() for _ in range(n_tensors)]))
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return records


def save_network(net: Network, path) -> None:
    records = []
    for layer in net.layers:
        hyper = [len(layer.input_shape), *layer.input_shape, *layer.hyper()]
        records.append(_pack_record(KIND_CODES[layer.kind], hyper, list(layer.params.values())))
    _write(path, records)


def _layer_from_record(code: int, hyper: list[int], tensors: list[np.ndarray]) -> Layer:
    if code not in CODE_KINDS:
        raise CheckpointError(f"unknown layer kind code {code}")
    kind = CODE_KINDS[code]
    ndim = hyper[0]
    input_shape = tuple(hyper[1 : 1 + ndim])
    kwargs = dict(zip(HYPER_NAMES[kind], hyper[1 + ndim :]))
    layer = make_layer(kind, input_shape, rng=np.random.default_rng(0), **kwargs)
    if len(tensors) != len(layer.params):
        raise CheckpointError(f"{kind} expects {len(layer.params)} tensors, found {len(tensors)}")
    for key, t in zip(layer.params, tensors):
        if t.shape != layer.params[key].shape:
            raise CheckpointError(f"{kind}.{key} has shape {t.shape}, expected {layer.params[key].shape}")
        layer.params[key] = t
    return layer


def load_network(path) -> Network:
    return Network([_layer_from_record(*rec) for rec in _read_records(path)])


def save_tensors(path, tensors: Sequence[np.ndarray]) -> None:
    _write(path, [_pack_record(TENSOR_KIND, [], [t]) for t in tensors])


def load_tensors(path) -> list[np.ndarray]:
    out = []
    for code, _, tensors in _read_records(path):
        if code != TENSOR_KIND:
            raise CheckpointError(f"{path}: expected a tensor bundle, found layer code {code}")
        out.extend(tensors)
    return out
