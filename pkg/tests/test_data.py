import gzip
import struct

import numpy as np
import pytest

from splitattack.data import (
    ATTACKER_POOL_SIZES,
    Dataset,
    FormatError,
    PartitionPlan,
    SynthSpec,
    load_idx,
    partition,
    synth_task,
)
from splitattack.engine import InputError


def write_idx(path, magic, dims, payload, compress=False):
    """Byte-level IDX writer used as an independent fixture builder."""
    blob = struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)
    path.write_bytes(gzip.compress(blob) if compress else blob)


@pytest.fixture
def idx_pair(tmp_path):
    pixels = [(i * 37) % 256 for i in range(4 * 3 * 2)]
    write_idx(tmp_path / "img", 0x803, (4, 3, 2), pixels)
    write_idx(tmp_path / "lbl", 0x801, (4,), [3, 0, 7, 1])
    return tmp_path / "img", tmp_path / "lbl", pixels


def test_load_idx_fixture(idx_pair):
    img, lbl, pixels = idx_pair
    ds = load_idx(img, lbl)
    assert ds.images.shape == (4, 1, 3, 2)
    assert ds.labels.tolist() == [3, 0, 7, 1]
    assert ds.class_count == 8
    assert np.allclose(ds.images.reshape(-1), np.array(pixels) / 255.0)
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_load_idx_gzip(tmp_path):
    write_idx(tmp_path / "img.gz", 0x803, (2, 2, 2), range(8), compress=True)
    write_idx(tmp_path / "lbl.gz", 0x801, (2,), [1, 0], compress=True)
    ds = load_idx(tmp_path / "img.gz", tmp_path / "lbl.gz", class_count=2)
    assert ds.images.shape == (2, 1, 2, 2) and ds.class_count == 2


def test_load_idx_count_mismatch(tmp_path):
    write_idx(tmp_path / "img", 0x803, (3, 2, 2), range(12))
    write_idx(tmp_path / "lbl", 0x801, (2,), [0, 1])
    with pytest.raises(FormatError):
        load_idx(tmp_path / "img", tmp_path / "lbl")


def test_load_idx_bad_magic(tmp_path, idx_pair):
    _, lbl, _ = idx_pair
    write_idx(tmp_path / "bad", 0x802, (1, 2, 2), range(4))
    with pytest.raises(FormatError) as err:
        load_idx(tmp_path / "bad", lbl)
    assert err.value.offset == 0


def test_load_idx_empty_and_truncated(tmp_path, idx_pair):
    _, lbl, _ = idx_pair
    (tmp_path / "empty").write_bytes(b"")
    with pytest.raises(FormatError):
        load_idx(tmp_path / "empty", lbl)
    write_idx(tmp_path / "short", 0x803, (4, 3, 2), range(10))
    with pytest.raises(FormatError) as err:
        load_idx(tmp_path / "short", lbl)
    assert err.value.offset == 16 + 10


def test_dataset_validation():
    with pytest.raises(InputError):
        Dataset(np.zeros((2, 1, 3, 3)), [0], 2)
    with pytest.raises(InputError):
        Dataset(np.zeros((2, 1, 3, 3)), [0, 2], 2)
    with pytest.raises(InputError):
        Dataset(np.zeros((2, 9)), [0, 1], 2)


def test_synth_deterministic():
    a = synth_task(SynthSpec(samples_per_class=5), seed=3)
    b = synth_task(SynthSpec(samples_per_class=5), seed=3)
    c = synth_task(SynthSpec(samples_per_class=5), seed=4)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, c.images)


@pytest.mark.parametrize("generator", ["digits", "bars", "blobs"])
def test_synth_shapes_and_range(generator):
    ds = synth_task({"classes": 6, "size": 14, "samples_per_class": 4, "generator": generator}, seed=0)
    assert ds.images.shape == (24, 1, 14, 14)
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    assert np.bincount(ds.labels).tolist() == [4] * 6


def test_bars_class_means_differ():
    ds = synth_task(SynthSpec(classes=2, generator="bars", samples_per_class=20), seed=1)
    m0 = ds.images[ds.labels == 0].mean(axis=0)
    m1 = ds.images[ds.labels == 1].mean(axis=0)
    assert np.linalg.norm(m0 - m1) > 0


@pytest.mark.parametrize("bad", [dict(classes=0), dict(generator="waves"), dict(size=8), dict(classes=11)])
def test_synth_spec_validation(bad):
    with pytest.raises(InputError):
        synth_task(SynthSpec(**bad), seed=0)


def test_iid_partition_sizes():
    ds = synth_task(SynthSpec(samples_per_class=400), seed=0)
    shards, pool = partition(ds, PartitionPlan(n_clients=10, scheme="iid", seed=0))
    assert [len(s) for s in shards] == [400] * 10
    assert len(pool) == 0


def test_label_shards_two_labels_each():
    ds = synth_task(SynthSpec(samples_per_class=30), seed=0)
    shards, _ = partition(ds, PartitionPlan(n_clients=10, scheme="label-shards", labels_per_client=2, seed=1))
    assert all(len(np.unique(s.labels)) == 2 for s in shards)


def _row_keys(ds):
    return {row.tobytes() for row in ds.images.reshape(len(ds), -1)}


@pytest.mark.parametrize("scheme", ["iid", "label-shards", "dirichlet"])
def test_partition_disjoint_and_reproducible(scheme):
    ds = synth_task(SynthSpec(samples_per_class=40, noise=0.3), seed=2)
    plan = PartitionPlan(n_clients=5, scheme=scheme, seed=9, client_fraction=0.8, attacker_size=60)
    shards, pool = partition(ds, plan)
    again, pool2 = partition(ds, plan)
    keys = [_row_keys(s) for s in shards] + [_row_keys(pool)]
    total = sum(len(k) for k in keys)
    assert len(set().union(*keys)) == total
    assert len(pool) == 60
    assert all(np.array_equal(a.images, b.images) for a, b in zip(shards, again))
    assert np.array_equal(pool.images, pool2.images)


def test_shifted_pool_uses_other_generator():
    ds = synth_task(SynthSpec(samples_per_class=20), seed=0)
    _, pool = partition(ds, PartitionPlan(n_clients=2, attacker_size=128, attacker_source="shifted", seed=0))
    assert len(pool) == 128 and pool.sample_shape == ds.sample_shape
    assert not (_row_keys(pool) & _row_keys(ds))


def test_partition_errors():
    ds = synth_task(SynthSpec(samples_per_class=2, classes=3), seed=0)
    with pytest.raises(InputError):
        partition(ds, PartitionPlan(n_clients=10))
    with pytest.raises(InputError):
        partition(ds, PartitionPlan(n_clients=2, client_fraction=0.5, attacker_size=50))
    with pytest.raises(InputError):
        partition(ds, PartitionPlan(n_clients=0))


def test_pool_size_presets():
    assert ATTACKER_POOL_SIZES == (128, 256, 1024, 2048, 4096)
