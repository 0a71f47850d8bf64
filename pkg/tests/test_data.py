import gzip
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pipetrain.data import (IDX_IMAGES, IDX_LABELS, NORMALIZATION_PRESETS, BatchPlan, Dataset, batches, load_idx,
                            normalize, shuffled_order, synth_blobs, train_val_split, write_idx)


def _idx_pair(tmp_path, n=5, rows=3, cols=4, gz=False):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(n, rows, cols), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lbl.idx"
    write_idx(ip, images, IDX_IMAGES)
    write_idx(lp, labels, IDX_LABELS)
    if gz:
        for p in (ip, lp):
            p.with_suffix(".idx.gz").write_bytes(gzip.compress(p.read_bytes()))
        ip, lp = ip.with_suffix(".idx.gz"), lp.with_suffix(".idx.gz")
    return ip, lp, images, labels


@pytest.mark.parametrize("gz", [False, True])
def test_idx_round_trip(tmp_path, gz):
    ip, lp, images, labels = _idx_pair(tmp_path, gz=gz)
    ds = load_idx(ip, lp, num_classes=10)
    assert ds.inputs.shape == (5, 1, 3, 4)
    np.testing.assert_array_equal(ds.inputs[:, 0] * 255, images)
    np.testing.assert_array_equal(ds.labels, labels)


def test_idx_header_bytes(tmp_path):
    p = tmp_path / "l.idx"
    write_idx(p, np.array([7, 1], dtype=np.uint8), IDX_LABELS)
    assert p.read_bytes() == bytes([0, 0, 8, 1, 0, 0, 0, 2, 7, 1])


def test_idx_errors(tmp_path):
    ip, lp, _, _ = _idx_pair(tmp_path)
    with pytest.raises(ValueError, match="magic"):
        load_idx(lp, ip)
    bad = tmp_path / "short.idx"
    bad.write_bytes(ip.read_bytes()[:-3])
    with pytest.raises(ValueError, match="expected"):
        load_idx(bad, lp)
    few = tmp_path / "few.idx"
    write_idx(few, np.zeros(4, dtype=np.uint8), IDX_LABELS)
    with pytest.raises(ValueError):
        load_idx(ip, few)


def test_normalize_per_channel():
    x = np.ones((2, 3, 2, 2))
    ds = normalize(Dataset(x, [0, 1], 2), "cifar10", None)
    mean, std = NORMALIZATION_PRESETS["cifar10"]
    np.testing.assert_allclose(ds.inputs[0, :, 0, 0], (1 - np.array(mean)) / np.array(std))
    with pytest.raises(ValueError):
        normalize(Dataset(x, [0, 1], 2), [0.0], [1.0])
    with pytest.raises(ValueError):
        normalize(Dataset(x, [0, 1], 2), [0.0] * 3, [1.0, 0.0, 1.0])


def test_blobs_are_balanced_and_seeded():
    a, b = synth_blobs(103, 5, 4, seed=9), synth_blobs(103, 5, 4, seed=9)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    counts = Counter(a.labels.tolist())
    assert max(counts.values()) - min(counts.values()) <= 1
    tr, va = train_val_split(a, 0.2, seed=1)
    assert len(tr) + len(va) == 103 and len(va) == 21


@settings(deadline=None, max_examples=40)
@given(n=st.integers(8, 120), N=st.integers(1, 8), T=st.sampled_from([1, 2, 4]), epoch=st.integers(0, 3))
def test_epoch_covers_dataset_minus_tail(n, N, T, epoch):
    N *= T
    ds = Dataset(np.arange(n, dtype=float)[:, None], np.zeros(n, dtype=int), 1)
    if N > n:
        with pytest.raises(ValueError):
            batches(ds, BatchPlan(N, T), epoch)
        return
    mbs = batches(ds, BatchPlan(N, T), epoch)
    assert all(mb.size == N // T for mb in mbs)
    seen = np.concatenate([mb.inputs[:, 0] for mb in mbs]).astype(int)
    assert len(seen) == (n // N) * N and len(set(seen)) == len(seen)
    order = shuffled_order(n, 1, epoch)
    np.testing.assert_array_equal(seen, order[:len(seen)])


def test_microbatches_concatenate_to_minibatch():
    ds = synth_blobs(64, 3, 2)
    whole = batches(ds, BatchPlan(16, 1), epoch=2)
    split = batches(ds, BatchPlan(16, 4), epoch=2)
    for t, mb in enumerate(whole, 1):
        parts = [m for m in split if m.t == t]
        assert [m.j for m in parts] == [1, 2, 3, 4]
        np.testing.assert_array_equal(np.concatenate([m.inputs for m in parts]), mb.inputs)


def test_batch_plan_checks():
    assert BatchPlan(128).shuffle_seed == 1
    with pytest.raises(ValueError):
        BatchPlan(10, 4)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1)), [0, 3], 2)
    assert shuffled_order(10, 1, 0).tolist() != shuffled_order(10, 1, 1).tolist()
