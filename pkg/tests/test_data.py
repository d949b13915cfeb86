import struct

import numpy as np
import pytest

from psprune.data import (DataError, Dataset, SyntheticSpec, batches, cifar_records, linear_probe_accuracy,
                          load_cifar_binary, load_idx, make_synthetic, parse_idx, subtract_mean, write_idx)


def test_synthetic_linear_probe():
    spec = SyntheticSpec(blobs_per_class=2)
    tr, va = make_synthetic(spec, 0, "train"), make_synthetic(spec, 0, "val")
    assert linear_probe_accuracy(tr, va) >= 0.95


def test_synthetic_deterministic_and_split_distinct():
    spec = SyntheticSpec(n_train=50, n_val=20, size=8)
    a, b = make_synthetic(spec, 3), make_synthetic(spec, 3)
    assert a.images.tobytes() == b.images.tobytes() and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(make_synthetic(spec, 3, "val").images[:20], a.images[:20])
    with pytest.raises(DataError):
        make_synthetic(spec, 3, "test")


def test_idx_single_zero_image(tmp_path):
    ip, lp = tmp_path / "t-images-idx3-ubyte", tmp_path / "t-labels-idx1-ubyte"
    write_idx(ip, lp, np.zeros((1, 4, 4), np.uint8), np.array([3], np.uint8))
    ds = subtract_mean(load_idx(ip))
    assert ds.images.shape == (1, 1, 4, 4) and not ds.images.any()
    assert ds.labels.tolist() == [3]


def test_idx_values_scaled(tmp_path):
    ip, lp = tmp_path / "a-images-idx3-ubyte", tmp_path / "a-labels-idx1-ubyte"
    imgs = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3) * 10
    write_idx(ip, lp, imgs, [1, 2])
    ds = load_idx(ip)
    assert np.array_equal(ds.images[:, 0], imgs / 255.0)


def test_idx_bad_magic_reports_offset():
    raw = struct.pack(">I", 0x00000801) + struct.pack(">I", 0)
    with pytest.raises(DataError, match="offset 0"):
        parse_idx(raw, 0x00000803)


def test_idx_truncated_payload_reports_offset():
    raw = struct.pack(">I", 0x00000803) + struct.pack(">3I", 2, 2, 2) + b"\0" * 5
    with pytest.raises(DataError, match="offset 16"):
        parse_idx(raw, 0x00000803)


def test_cifar_round_trip(tmp_path, rng):
    imgs = rng.integers(0, 256, size=(3, 3, 32, 32), dtype=np.uint8)
    labels = [4, 0, 9]
    raw = cifar_records(imgs, labels)
    p = tmp_path / "batch.bin"
    p.write_bytes(raw)
    ds = load_cifar_binary(p)
    assert ds.labels.tolist() == labels
    back = np.rint(ds.images * 255).astype(np.uint8)
    assert cifar_records(back, ds.labels) == raw


def test_cifar_bad_record_size(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"\0" * (3073 + 10))
    with pytest.raises(DataError, match="offset 3073"):
        load_cifar_binary(p)


def test_cifar_label_out_of_range(tmp_path):
    p = tmp_path / "lab.bin"
    p.write_bytes(bytes([2]) + b"\0" * 3072 + bytes([12]) + b"\0" * 3072)
    with pytest.raises(DataError, match="offset 3073"):
        load_cifar_binary(p, num_classes=10)


def test_missing_file():
    with pytest.raises(DataError):
        load_cifar_binary("/nonexistent/file.bin")


def test_mean_subtraction_uses_train_mean(rng):
    tr = Dataset(rng.normal(3, 1, (20, 2, 4, 4)), np.zeros(20), 2)
    va = Dataset(rng.normal(3, 1, (7, 2, 4, 4)), np.zeros(7), 2, "val")
    tr2 = subtract_mean(tr)
    assert np.abs(tr2.images.mean(axis=0)).max() <= 1e-10
    va2 = subtract_mean(va, tr2.mean)
    assert np.array_equal(va2.images, va.images - tr.images.mean(axis=0))


def test_labels_must_be_in_range():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 1, 2, 2)), [0, 5], 5)


def _ds(n):
    return Dataset(np.arange(n, dtype=float).reshape(n, 1, 1, 1), np.zeros(n), 1)


def test_batch_sizes_keep_last_partial():
    assert [len(y) for _, y in batches(_ds(10), 4)] == [4, 4, 2]


def test_batches_seeded_and_unshuffled():
    a = [x.ravel().tolist() for x, _ in batches(_ds(10), 3, seed=7, epoch=2)]
    b = [x.ravel().tolist() for x, _ in batches(_ds(10), 3, seed=7, epoch=2)]
    assert a == b
    plain = [x.ravel().tolist() for x, _ in batches(_ds(10), 3, shuffle=False)]
    assert sum(plain, []) == list(range(10))


@pytest.mark.parametrize("epoch", [0, 1, 5])
def test_epoch_covers_every_index_once(epoch):
    seen = sorted(sum((x.ravel().tolist() for x, _ in batches(_ds(23), 5, seed=1, epoch=epoch)), []))
    assert seen == list(range(23))


def test_batch_size_must_be_positive():
    with pytest.raises(ValueError):
        next(batches(_ds(3), 0))


def test_flip_mirrors_some_images(rng):
    ds = Dataset(rng.normal(size=(16, 1, 2, 3)), np.zeros(16), 1)
    (x, _), = batches(ds, 16, shuffle=False, flip=True)
    flipped = [np.array_equal(x[i], ds.images[i, :, :, ::-1]) for i in range(16)]
    same = [np.array_equal(x[i], ds.images[i]) for i in range(16)]
    assert all(f or s for f, s in zip(flipped, same)) and any(flipped) and any(same)
