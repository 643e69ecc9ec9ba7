import struct

import numpy as np
import pytest

from attnrobust import data as D
from attnrobust.errors import DataError, ParseError


def record(label, pixels=None, fine=None):
    pix = np.zeros(3072, np.uint8) if pixels is None else np.asarray(pixels, np.uint8)
    head = bytes([label]) if fine is None else bytes([label, fine])
    return head + pix.tobytes()


def test_single_cifar10_record():
    pix = np.arange(3072) % 256
    split = D.parse_cifar_bytes(record(7, pix))
    assert len(split) == 1 and split.labels[0] == 7
    assert split.images.shape == (1, 3, 32, 32)
    # R plane first, row-major
    assert split.images[0, 0, 0, 1] == pytest.approx(1 / 255)
    assert split.images[0, 1, 0, 0] == pytest.approx((1024 % 256) / 255)


def test_zero_record_gives_zero_image():
    assert not D.parse_cifar_bytes(record(0)).images.any()


def test_cifar100_uses_fine_label():
    split = D.parse_cifar_bytes(record(3, fine=42), variant="c100")
    assert split.labels[0] == 42


def test_truncated_file_reports_offset():
    buf = record(1) + record(2)[:100]
    with pytest.raises(ParseError) as err:
        D.parse_cifar_bytes(buf)
    assert err.value.offset == 3073


def test_label_out_of_range():
    with pytest.raises(DataError, match="label"):
        D.parse_cifar_bytes(record(12))


def test_cifar_file_roundtrip(tmp_path, rng):
    imgs = rng.integers(0, 256, (5, 3, 32, 32)).astype(np.float32) / 255
    split = D.Split(imgs, np.array([0, 9, 3, 3, 1]))
    path = D.write_cifar(tmp_path / "b.bin", split)
    assert path.stat().st_size == 5 * 3073
    back = D.load_cifar_file(path)
    np.testing.assert_array_equal(back.images, imgs)
    np.testing.assert_array_equal(back.labels, split.labels)


def test_load_cifar_directory(tmp_path, rng):
    for name in D.CIFAR10_TRAIN_FILES + D.CIFAR10_TEST_FILES:
        imgs = rng.integers(0, 256, (4, 3, 32, 32)).astype(np.float32) / 255
        D.write_cifar(tmp_path / name, D.Split(imgs, rng.integers(0, 10, 4)))
    ds = D.load_cifar(tmp_path, "c10")
    assert (len(ds.train), len(ds.test)) == (20, 4)
    assert ds.spec.num_classes == 10 and ds.spec.image_size == 32
    np.testing.assert_array_equal(ds.train.indices, np.arange(20))


def test_load_cifar_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        D.load_cifar(tmp_path / "nowhere")


@pytest.mark.parametrize("dtype", ["uint8", "float32"])
def test_raw_roundtrip(tmp_path, rng, dtype):
    imgs = (rng.integers(0, 256, (6, 3, 8, 8)) / 255).astype(np.float32)
    split = D.Split(imgs, rng.integers(0, 4, 6))
    path = D.write_raw(tmp_path / "x.bin", split, num_classes=4, dtype=dtype)
    back, classes = D.parse_raw_bytes(path.read_bytes())
    assert classes == 4
    np.testing.assert_array_equal(back.labels, split.labels)
    np.testing.assert_allclose(back.images, imgs, atol=0 if dtype == "float32" else 1e-7)


def test_raw_header_layout(tmp_path):
    split = D.Split(np.zeros((2, 1, 2, 2), np.float32), np.array([1, 0]))
    buf = D.write_raw(tmp_path / "h.bin", split, num_classes=2).read_bytes()
    magic, version, n, c, h, w, tag, k = struct.unpack_from("<6sB4IBI", buf)
    assert (magic, version, n, c, h, w, tag, k) == (b"ATRAW\x00", 1, 2, 1, 2, 2, 0, 2)
    assert len(buf) == 28 + 2 * 2 + 2 * 4


def test_raw_rejects_bad_magic_and_truncation(tmp_path):
    split = D.Split(np.zeros((2, 1, 2, 2), np.float32), np.array([1, 0]))
    buf = D.write_raw(tmp_path / "h.bin", split, num_classes=2).read_bytes()
    with pytest.raises(ParseError):
        D.parse_raw_bytes(b"XXXXXX" + buf[6:])
    with pytest.raises(ParseError):
        D.parse_raw_bytes(buf[:-1])


def test_load_raw_computes_channel_stats(tmp_path, rng):
    imgs = rng.uniform(size=(10, 3, 4, 4)).astype(np.float32)
    tr = D.write_raw(tmp_path / "tr.bin", D.Split(imgs, rng.integers(0, 2, 10)), 2, "float32")
    te = D.write_raw(tmp_path / "te.bin", D.Split(imgs[:3], rng.integers(0, 2, 3)), 2, "float32")
    ds = D.load_raw(tr, te)
    np.testing.assert_allclose(ds.spec.means, imgs.mean(axis=(0, 2, 3)), rtol=1e-5)


def test_subsample_deterministic_sorted_and_bounded(rng):
    split = D.Split(rng.uniform(size=(50, 1, 2, 2)), np.arange(50) % 3)
    a = D.subsample(split, 10, seed=1, stream="train")
    b = D.subsample(split, 10, seed=1, stream="train")
    np.testing.assert_array_equal(a.indices, b.indices)
    assert np.all(np.diff(a.indices) > 0)
    np.testing.assert_array_equal(a.images, split.images[a.indices])
    assert D.subsample(split, None, 1, "train") is split
    with pytest.raises(DataError):
        D.subsample(split, 0, 1, "train")


def test_dataset_spec_subsample_invariant():
    with pytest.raises(DataError):
        D.DatasetSpec("cifar10", "", 32, 3, 10, (0,) * 3, (1,) * 3, train_size=100, subsample=200)


def test_iter_batches_cover_split_once(rng):
    split = D.Split(rng.uniform(size=(11, 1, 2, 2)), np.zeros(11, int))
    seen = np.concatenate([idx for _, _, idx in D.iter_batches(split, 4, np.random.default_rng(0))])
    assert sorted(seen) == list(range(11))


def test_augment_preserves_shape_and_content_range(rng):
    imgs = rng.uniform(size=(6, 3, 8, 8)).astype(np.float32)
    out = D.augment(imgs, np.random.default_rng(0), pad=2)
    assert out.shape == imgs.shape and out.dtype == imgs.dtype
    assert out.min() >= 0 and out.max() <= 1


def test_augment_zero_pad_is_flip_or_identity(rng):
    imgs = rng.uniform(size=(8, 2, 4, 4))
    out = D.augment(imgs, np.random.default_rng(1), pad=0)
    for o, i in zip(out, imgs):
        assert np.array_equal(o, i) or np.array_equal(o, i[:, :, ::-1])
