"""Dataset parser and generator tests.

File-format cases are checked against hand-built byte strings so the reader
is validated independently of the writer.
"""

import numpy as np
import pytest

from pannkit import datasets as ds


def _idx_bytes(magic, dims, payload: bytes) -> bytes:
    head = magic.to_bytes(4, "big")
    head += b"".join(int(d).to_bytes(4, "big") for d in dims)
    return head + payload


class TestIdx:
    def test_read_hand_built_labels(self, tmp_path):
        p = tmp_path / "labels"
        p.write_bytes(_idx_bytes(0x00000801, [3], bytes([7, 0, 9])))
        out = ds.read_idx(p)
        assert out.dtype == np.uint8
        assert out.tolist() == [7, 0, 9]

    def test_read_hand_built_images(self, tmp_path):
        p = tmp_path / "imgs"
        payload = bytes(range(2 * 2 * 3))
        p.write_bytes(_idx_bytes(0x00000803, [2, 2, 3], payload))
        out = ds.read_idx(p)
        assert out.shape == (2, 2, 3)
        assert out.ravel().tolist() == list(range(12))

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        img = rng.integers(0, 256, size=(7, 28, 28), dtype=np.uint8)
        ds.write_idx(tmp_path / "x", img)
        assert np.array_equal(ds.read_idx(tmp_path / "x"), img)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad"
        p.write_bytes(_idx_bytes(0x00000802, [1], b"\x00"))
        with pytest.raises(ds.DatasetFormatError, match="magic 0x00000802"):
            ds.read_idx(p)

    def test_truncated_payload_names_lengths(self, tmp_path):
        p = tmp_path / "short"
        p.write_bytes(_idx_bytes(0x00000803, [2, 2, 2], b"\x00" * 5))
        with pytest.raises(ds.DatasetFormatError, match=r"require 24 bytes.*has 21"):
            ds.read_idx(p)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "hdr"
        p.write_bytes((0x00000803).to_bytes(4, "big") + b"\x00\x00")
        with pytest.raises(ds.DatasetFormatError, match="offset 6"):
            ds.read_idx(p)

    def test_tiny_file(self, tmp_path):
        p = tmp_path / "tiny"
        p.write_bytes(b"\x00")
        with pytest.raises(ds.DatasetFormatError, match="offset 1"):
            ds.read_idx(p)

    def test_count_mismatch(self, tmp_path):
        ds.write_idx(tmp_path / ds.MNIST_FILES["train_images"],
                     np.zeros((3, 4, 4), np.uint8))
        ds.write_idx(tmp_path / ds.MNIST_FILES["train_labels"],
                     np.zeros(2, np.uint8))
        ds.write_idx(tmp_path / ds.MNIST_FILES["test_images"],
                     np.zeros((1, 4, 4), np.uint8))
        ds.write_idx(tmp_path / ds.MNIST_FILES["test_labels"],
                     np.zeros(1, np.uint8))
        with pytest.raises(ds.DatasetFormatError, match="3 images but 2 labels"):
            ds.load_mnist_idx(tmp_path)


class TestCifar10:
    def _write_batch(self, path, labels, rng):
        n = len(labels)
        rec = np.empty((n, ds.CIFAR10_RECORD_BYTES), np.uint8)
        rec[:, 0] = labels
        rec[:, 1:] = rng.integers(0, 256, size=(n, 3072), dtype=np.uint8)
        path.write_bytes(rec.tobytes())
        return rec

    def test_read_batch(self, tmp_path):
        rng = np.random.default_rng(1)
        rec = self._write_batch(tmp_path / "b.bin", [3, 0, 9], rng)
        img, lab = ds.read_cifar10_batch(tmp_path / "b.bin")
        assert lab.tolist() == [3, 0, 9]
        assert img.shape == (3, 3, 32, 32)
        assert np.array_equal(img[1].ravel(), rec[1, 1:])

    def test_ragged_file(self, tmp_path):
        p = tmp_path / "ragged.bin"
        p.write_bytes(b"\x00" * (2 * ds.CIFAR10_RECORD_BYTES + 10))
        with pytest.raises(ds.DatasetFormatError, match="offset 6146"):
            ds.read_cifar10_batch(p)

    def test_bad_label(self, tmp_path):
        rng = np.random.default_rng(2)
        self._write_batch(tmp_path / "b.bin", [1, 12], rng)
        with pytest.raises(ds.DatasetFormatError, match="label 12 > 9 in record 1"):
            ds.read_cifar10_batch(tmp_path / "b.bin")

    def test_full_layout(self, tmp_path):
        rng = np.random.default_rng(3)
        for i in range(1, 6):
            self._write_batch(tmp_path / f"data_batch_{i}.bin", [i % 10] * 4, rng)
        self._write_batch(tmp_path / "test_batch.bin", [0, 1], rng)
        data = ds.load_cifar10_binary(tmp_path)
        assert data.x_train.shape == (20, 3, 32, 32)
        assert data.x_test.shape == (2, 3, 32, 32)
        assert data.x_train.max() <= 1.0 and data.x_train.min() >= 0.0
        assert data.n_classes == 10


class TestSynthetic:
    def test_blobs_balanced(self):
        x, y = ds.synthetic_blobs(n=100, classes=2, dim=2, seed=1)
        assert x.shape == (100, 2)
        counts = np.bincount(y, minlength=2)
        assert abs(int(counts[0]) - int(counts[1])) <= 1

    def test_blobs_balance_odd_n(self):
        _, y = ds.synthetic_blobs(n=101, classes=3, dim=2, seed=4)
        counts = np.bincount(y, minlength=3)
        assert counts.max() - counts.min() <= 1

    def test_blobs_deterministic(self):
        a = ds.synthetic_blobs(50, 2, 3, seed=9)
        b = ds.synthetic_blobs(50, 2, 3, seed=9)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_blobs_separable(self):
        # centers are 6 sigma apart, so nearest-center classification on a
        # fresh draw should be essentially perfect
        x, y = ds.synthetic_blobs(2000, 4, 2, seed=7)
        ang = 2.0 * np.pi * np.arange(4) / 4
        centers = 4.0 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        pred = np.argmin(((x[:, None, :] - centers) ** 2).sum(-1), axis=1)
        assert (pred == y).mean() >= 0.99

    def test_moons(self):
        x, y = ds.synthetic_moons(201, noise=0.05, seed=3)
        assert x.shape == (201, 2)
        counts = np.bincount(y, minlength=2)
        assert abs(int(counts[0]) - int(counts[1])) <= 1
        a = ds.synthetic_moons(201, noise=0.05, seed=3)
        assert np.array_equal(a[0], x)

    def test_digits_shape_and_determinism(self):
        img, lab = ds.synthetic_digits(40, seed=2)
        assert img.shape == (40, 28, 28) and img.dtype == np.uint8
        counts = np.bincount(lab, minlength=10)
        assert counts.max() - counts.min() <= 1
        img2, lab2 = ds.synthetic_digits(40, seed=2)
        assert np.array_equal(img, img2) and np.array_equal(lab, lab2)

    def test_digit_classes_distinct(self):
        # shift-searched cosine matched filter recovers the class; cosine
        # (not raw dot product) so nested glyphs like 0 inside 8 separate
        templates = ds._digit_templates()
        img, lab = ds.synthetic_digits(200, seed=11)
        x = img.astype(float).reshape(200, -1) / 255.0
        scores = np.full((200, 10), -np.inf)
        for dr in range(-3, 4):
            for dc in range(-3, 4):
                t = np.roll(templates, (dr, dc), axis=(1, 2)).reshape(10, -1)
                t = t / np.linalg.norm(t, axis=1, keepdims=True)
                scores = np.maximum(scores, x @ t.T)
        acc = (np.argmax(scores, axis=1) == lab).mean()
        assert acc >= 0.8

    def test_digit_idx_files(self, tmp_path):
        ds.write_digit_idx_dataset(tmp_path, n_train=30, n_test=10, seed=0)
        data = ds.load_mnist_idx(tmp_path)
        assert data.x_train.shape == (30, 1, 28, 28)
        assert data.x_test.shape == (10, 1, 28, 28)
        assert data.x_train.min() >= 0.0 and data.x_train.max() <= 1.0
        assert data.y_train.max() < 10


class TestSpec:
    def test_unknown_source(self):
        with pytest.raises(ValueError, match="unknown source"):
            ds.DatasetSpec(source="imagenet")

    def test_bad_fraction(self):
        with pytest.raises(ValueError, match="train_fraction"):
            ds.DatasetSpec(source="synthetic_blobs", train_fraction=1.0)

    def test_split_sizes(self):
        spec = ds.DatasetSpec(source="synthetic_blobs", n=100, classes=2,
                              dim=2, seed=1, train_fraction=0.8)
        data = ds.load_dataset(spec)
        assert len(data.x_train) == 80 and len(data.x_test) == 20
        assert data.name == "synthetic_blobs"

    def test_limits_take_prefix(self):
        spec = ds.DatasetSpec(source="synthetic_digits", n=50, seed=1,
                              train_fraction=0.8)
        full = ds.load_dataset(spec)
        cut = ds.load_dataset(ds.DatasetSpec(
            source="synthetic_digits", n=50, seed=1, train_fraction=0.8,
            limit_train=10, limit_test=5))
        assert np.array_equal(cut.x_train, full.x_train[:10])
        assert np.array_equal(cut.y_test, full.y_test[:5])

    def test_normalization(self):
        spec = ds.DatasetSpec(source="synthetic_blobs", n=40, seed=2,
                              normalize_mean=1.0, normalize_std=2.0)
        raw = ds.load_dataset(ds.DatasetSpec(source="synthetic_blobs", n=40,
                                             seed=2))
        norm = ds.load_dataset(spec)
        assert np.allclose(norm.x_train, (raw.x_train - 1.0) / 2.0)

    def test_label_range_guard(self):
        x = np.zeros((4, 2))
        y = np.array([0, 1, 2, 3])
        with pytest.raises(ValueError, match="labels out of range"):
            ds.Dataset(x, y, x, y, n_classes=3)
