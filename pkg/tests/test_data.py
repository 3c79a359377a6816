"""IDX parsing/writing, Dataset invariants, subsetting, synthetic corpus."""

import gzip
import struct

import numpy as np
import pytest

from flatreg import data as dt
from flatreg import synthdata


def image_bytes(count, pixel_rows, rows=28, cols=28, magic=dt.IMAGE_MAGIC):
    header = struct.pack(">IIII", magic, count, rows, cols)
    return header + bytes(pixel_rows)


def label_bytes(values, magic=dt.LABEL_MAGIC):
    return struct.pack(">II", magic, len(values)) + bytes(values)


class TestLoadImages:
    def test_single_all_ink_image(self, tmp_path):
        path = tmp_path / "imgs"
        path.write_bytes(image_bytes(1, [255] * 784))
        out = dt.load_idx_images(str(path))
        assert out.shape == (1, 784)
        assert (out == 1.0).all()

    def test_pixel_scaling(self, tmp_path):
        path = tmp_path / "imgs"
        path.write_bytes(image_bytes(1, [0, 51, 255] + [0] * 781))
        out = dt.load_idx_images(str(path))
        assert out[0, 0] == 0.0
        assert out[0, 1] == pytest.approx(51 / 255)
        assert out[0, 2] == 1.0

    def test_label_magic_rejected(self, tmp_path):
        path = tmp_path / "imgs"
        path.write_bytes(image_bytes(1, [0] * 784, magic=dt.LABEL_MAGIC))
        with pytest.raises(dt.MagicMismatch, match="0x00000801"):
            dt.load_idx_images(str(path))

    def test_wrong_dims_rejected(self, tmp_path):
        path = tmp_path / "imgs"
        path.write_bytes(image_bytes(1, [0] * (27 * 28), rows=27))
        with pytest.raises(dt.BadDimensions):
            dt.load_idx_images(str(path))

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "imgs"
        path.write_bytes(image_bytes(2, [0] * 784))  # promises 2, carries 1
        with pytest.raises(dt.TruncatedFile):
            dt.load_idx_images(str(path))

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "imgs"
        path.write_bytes(b"\x00\x00\x08")
        with pytest.raises(dt.TruncatedFile):
            dt.load_idx_images(str(path))

    def test_gzip_transparent(self, tmp_path):
        path = tmp_path / "imgs.gz"
        path.write_bytes(gzip.compress(image_bytes(1, [128] * 784)))
        out = dt.load_idx_images(str(path))
        assert out[0, 0] == pytest.approx(128 / 255)


class TestLoadLabels:
    def test_two_labels(self, tmp_path):
        path = tmp_path / "labels"
        path.write_bytes(label_bytes([0, 9]))
        np.testing.assert_array_equal(dt.load_idx_labels(str(path)), [0, 9])

    def test_label_ten_rejected(self, tmp_path):
        path = tmp_path / "labels"
        path.write_bytes(label_bytes([3, 10, 1]))
        with pytest.raises(dt.InvalidLabel, match="index 1"):
            dt.load_idx_labels(str(path))

    def test_image_magic_rejected(self, tmp_path):
        path = tmp_path / "labels"
        path.write_bytes(label_bytes([1], magic=dt.IMAGE_MAGIC))
        with pytest.raises(dt.MagicMismatch):
            dt.load_idx_labels(str(path))

    def test_truncated(self, tmp_path):
        path = tmp_path / "labels"
        path.write_bytes(label_bytes([1, 2, 3])[:-2])
        with pytest.raises(dt.TruncatedFile):
            dt.load_idx_labels(str(path))


class TestRoundTrip:
    def test_load_save_load_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        first = tmp_path / "a"
        first.write_bytes(image_bytes(5, rng.integers(0, 256, size=5 * 784).tolist()))
        images1 = dt.load_idx_images(str(first))
        second = tmp_path / "b"
        dt.save_idx_images(images1, str(second))
        images2 = dt.load_idx_images(str(second))
        assert images1.tobytes() == images2.tobytes()
        assert first.read_bytes() == second.read_bytes()

    def test_labels_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 10, size=64)
        path = tmp_path / "labels"
        dt.save_idx_labels(labels, str(path))
        np.testing.assert_array_equal(dt.load_idx_labels(str(path)), labels)

    def test_writer_validates_range(self, tmp_path):
        with pytest.raises(ValueError):
            dt.save_idx_images(np.full((1, 784), 1.5), str(tmp_path / "x"))
        with pytest.raises(ValueError):
            dt.save_idx_labels([4, 11], str(tmp_path / "y"))


class TestDataset:
    def test_validation(self):
        good = np.zeros((3, 784))
        dt.Dataset(good, [0, 1, 2], "train")  # fine
        with pytest.raises(ValueError, match="784"):
            dt.Dataset(np.zeros((3, 10)), [0, 1, 2], "train")
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            dt.Dataset(good - 0.5, [0, 1, 2], "train")
        with pytest.raises(ValueError, match="labels"):
            dt.Dataset(good, [0, 1, 10], "train")
        with pytest.raises(ValueError, match="split"):
            dt.Dataset(good, [0, 1, 2], "validation")
        with pytest.raises(ValueError, match="non-empty"):
            dt.Dataset(np.zeros((0, 784)), [], "train")

    def test_arrays_frozen(self):
        ds = dt.Dataset(np.zeros((2, 784)), [0, 1], "test")
        with pytest.raises(ValueError):
            ds.images[0, 0] = 0.5

    def test_count_mismatch(self, tmp_path):
        imgs = tmp_path / "i"
        labs = tmp_path / "l"
        dt.save_idx_images(np.zeros((3, 784)), str(imgs))
        dt.save_idx_labels([0, 1], str(labs))
        with pytest.raises(dt.IdxFormatError, match="3 images but 2 labels"):
            dt.load_dataset(str(imgs), str(labs), "train")


@pytest.fixture(scope="module")
def base():
    return synthdata.make_corpus(seed=7, train_n=10000, test_n=64)[0]


class TestSubset:
    def test_same_seed_identical(self, base):
        a = dt.subset(base, 500, seed=3)
        b = dt.subset(base, 500, seed=3)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_different_seed_differs(self, base):
        a = dt.subset(base, 500, seed=3)
        b = dt.subset(base, 500, seed=4)
        assert a.labels.tobytes() != b.labels.tobytes()

    def test_full_size_is_permutation(self, base):
        full = dt.subset(base, len(base), seed=11)
        assert np.bincount(full.labels, minlength=10).tolist() == \
            np.bincount(base.labels, minlength=10).tolist()
        assert full.images.sum() == pytest.approx(base.images.sum(), rel=1e-12)

    def test_histogram_roughly_uniform(self, base):
        # seeded permutation of a near-uniform corpus: each class within
        # ±40% of the uniform share
        sub = dt.subset(base, 2000, seed=7)
        counts = np.bincount(sub.labels, minlength=10)
        assert counts.min() >= 120 and counts.max() <= 280

    def test_too_large_rejected(self, base):
        with pytest.raises(ValueError):
            dt.subset(base, len(base) + 1, seed=0)


class TestSyntheticCorpus:
    def test_deterministic(self):
        a_train, a_test = synthdata.make_corpus(seed=5, train_n=40, test_n=20)
        b_train, b_test = synthdata.make_corpus(seed=5, train_n=40, test_n=20)
        assert a_train.images.tobytes() == b_train.images.tobytes()
        assert a_test.images.tobytes() == b_test.images.tobytes()
        c_train, _ = synthdata.make_corpus(seed=6, train_n=40, test_n=20)
        assert a_train.images.tobytes() != c_train.images.tobytes()

    def test_train_test_differ(self):
        train, test = synthdata.make_corpus(seed=5, train_n=40, test_n=40)
        assert train.images.tobytes() != test.images.tobytes()

    def test_prototypes_pairwise_distinct(self):
        protos = synthdata.class_prototypes(seed=0)
        for i in range(10):
            for j in range(i + 1, 10):
                frac_differing = np.mean(np.abs(protos[i] - protos[j]) > 0.5)
                assert frac_differing > 0.15, (i, j)

    def test_written_corpus_matches_memory(self, tmp_path):
        train, test = synthdata.make_corpus(seed=9, train_n=30, test_n=10)
        synthdata.write_corpus(str(tmp_path), seed=9, train_n=30, test_n=10)
        loaded_train = dt.load_split(str(tmp_path), "train")
        loaded_test = dt.load_split(str(tmp_path), "test")
        assert loaded_train.images.tobytes() == train.images.tobytes()
        assert loaded_train.labels.tobytes() == train.labels.tobytes()
        assert loaded_test.images.tobytes() == test.images.tobytes()

    def test_all_classes_present(self):
        train, _ = synthdata.make_corpus(seed=1, train_n=400, test_n=10)
        assert set(train.labels.tolist()) == set(range(10))
