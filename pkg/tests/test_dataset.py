import csv
import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tnml import FormatError
from tnml.dataset import (
    IMAGE_MAGIC,
    LABEL_MAGIC,
    ImageDataset,
    avg_pool_2x2,
    batches,
    export_features_csv,
    feature_map,
    linear_feature_map,
    load_idx,
    load_mnist_dir,
    preprocess,
    read_idx,
    train_val_split,
)


def write_idx(path, magic, array, compress=False):
    # independent encoder following the published IDX layout
    dims = array.shape
    payload = struct.pack(">i", magic) + struct.pack(">" + "i" * len(dims), *dims)
    payload += array.astype(np.uint8).tobytes()
    opener = gzip.open if compress else open
    with opener(path, "wb") as f:
        f.write(payload)


@pytest.fixture
def idx_pair(tmp_path, rng):
    images = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=5, dtype=np.uint8)
    write_idx(tmp_path / "img", IMAGE_MAGIC, images)
    write_idx(tmp_path / "lab", LABEL_MAGIC, labels)
    return tmp_path, images, labels


class TestIdx:
    def test_images_and_labels(self, idx_pair):
        root, images, labels = idx_pair
        ds = load_idx(root / "img", root / "lab")
        assert ds.images.shape == (5, 28, 28) and len(ds) == 5
        np.testing.assert_array_equal(ds.images, images / 255.0)
        np.testing.assert_array_equal(ds.labels, labels)

    def test_gzip(self, tmp_path, rng):
        images = rng.integers(0, 256, size=(3, 4, 4), dtype=np.uint8)
        write_idx(tmp_path / "a.gz", IMAGE_MAGIC, images, compress=True)
        np.testing.assert_array_equal(read_idx(tmp_path / "a.gz", IMAGE_MAGIC), images)

    def test_wrong_magic(self, idx_pair):
        root, _, _ = idx_pair
        with pytest.raises(FormatError):
            read_idx(root / "img", LABEL_MAGIC)

    def test_truncated(self, tmp_path, rng):
        images = rng.integers(0, 256, size=(3, 4, 4), dtype=np.uint8)
        write_idx(tmp_path / "a", IMAGE_MAGIC, images)
        raw = (tmp_path / "a").read_bytes()
        (tmp_path / "b").write_bytes(raw[:-5])
        with pytest.raises(FormatError):
            read_idx(tmp_path / "b", IMAGE_MAGIC)
        (tmp_path / "c").write_bytes(raw[:6])
        with pytest.raises(FormatError):
            read_idx(tmp_path / "c", IMAGE_MAGIC)

    def test_count_mismatch(self, tmp_path, rng):
        write_idx(tmp_path / "img", IMAGE_MAGIC, rng.integers(0, 256, size=(4, 2, 2)))
        write_idx(tmp_path / "lab", LABEL_MAGIC, rng.integers(0, 10, size=3))
        with pytest.raises(FormatError):
            load_idx(tmp_path / "img", tmp_path / "lab")

    def test_directory_layout(self, tmp_path, rng):
        write_idx(tmp_path / "t10k-images-idx3-ubyte.gz", IMAGE_MAGIC,
                  rng.integers(0, 256, size=(2, 2, 2)), compress=True)
        write_idx(tmp_path / "t10k-labels-idx1-ubyte.gz", LABEL_MAGIC,
                  rng.integers(0, 10, size=2), compress=True)
        ds = load_mnist_dir(tmp_path, "test")
        assert len(ds) == 2 and ds.split == "test"
        with pytest.raises(FileNotFoundError):
            load_mnist_dir(tmp_path, "train")

    def test_dataset_invariants(self):
        with pytest.raises(FormatError):
            ImageDataset(np.zeros((2, 2, 2)), np.zeros(3, dtype=int))
        with pytest.raises(ValueError):
            ImageDataset(np.full((1, 2, 2), 1.5), np.zeros(1, dtype=int))
        with pytest.raises(ValueError):
            ImageDataset(np.zeros((1, 2, 2)), np.array([10]))


class TestPooling:
    def test_block_mean(self):
        assert avg_pool_2x2(np.array([[0.0, 1.0], [2.0, 3.0]]))[0, 0] == 1.5

    def test_constant(self):
        np.testing.assert_array_equal(avg_pool_2x2(np.full((6, 4), 0.3)), np.full((3, 2), 0.3))

    def test_mnist_size(self):
        assert avg_pool_2x2(np.zeros((28, 28))).shape == (14, 14)
        assert avg_pool_2x2(np.zeros((7, 28, 28))).shape == (7, 14, 14)

    def test_odd(self):
        with pytest.raises(ValueError):
            avg_pool_2x2(np.zeros((3, 4)))


class TestZigzag:
    def test_two_by_two(self):
        a, b, c, d = 1.0, 2.0, 3.0, 4.0
        np.testing.assert_array_equal(zigzag(np.array([[a, b], [c, d]])), [a, b, d, c])

    def test_single_row(self):
        np.testing.assert_array_equal(zigzag(np.arange(5.0)[None]), np.arange(5.0))

    @settings(max_examples=30, deadline=None)
    @given(h=st.integers(1, 9), w=st.integers(1, 9))
    def test_is_a_permutation(self, h, w):
        img = np.arange(h * w, dtype=float).reshape(h, w)
        flat = zigzag(img)
        assert len(flat) == h * w
        assert sorted(flat) == list(range(h * w))
        # consecutive entries are grid neighbours
        pos = {v: divmod(int(v), w) for v in flat}
        for u, v in zip(flat, flat[1:]):
            (r1, c1), (r2, c2) = pos[u], pos[v]
            assert abs(r1 - r2) + abs(c1 - c2) == 1


def zigzag(img):
    from tnml.dataset import zigzag_flatten

    return zigzag_flatten(img)


class TestFeatureMap:
    def test_endpoints(self):
        np.testing.assert_array_equal(feature_map(0.0), [1.0, 0.0])
        np.testing.assert_allclose(feature_map(1.0), [0.0, 1.0], atol=1e-15)

    def test_midpoint(self):
        np.testing.assert_allclose(feature_map(0.5), [np.sqrt(2) / 2] * 2, rtol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(x=st.floats(0, 1))
    def test_unit_norm(self, x):
        assert abs(np.linalg.norm(feature_map(x)) - 1.0) <= 1e-12

    def test_out_of_range_clamped(self, caplog):
        with caplog.at_level("WARNING"):
            np.testing.assert_array_equal(feature_map(-0.5), feature_map(0.0))
        assert "clamping" in caplog.text

    def test_linear_map(self):
        np.testing.assert_array_equal(linear_feature_map(np.array([0.0, 0.25])),
                                      [[1.0, 0.0], [1.0, 0.25]])


class TestPipeline:
    def test_shapes(self, rng):
        feats = preprocess(rng.uniform(size=(3, 28, 28)))
        assert feats.shape == (3, 196, 2)

    def test_deterministic_bytes(self, idx_pair):
        root, _, _ = idx_pair
        a = preprocess(load_idx(root / "img", root / "lab").images)
        b = preprocess(load_idx(root / "img", root / "lab").images)
        assert a.tobytes() == b.tobytes()

    def test_split_is_pure_function_of_seed(self, rng):
        ds = ImageDataset(rng.uniform(size=(50, 2, 2)), rng.integers(0, 10, 50))
        t1, v1 = train_val_split(ds, 0.2, seed=3)
        t2, v2 = train_val_split(ds, 0.2, seed=3)
        t3, _ = train_val_split(ds, 0.2, seed=4)
        assert len(t1) == 40 and len(v1) == 10
        np.testing.assert_array_equal(t1.images, t2.images)
        np.testing.assert_array_equal(v1.labels, v2.labels)
        assert not np.array_equal(t1.images, t3.images)
        joined = np.concatenate([t1.images, v1.images]).reshape(50, -1)
        assert sorted(map(tuple, joined)) == sorted(map(tuple, ds.images.reshape(50, -1)))

    def test_batches_cover_everything(self, rng):
        got = np.concatenate(list(batches(70, 32, rng)))
        assert sorted(got) == list(range(70))
        assert [len(b) for b in batches(70, 32)] == [32, 32, 6]

    def test_csv_export(self, tmp_path, rng):
        feats = preprocess(rng.uniform(size=(2, 4, 4)))
        export_features_csv(tmp_path / "f.csv", feats, np.array([3, 7]))
        rows = list(csv.reader(open(tmp_path / "f.csv")))
        assert rows[0][:2] == ["label", "f0"] and len(rows[0]) == 1 + 4 * 2
        assert rows[2][0] == "7"
        assert float(rows[1][1]) == feats[0, 0, 0]


class TestBundledData:
    def test_desk_mnist_loads(self):
        train = load_mnist_dir("data/mnist", "train")
        test = load_mnist_dir("data/mnist", "test")
        assert train.images.shape[1:] == (28, 28) and len(train) == 10_000
        assert len(test) == 5_000
        assert set(np.unique(train.labels)) == set(range(10))
