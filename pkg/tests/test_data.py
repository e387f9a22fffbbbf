import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layerpar.data import (
    IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
    DataFormatError,
    Dataset,
    generate_peaks,
    load_csv,
    load_mnist,
    one_hot,
    peaks_function,
    peaks_gradient,
    peaks_quantile_edges,
    split_indices,
    write_idx,
)

PEAKS_0_M3 = -0.24495404057434964


def test_peaks_value_frozen():
    by_hand = 3 * math.exp(-4) - 10 * 243 * math.exp(-9) - math.exp(-10) / 3
    assert peaks_function(0.0, -3.0) == pytest.approx(by_hand, rel=1e-14)
    assert peaks_function(0.0, -3.0) == PEAKS_0_M3


def test_peaks_gradient_matches_differences():
    rng = np.random.default_rng(0)
    for x, y in rng.uniform(-3, 3, size=(10, 2)):
        gx, gy = peaks_gradient(x, y)
        fx = (peaks_function(x + 1e-6, y) - peaks_function(x - 1e-6, y)) / 2e-6
        fy = (peaks_function(x, y + 1e-6) - peaks_function(x, y - 1e-6)) / 2e-6
        assert gx == pytest.approx(fx, abs=1e-6) and gy == pytest.approx(fy, abs=1e-6)


def test_peaks_not_symmetric_in_x():
    assert peaks_function(1.0, 0.0) != peaks_function(-1.0, 0.0)


def test_peaks_dataset_properties():
    ds = generate_peaks(5000, seed=3)
    counts = ds.targets.sum(axis=1)
    assert np.all(np.abs(counts - 1000) <= 100)
    assert np.all(np.abs(ds.features) <= 3.0)
    assert ds.n_features == 2 and ds.n_classes == 5 and ds.n_samples == 5000
    assert len(ds.val_idx) == 1000 and len(ds.train_idx) == 4000
    again = generate_peaks(5000, seed=3)
    assert np.array_equal(ds.features, again.features) and np.array_equal(ds.targets, again.targets)
    assert np.array_equal(ds.val_idx, again.val_idx)


def test_peaks_quantile_edges_and_errors():
    e = peaks_quantile_edges()
    assert e.shape == (4,) and np.all(np.diff(e) > 0)
    with pytest.raises(ValueError):
        generate_peaks(5)
    with pytest.raises(ValueError):
        generate_peaks(100, quantile_edges=[1, 0, 2, 3])


@settings(max_examples=30, deadline=None)
@given(st.integers(10, 400), st.integers(0, 10**6))
def test_split_disjoint_and_stable(s, seed):
    tr, va = split_indices(s, seed, 0.2)
    assert np.intersect1d(tr, va).size == 0
    assert np.array_equal(np.union1d(tr, va), np.arange(s))
    tr2, va2 = split_indices(s, seed, 0.2)
    assert np.array_equal(tr, tr2) and np.array_equal(va, va2)


def test_dataset_invariants():
    X = np.zeros((2, 3))
    with pytest.raises(DataFormatError):
        Dataset(X, one_hot([0, 1], 2), np.array([0]), np.array([1]))
    with pytest.raises(DataFormatError):
        Dataset(X, one_hot([0, 1, 1], 2), np.array([0, 1]), np.array([1, 2]))
    with pytest.raises(DataFormatError):
        Dataset(X, np.array([[1.5, 1, 1], [-0.5, 0, 0]]), np.array([0]), np.array([1]))


# ---------------------------------------------------------------- IDX


@pytest.fixture
def idx_fixture(tmp_path):
    images = np.stack([np.zeros((28, 28)), np.full((28, 28), 255)]).astype(np.uint8)
    img, lab = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(img, images, IDX_IMAGES_MAGIC)
    write_idx(lab, np.array([3, 7]), IDX_LABELS_MAGIC)
    return img, lab


def test_mnist_fixture(idx_fixture):
    ds = load_mnist(*idx_fixture, val_fraction=0.5)
    assert ds.n_features == 784 and ds.n_classes == 10 and ds.n_samples == 2
    assert np.all(ds.features[:, 0] == 0.0) and np.all(ds.features[:, 1] == 1.0)
    assert np.array_equal(ds.targets[:, 0], np.eye(10)[3])
    assert np.array_equal(ds.targets[:, 1], np.eye(10)[7])
    assert load_mnist(*idx_fixture, limit=1, val_fraction=0.0).n_samples == 1


def test_idx_header_is_big_endian(idx_fixture):
    raw = idx_fixture[0].read_bytes()
    assert struct.unpack(">IIII", raw[:16]) == (0x803, 2, 28, 28)


def test_mnist_bad_magic(idx_fixture, tmp_path):
    bad = tmp_path / "bad.idx"
    bad.write_bytes(struct.pack(">I", 0xDEADBEEF) + idx_fixture[0].read_bytes()[4:])
    with pytest.raises(DataFormatError, match="offset 0"):
        load_mnist(bad, idx_fixture[1])


def test_mnist_truncated_and_mismatched(idx_fixture, tmp_path):
    short = tmp_path / "short.idx"
    short.write_bytes(idx_fixture[0].read_bytes()[:-10])
    with pytest.raises(DataFormatError, match="byte offset"):
        load_mnist(short, idx_fixture[1])
    one = tmp_path / "one.idx"
    write_idx(one, np.array([1]), IDX_LABELS_MAGIC)
    with pytest.raises(DataFormatError, match="byte offset 4"):
        load_mnist(idx_fixture[0], one)
    big = tmp_path / "big.idx"
    write_idx(big, np.array([3, 12]), IDX_LABELS_MAGIC)
    with pytest.raises(DataFormatError, match="byte offset 9"):
        load_mnist(idx_fixture[0], big)


def _official_mnist():
    import os
    root = os.environ.get("MNIST_DIR", "")
    img = os.path.join(root, "train-images-idx3-ubyte")
    lab = os.path.join(root, "train-labels-idx1-ubyte")
    return (img, lab) if root and os.path.exists(img) and os.path.exists(lab) else None


@pytest.mark.skipif(_official_mnist() is None, reason="official MNIST files not available (set MNIST_DIR)")
def test_official_mnist_limit_500():
    ds = load_mnist(*_official_mnist(), limit=500)
    assert (ds.n_features, ds.n_classes, ds.n_samples) == (784, 10, 500)


# ---------------------------------------------------------------- CSV


def test_csv_fixture(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("f1,f2,label\n1.0,2.0,0\n3.0,4.0,1\n5.5,-6.0,2\n")
    ds = load_csv(p, 3, has_header=True, val_fraction=0.0)
    assert np.array_equal(ds.features, [[1.0, 3.0, 5.5], [2.0, 4.0, -6.0]])
    assert np.array_equal(ds.targets, np.eye(3))


def test_csv_standardization(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.normal(3.0, 2.0, size=(50, 4))
    p = tmp_path / "d.csv"
    p.write_text("\n".join(",".join(f"{v:.17g}" for v in row) + f",{i % 2}" for i, row in enumerate(X)))
    ds = load_csv(p, 2, standardize=True)
    assert np.all(np.abs(ds.features.mean(axis=1)) < 1e-12)
    assert np.all(np.abs(ds.features.var(axis=1) - 1) < 1e-10)


@pytest.mark.parametrize("body, line", [
    ("1,2,0\n1,2,2\n", 2),
    ("1,2,0\n1,2\n", 2),
    ("1,2,0\n1,x,1\n3,4,0\n", 2),
    ("1,2,-1\n", 1),
])
def test_csv_errors_name_line(tmp_path, body, line):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(DataFormatError, match=f"line {line}"):
        load_csv(p, 2)


def test_csv_empty(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("a,b\n")
    with pytest.raises(DataFormatError):
        load_csv(p, 2, has_header=True)
