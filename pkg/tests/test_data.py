import gzip
import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dmicro.data import (
    PRESETS,
    ImageDataset,
    SegDataset,
    augment,
    build_patchmnist,
    build_patchmnist_preset,
    center_crop,
    closing,
    downscale_shape,
    find_mnist,
    load_dataset,
    load_mnist_pools,
    make_pseudo_gt,
    manifest_digest,
    preprocess_stack,
    random_crop,
    read_idx_images,
    resize_bilinear,
    save_dataset,
    segmentation_split,
)

from oracles import box_close

masks = arrays(bool, st.tuples(st.integers(4, 14), st.integers(4, 14)))


def write_idx(path, arr, magic=0x803, compress=False):
    raw = struct.pack(">IIII", magic, *arr.shape) + arr.astype(np.uint8).tobytes()
    path.write_bytes(gzip.compress(raw) if compress else raw)


# -- IDX -------------------------------------------------------------------------

@pytest.mark.parametrize("compress", [False, True])
def test_read_idx(tmp_path, compress):
    arr = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    path = tmp_path / "x.idx"
    write_idx(path, arr, compress=compress)
    np.testing.assert_array_equal(read_idx_images(path), arr)


def test_read_idx_errors(tmp_path):
    path = tmp_path / "x.idx"
    write_idx(path, np.zeros((1, 2, 2)), magic=0x801)
    with pytest.raises(ValueError):
        read_idx_images(path)
    path.write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + b"\0" * 5)
    with pytest.raises(ValueError):
        read_idx_images(path)
    with pytest.raises(FileNotFoundError):
        find_mnist(tmp_path, "train")


def test_fixture_pools(mnist_dir):
    train, test = load_mnist_pools(mnist_dir)
    assert train.shape == (4000, 28, 28) and test.shape == (1000, 28, 28)
    assert train.dtype == np.float32 and train.min() >= 0 and train.max() <= 1


# -- resizing and preprocessing --------------------------------------------------

def test_resize_constant_digit():
    out = resize_bilinear(np.full((28, 28), 0.5), (32, 32))
    assert out.shape == (32, 32)
    np.testing.assert_allclose(out, 0.5, atol=1e-12)


def test_resize_linear_ramp_interior():
    # bilinear interpolation reproduces an affine ramp away from the clamped edges
    x = np.arange(8, dtype=float)
    img = np.tile(x, (8, 1))
    out = resize_bilinear(img, (16, 16))
    centres = (np.arange(16) + 0.5) / 2 - 0.5
    np.testing.assert_allclose(out[5, 2:-2], centres[2:-2], atol=1e-12)


def test_downscale_shape():
    assert downscale_shape((630, 630), Fraction(63, 20)) == (200, 200)


def test_preprocess_examples():
    img = np.array([[634.28, 134.28], [0.0, 300.0]])
    out = preprocess_stack(img, downscale=1)
    assert out[0, 0] == pytest.approx(1.0)
    assert out[0, 1] == 0.0 and out[1, 0] == 0.0
    assert out[1, 1] == pytest.approx((300 - 134.28) / 500, rel=1e-6)
    assert not preprocess_stack(np.full((6, 6), 200.0), downscale=1).any()
    with pytest.raises(ValueError):
        preprocess_stack(-np.ones((2, 2)))


def test_preprocess_stack_projection_and_downscale():
    stack = np.zeros((3, 63, 63))
    stack[1, 10:20, 10:20] = 700.0
    out = preprocess_stack(stack)
    assert out.shape == (20, 20)
    assert out.min() >= 0 and out.max() <= 1 and out.max() > 0.5


# -- pseudo ground truth ---------------------------------------------------------

def test_pseudo_gt_trivial_maps():
    assert not make_pseudo_gt(np.zeros((20, 20))).any()
    assert make_pseudo_gt(np.ones((20, 20))).all()


def test_closing_fills_hole():
    X = np.zeros((30, 30))
    X[10:20, 10:20] = 1.0
    X[14:16, 14:16] = 0.0
    gt = make_pseudo_gt(X)
    assert gt[14:16, 14:16].all()
    np.testing.assert_array_equal(gt, box_close(X > 0.3, (10, 10)))


@given(masks)
def test_closing_matches_loop_oracle(m):
    np.testing.assert_array_equal(closing(m, (3, 3)), box_close(m, (3, 3)))


@given(masks, st.sampled_from([(2, 2), (3, 3), (10, 10)]))
def test_closing_idempotent_and_extensive(m, size):
    once = closing(m, size)
    np.testing.assert_array_equal(closing(once, size), once)
    assert np.all(once[m])


def test_segdataset_validation():
    ds = ImageDataset("test", np.zeros((1, 4, 4)))
    with pytest.raises(ValueError):
        SegDataset(ds, np.full((1, 4, 4), 0.5))
    with pytest.raises(ValueError):
        SegDataset(ds, np.zeros((1, 3, 3)))
    seg = segmentation_split(ds)
    assert seg.masks.shape == (1, 4, 4) and not seg.masks.any()


# -- augmentation ----------------------------------------------------------------

@given(arrays(np.float64, (6, 6), elements=st.floats(0, 1)), st.integers(0, 2 ** 32 - 1))
def test_augment_preserves_pixels(x, seed):
    out = augment(x, np.random.default_rng(seed))
    assert sorted(out.ravel()) == sorted(x.ravel())
    assert any(np.array_equal(out, v) for v in (x, x[::-1], x[:, ::-1], x[::-1, ::-1]))


def test_flip_involution_and_exact_crop(rng):
    x = rng.random((5, 5))
    np.testing.assert_array_equal(x[::-1][::-1], x)
    np.testing.assert_array_equal(random_crop(x, 5, rng), x)
    np.testing.assert_array_equal(center_crop(x, 5), x)
    np.testing.assert_array_equal(center_crop(rng.random((7, 7)), 3).shape, (3, 3))
    with pytest.raises(ValueError):
        random_crop(x, 6, rng)


def test_augment_is_seeded(rng):
    x = rng.random((10, 10))
    a = augment(x, np.random.default_rng(4), patch=6)
    b = augment(x, np.random.default_rng(4), patch=6)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (6, 6)


# -- PatchMNIST ------------------------------------------------------------------

def small_build(seed=0):
    rng = np.random.default_rng(9)
    train, test = rng.random((40, 28, 28)), rng.random((40, 28, 28))
    return build_patchmnist(train, test, counts=(3, 5, 5), grid=4, tile=8, patch=16, seed=seed)


def test_patchmnist_shapes_and_provenance():
    ds = small_build()
    assert [len(ds[s]) for s in ("train", "val", "test")] == [3, 5, 5]
    for split, d in ds.items():
        assert d.items.shape[1:] == (16, 16)
        assert d.items.min() >= 0 and d.items.max() <= 1
    val = {i for s in ds["val"].sources for i in s}
    test = {i for s in ds["test"].sources for i in s}
    assert val <= set(range(20)) and test <= set(range(20, 40))
    assert not val & test
    assert ds["train"].random_crop and ds["train"].flips and not ds["test"].flips


def test_patchmnist_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        build_patchmnist(rng.random((10, 28, 28)), rng.random((40, 28, 28)), (1, 1, 1), grid=4, tile=8, patch=16)
    with pytest.raises(ValueError):
        build_patchmnist(rng.random((40, 28, 28)), rng.random((40, 28, 28)), (1, 1, 1), grid=2, tile=8, patch=32)


def test_patchmnist_deterministic_roundtrip(tmp_path):
    a, b = small_build(seed=3), small_build(seed=3)
    save_dataset(tmp_path / "a", a, seed=3)
    save_dataset(tmp_path / "b", b, seed=3)
    assert manifest_digest(tmp_path / "a") == manifest_digest(tmp_path / "b")
    for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    back = load_dataset(tmp_path / "a")
    for split in a:
        np.testing.assert_array_equal(back[split].items, a[split].items)
        assert back[split].sources == a[split].sources
    first = (tmp_path / "a" / "manifest.txt").read_text().splitlines()[0].split()
    assert first[0] == "train_00000.dtns" and first[1] == "train" and first[3] == "3"
    assert not np.array_equal(small_build(seed=4)["train"].items, a["train"].items)


def test_load_dataset_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)
    (tmp_path / "manifest.txt").write_text("a.dtns holdout - 0\n")
    with pytest.raises(ValueError):
        load_dataset(tmp_path)


def test_desk_preset(mnist_dir):
    ds = build_patchmnist_preset(mnist_dir, "desk", seed=0)
    p = PRESETS["desk"]
    assert [len(ds[s]) for s in ("train", "val", "test")] == list(p.counts)
    assert ds["train"].items.shape[1:] == (p.patch, p.patch)
    with pytest.raises(ValueError):
        build_patchmnist_preset(mnist_dir, "huge")
