import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mecam import netpbm
from mecam.data import (
    ManifestRow,
    apply_augment,
    augment_image,
    bilinear_resize,
    load_dataset,
    read_manifest,
    synth_generate,
    write_manifest,
)
from mecam.errors import (
    BadImageMagic,
    DataError,
    LabelRangeError,
    ManifestError,
    MissingFileError,
    TruncatedImage,
    UnsupportedMaxval,
)
from mecam.rng import SplitMix64


# --- codecs ---


def test_single_byte_pgm():
    assert netpbm.decode(b"P5\n1 1\n255\n\x80")[0, 0] == 128


def test_comment_in_header():
    plain = b"P5\n2 1\n255\n\x01\x02"
    commented = b"P5\n# made by hand\n2 1 # size\n255\n\x01\x02"
    assert netpbm.decode(plain).tobytes() == netpbm.decode(commented).tobytes()


@pytest.mark.parametrize(
    "buf,err",
    [
        (b"P2\n1 1\n255\n\x00", BadImageMagic),
        (b"P5\n1 1\n65535\n\x00\x00", UnsupportedMaxval),
        (b"P5\n2 2\n255\n\x00", TruncatedImage),
        (b"P6\n1 1\n255\n\x00\x00", TruncatedImage),
    ],
)
def test_decode_errors(buf, err):
    with pytest.raises(err):
        netpbm.decode(buf)


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_pgm_round_trip(img):
    assert np.array_equal(netpbm.decode(netpbm.encode_pgm(img)), img)


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9), st.just(3))))
def test_ppm_round_trip(img):
    out = netpbm.decode(netpbm.encode_ppm(img))
    assert out.shape == img.shape and np.array_equal(out, img)


def test_read_image_scaling(tmp_path):
    (tmp_path / "w.pgm").write_bytes(netpbm.encode(np.full((2, 3), 255, np.uint8)))
    img = netpbm.read_image(tmp_path / "w.pgm")
    assert img.shape == (1, 2, 3) and (img == 1.0).all()
    with pytest.raises(MissingFileError):
        netpbm.read_image(tmp_path / "none.pgm")


# --- manifests and loading ---


def test_manifest_round_trip_and_errors(tmp_path):
    rows = [ManifestRow("a.pgm", 0, "train"), ManifestRow("b.pgm", None, "test")]
    write_manifest(tmp_path / "m.csv", rows)
    assert read_manifest(tmp_path / "m.csv") == rows
    for text in ("path,label\na,0\n", "path,label,split\na,0,train\na,1,train\n", "path,label,split\na,0,dev\n"):
        (tmp_path / "bad.csv").write_text(text)
        with pytest.raises(ManifestError):
            read_manifest(tmp_path / "bad.csv")


def test_load_dataset_resize_and_label_range(tmp_path):
    (tmp_path / "c.pgm").write_bytes(netpbm.encode(np.full((4, 4), 51, np.uint8)))
    write_manifest(tmp_path / "m.csv", [ManifestRow("c.pgm", 1, "train")])
    ds = load_dataset(tmp_path, "m.csv", input_size=8, channels=1, num_classes=2)
    assert len(ds) == 1 and ds.images.shape == (1, 1, 8, 8)
    np.testing.assert_allclose(ds.images, 51 / 255, rtol=1e-6)
    with pytest.raises(LabelRangeError):
        load_dataset(tmp_path, "m.csv", num_classes=1)
    with pytest.raises(DataError):
        load_dataset(tmp_path, "m.csv", channels=3)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 7), elements=st.floats(0, 1)), st.integers(5, 16), st.integers(7, 16))
def test_resize_stays_in_range(img, h, w):
    out = bilinear_resize(img, (h, w))
    assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


# --- generator ---


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synth_is_deterministic_and_balanced(tmp_path):
    synth_generate(tmp_path / "a", 5, 10, image_size=16)
    synth_generate(tmp_path / "b", 5, 10, image_size=16)
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    rows = read_manifest(tmp_path / "a" / "id.csv")
    assert sorted(r.label for r in rows) == [0] * 10 + [1] * 10
    assert [r.split for r in rows].count("train") == 14
    ood = read_manifest(tmp_path / "a" / "ood_rings.csv")
    assert len(ood) == 4 and all(r.label is None for r in ood)
    synth_generate(tmp_path / "c", 6, 10, image_size=16)
    assert _tree_digest(tmp_path / "a") != _tree_digest(tmp_path / "c")


def test_synth_object_coverage(tmp_path):
    synth_generate(tmp_path, 1, 30)
    ds = load_dataset(tmp_path, "id.csv", with_masks=True)
    cover = ds.masks.mean(axis=(1, 2))
    assert cover.min() >= 0.05 and cover.max() <= 0.40
    assert 0.0 <= ds.images.min() and ds.images.max() <= 1.0


def test_synth_needs_ten_per_class(tmp_path):
    with pytest.raises(DataError):
        synth_generate(tmp_path, 0, 9)


# --- augmentation ---


def test_augment_examples():
    img = np.random.default_rng(0).random((1, 4, 4)).astype(np.float32)
    assert np.array_equal(apply_augment(img, False, 1.0), img)
    assert np.array_equal(apply_augment(apply_augment(img, True, 1.0), True, 1.0), img)
    ones = np.ones((1, 3, 3), np.float32)
    assert (apply_augment(ones, False, 1.1) == 1.0).all()


def test_augment_random_branch_stays_in_range():
    img = np.random.default_rng(1).random((1, 8, 8)).astype(np.float32)
    rng = SplitMix64(3)
    for _ in range(20):
        out = augment_image(img, rng)
        assert out.shape == img.shape and 0.0 <= out.min() and out.max() <= 1.0


def test_rng_spawn_is_order_independent():
    r = SplitMix64(42)
    a = r.spawn(1, 2).uniform(size=3)
    r.next_u64(5)
    # spawn reads the current state, so advancing the parent changes children
    assert not np.array_equal(a, r.spawn(1, 2).uniform(size=3))
    assert np.array_equal(SplitMix64(42).spawn(1, 2).uniform(size=3), a)
