import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from statespace_ssl.augment import (ViewConfig, blob_count, color_moments, decode_ppm, encode_ppm, item_rng,
                                    lesion_spec, load_dataset, load_ppm, make_views, random_resized_crop,
                                    resize_bilinear, sample_crop_box, save_ppm, single_blob_image,
                                    synth_dataset, synth_image)
from statespace_ssl.errors import DatasetError, FormatError, InvalidArgumentError, ShapeError
from statespace_ssl.estimators import LinearProbe


def quantised(rng, h, w):
    return rng.integers(0, 256, (h, w, 3)) / 255.0


# -- PPM ------------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**16))
def test_ppm_roundtrip_is_exact(h, w, seed):
    img = quantised(np.random.default_rng(seed), h, w)
    np.testing.assert_array_equal(decode_ppm(encode_ppm(img)), img)


def test_ppm_file_roundtrip(tmp_path):
    img = quantised(np.random.default_rng(0), 5, 7)
    save_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(load_ppm(tmp_path / "a.ppm"), img)


def test_ppm_header_comments_are_skipped():
    buf = b"P6 # made by hand\n2 1\n# another\n255\n" + bytes([255, 0, 0, 0, 0, 255])
    np.testing.assert_array_equal(decode_ppm(buf), [[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]])


@pytest.mark.parametrize("buf,offset", [
    (b"P3\n1 1\n255\n\x00\x00\x00", 0),
    (b"P6\n1 x\n255\n\x00\x00\x00", 5),
    (b"P6\n1 1\n65535\n\x00\x00\x00", 7),
    (b"P6\n1 0\n255\n", 5),
    (b"P6\n2 1\n255\n\x00\x00\x00", 14),
])
def test_ppm_format_errors_carry_offset(buf, offset):
    with pytest.raises(FormatError) as info:
        decode_ppm(buf)
    assert info.value.offset == offset
    assert f"offset {offset}" in str(info.value)


def test_ppm_truncated_header():
    with pytest.raises(FormatError):
        decode_ppm(b"P6\n4")


def test_encode_rejects_out_of_range():
    with pytest.raises(InvalidArgumentError):
        encode_ppm(np.full((2, 2, 3), 1.5))
    with pytest.raises(ShapeError):
        encode_ppm(np.zeros((2, 2)))


# -- geometry -------------------------------------------------------------------

def test_resize_identity():
    img = np.random.default_rng(1).uniform(size=(6, 9, 3))
    np.testing.assert_allclose(resize_bilinear(img, 6, 9), img, atol=1e-15)


def test_resize_matches_scalar_reference():
    img = np.random.default_rng(2).uniform(size=(7, 5, 3))
    out = resize_bilinear(img, 11, 4)
    h, w = 7, 5
    for i in range(11):
        for j in range(4):
            y = min(max((i + 0.5) * h / 11 - 0.5, 0), h - 1)
            x = min(max((j + 0.5) * w / 4 - 0.5, 0), w - 1)
            y0, x0 = int(y), int(x)
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            want = (img[y0, x0] * (1 - fy) * (1 - fx) + img[y0, x1] * (1 - fy) * fx
                    + img[y1, x0] * fy * (1 - fx) + img[y1, x1] * fy * fx)
            np.testing.assert_allclose(out[i, j], want, atol=1e-14)


def test_resize_preserves_constant():
    out = resize_bilinear(np.full((5, 5, 3), 0.3), 17)
    np.testing.assert_allclose(out, 0.3, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 80), st.integers(2, 80), st.integers(0, 10**6),
       st.sampled_from([(0.4, 1.0), (0.05, 0.4), (1.0, 1.0)]))
def test_crop_box_inside_image(h, w, seed, area):
    top, left, ch, cw = sample_crop_box(h, w, area, np.random.default_rng(seed))
    assert 0 <= top and 0 <= left and ch >= 1 and cw >= 1
    assert top + ch <= h and left + cw <= w


def test_random_resized_crop_validation():
    img = np.zeros((8, 8, 3))
    rng = np.random.default_rng(0)
    with pytest.raises(InvalidArgumentError):
        random_resized_crop(img, 4, (0.5, 0.2), rng)
    with pytest.raises(InvalidArgumentError):
        random_resized_crop(img, 1, (0.2, 0.5), rng)
    with pytest.raises(InvalidArgumentError):
        random_resized_crop(np.zeros((1, 8, 3)), 4, (0.2, 0.5), rng)


# -- views ------------------------------------------------------------------------

def test_default_views_counts_and_sizes():
    img = np.random.default_rng(3).uniform(size=(256, 256, 3))
    views = make_views(img, np.random.default_rng(4))
    assert len(views.globals) == 2 and len(views.locals) == 6
    assert all(v.shape == (224, 224, 3) for v in views.globals)
    assert all(v.shape == (96, 96, 3) for v in views.locals)
    assert all(v.min() >= 0 and v.max() <= 1 for v in views.globals + views.locals)


def test_views_are_reproducible_per_item():
    img = np.random.default_rng(5).uniform(size=(32, 32, 3))
    cfg = ViewConfig(global_size=16, local_size=8)
    a = make_views(img, item_rng(7, 2, 11), cfg)
    b = make_views(img, item_rng(7, 2, 11), cfg)
    c = make_views(img, item_rng(7, 3, 11), cfg)
    for x, y in zip(a.globals + a.locals, b.globals + b.locals):
        np.testing.assert_array_equal(x, y)
    assert not np.array_equal(a.globals[0], c.globals[0])


def test_item_rng_independent_of_order():
    first = [item_rng(0, 0, i).uniform() for i in range(5)]
    reverse = [item_rng(0, 0, i).uniform() for i in reversed(range(5))]
    assert first == reverse[::-1]


# -- synthetic data --------------------------------------------------------------

@pytest.mark.parametrize("c", [0, 1, 2])
def test_synth_image_has_class_many_blobs(c):
    for i in range(5):
        img = synth_image(c, 3, 64, np.random.default_rng(100 * c + i))
        assert blob_count(img) == lesion_spec(c, 3, 64).blobs


def test_single_blob_image():
    img = single_blob_image(64, (20.0, 40.0), 6.0, np.random.default_rng(0))
    assert blob_count(img) == 1
    assert img[20, 40, 0] > img[20, 40, 1] - 0.05


def test_synth_dataset_layout_and_reload(tmp_path):
    ds = synth_dataset(tmp_path / "d", 3, 4, 32, seed=1)
    assert len(ds) == 12
    again = load_dataset(tmp_path / "d")
    assert again.class_names == ["class_00", "class_01", "class_02"]
    np.testing.assert_array_equal(again.labels, np.repeat([0, 1, 2], 4))
    assert again.load_images().shape == (12, 32, 32, 3)


def test_synth_dataset_is_seeded(tmp_path):
    synth_dataset(tmp_path / "a", 2, 2, 16, seed=5)
    synth_dataset(tmp_path / "b", 2, 2, 16, seed=5)
    for name in ("class_00/0000.ppm", "class_01/0001.ppm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_dataset_validation(tmp_path):
    with pytest.raises(InvalidArgumentError):
        synth_dataset(tmp_path / "x", 1, 3)
    with pytest.raises(InvalidArgumentError):
        synth_dataset(tmp_path / "x", 2, 0)


def test_load_dataset_errors(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "missing")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)
    (tmp_path / "a").mkdir()
    with pytest.raises(DatasetError, match="zero samples"):
        load_dataset(tmp_path)


def test_colour_statistics_separate_classes():
    # the classes must be learnable from simple colour statistics
    rng = np.random.default_rng(0)
    X, y = [], []
    for c in range(4):
        for i in range(40):
            X.append(color_moments(synth_image(c, 4, 64, np.random.default_rng([c, i]))))
            y.append(c)
    X, y = np.array(X), np.array(y)
    order = rng.permutation(len(y))
    train, test = order[:120], order[120:]
    acc = (LinearProbe().fit(X[train], y[train]).predict(X[test]) == y[test]).mean()
    assert acc >= 0.9
