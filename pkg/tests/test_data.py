import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slca import data
from slca.errors import FormatError, RejectedInputError

DEFAULT_DIGEST = "8343dfe22c283307c1b0f981c40f1edd7bea7cc6db98452fc6a249e81ad1cfa7"
SMALL_DIGEST = "393bbc2274ec46706cc97236303aed74486936331b5de092e2b8e60c40cb59a3"


@pytest.fixture(scope="module")
def full():
    return data.generate(2500)


def test_pinned_digests(full):
    assert full.digest() == DEFAULT_DIGEST
    assert data.generate(40, 32, 4, 1).digest() == SMALL_DIGEST


def test_generate_is_byte_stable():
    assert data.generate(40, 32, 4, 3).to_bytes() == data.generate(40, 32, 4, 3).to_bytes()
    assert data.generate(40, 32, 4, 3).to_bytes() != data.generate(40, 32, 4, 4).to_bytes()


def test_balanced_classes(full):
    np.testing.assert_array_equal(np.bincount(full.labels), [625] * 4)


def test_foreground_brighter_than_background():
    ds, params = data.generate(200, 64, 4, 11, return_params=True)
    for img, label, p in zip(ds.images, ds.labels, params):
        mask = data.shape_mask(data.SHAPES[label], 64, p.cx, p.cy, p.radius)
        assert img[:, mask].mean() > img[:, ~mask].mean()


def test_labels_decodable_from_pixels(full):
    assert all(data.decode_label(img) == y for img, y in zip(full.images[:500], full.labels[:500]))


def test_flip_preserves_label(full):
    for code in range(4):
        flipped = data.flip(full.images[:200], np.full(200, code))
        assert all(data.decode_label(img) == y for img, y in zip(flipped, full.labels[:200]))


def test_rejects_bad_arguments():
    with pytest.raises(RejectedInputError, match="multiple"):
        data.generate(101, 64, 4)
    with pytest.raises(RejectedInputError):
        data.generate(10, 64, 5)


def test_round_trip_and_file_size(tmp_path):
    ds = data.generate(20, 16, 4, 5)
    path = tmp_path / "d.bin"
    ds.save(path)
    raw = path.read_bytes()
    assert len(raw) == data.file_size(20, 16) == 32 + 20 * (3 * 16 * 16 + 1)
    back = data.load(path)
    assert back.header == ds.header
    assert (back.header.image_size, back.header.num_classes, back.header.num_samples, back.header.seed) == \
        (16, 4, 20, 5)
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.to_bytes() == raw


def test_default_file_size():
    assert data.file_size(2500, 64) == 32 + 2500 * (3 * 64 * 64 + 1)


def test_corruption_rejected(tmp_path):
    raw = bytearray(data.generate(8, 16, 4, 5).to_bytes())
    bad = bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(FormatError, match="magic"):
        data.from_bytes(bad)
    with pytest.raises(FormatError):
        data.from_bytes(bytes(raw[:-1]))
    with pytest.raises(FormatError):
        data.from_bytes(bytes(raw[:10]))


def test_stratified_fraction_examples():
    labels = np.arange(100) % 4
    np.testing.assert_array_equal(data.stratified_fraction(labels, 1.0, 3), np.arange(100))
    half = data.stratified_fraction(labels, 0.5, 3)
    assert len(half) == 50
    assert set(np.bincount(labels[half])) <= {12, 13}
    np.testing.assert_array_equal(half, data.stratified_fraction(labels, 0.5, 3))
    assert not np.array_equal(half, data.stratified_fraction(labels, 0.5, 4))
    with pytest.raises(RejectedInputError):
        data.stratified_fraction(labels, 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(8, 400), st.integers(2, 4), st.integers(0, 1000))
def test_fraction_subsets_nest(n, k, seed):
    labels = np.arange(n) % k
    small = data.stratified_fraction(labels, 0.1, seed) if n * 0.1 >= k else None
    mid = data.stratified_fraction(labels, 0.5, seed)
    assert set(mid) <= set(range(n))
    if small is not None:
        assert set(small) <= set(mid)


def test_to_feature_map_scale():
    x = data.to_feature_map(np.array([0, 128, 255], dtype=np.uint8).reshape(1, 3, 1, 1)).ravel()
    assert x[0] == -1.0 and x[2] == 1.0
    assert abs(x[1] - 0.00392) < 1e-5
    assert data.to_feature_map(np.zeros((2, 3, 8, 8), np.uint8)).shape == (2, 3, 8, 8)
