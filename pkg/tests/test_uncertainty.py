import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flowseg.data import MultiAnnotatedSample, read_pgm
from flowseg.uncertainty import gt_confidence_map, pixelwise_stats, write_maps

from . import oracles


def test_identical_masks_zero_variance():
    m = (np.random.default_rng(0).random((6, 6)) < 0.5).astype(np.uint8)
    u = pixelwise_stats([m] * 5)
    assert np.all(u.variance == 0) and np.array_equal(u.mean, m.astype(float))
    assert u.count == 5


def test_single_pixel_disagreement():
    a = np.zeros((3, 3), np.uint8)
    b = a.copy()
    b[1, 2] = 1
    u = pixelwise_stats([a, b])
    expect = np.zeros((3, 3))
    expect[1, 2] = 0.25
    assert np.array_equal(u.variance, expect)


def test_two_of_four_votes():
    ms = [np.full((2, 2), v, np.uint8) for v in (1, 1, 0, 0)]
    u = pixelwise_stats(ms)
    assert np.all(u.mean == 0.5) and np.all(u.variance == 0.25)


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        pixelwise_stats([])
    with pytest.raises(ValueError):
        pixelwise_stats([np.zeros((2, 2)), np.zeros((2, 3))])
    with pytest.raises(ValueError):
        pixelwise_stats([np.full((2, 2), 2)])


sets = st.integers(1, 8).flatmap(
    lambda n: st.lists(arrays(np.uint8, (3, 5), elements=st.integers(0, 1)), min_size=1, max_size=n)
)


@settings(max_examples=80, deadline=None)
@given(masks=sets, seed=st.integers(0, 100))
def test_bernoulli_identity_range_and_permutation(masks, seed):
    u = pixelwise_stats(masks)
    assert np.max(np.abs(u.variance - u.mean * (1 - u.mean))) <= 1e-12
    assert np.all((u.variance >= 0) & (u.variance <= 0.25))
    assert np.allclose(u.variance.ravel(), oracles.variance_map([m.ravel().tolist() for m in masks]), atol=1e-12)
    perm = np.random.default_rng(seed).permutation(len(masks))
    u2 = pixelwise_stats([masks[i] for i in perm])
    assert np.allclose(u2.variance, u.variance, atol=1e-15) and np.allclose(u2.mean, u.mean, atol=1e-15)


def test_gt_confidence_map_uses_annotations():
    a = np.eye(4, dtype=np.uint8)
    s = MultiAnnotatedSample(np.zeros((1, 4, 4)), [a, a, np.zeros_like(a)], "x")
    u = gt_confidence_map(s)
    assert u.count == 3
    assert u.variance[0, 0] == pytest.approx(2 / 9) and u.variance[0, 1] == 0


def test_write_maps_scaling(tmp_path):
    u = pixelwise_stats([np.array([[1, 1, 0]], np.uint8), np.array([[1, 0, 0]], np.uint8)])
    write_maps(u, tmp_path / "m.pgm", tmp_path / "v.pgm")
    assert read_pgm(tmp_path / "m.pgm").tolist() == [[255, 128, 0]]
    assert read_pgm(tmp_path / "v.pgm").tolist() == [[0, 255, 0]]
