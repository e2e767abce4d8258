import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from medcl.mixing import (
    BoundingBoxMask, MixedSample, MixingError, SubsetSchedule, amplify_epoch, epoch_units, inter_mix, intra_mix,
    make_intra_mixed, mix_targets, multi_crop, rotate, sample_bbox, sample_mix_ratio, sample_subsets,
)
from medcl.phantom import UNLABELED, PhantomSpec, gen_structure_sample


def loop_intra_mix(x, ib, beta_p, rotated):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            out[i, j] = ib[i, j] * x[i, j] + (1 - ib[i, j]) * (beta_p * x[i, j] + (1 - beta_p) * rotated[i, j])
    return out


def loop_rotate(img, theta):
    """Scalar bilinear rotation with edge replication."""
    h, w = img.shape
    t = np.deg2rad(theta)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    out = np.empty_like(img)
    for i in range(h):
        for j in range(w):
            dy, dx = i - cy, j - cx
            sy = cy + np.cos(t) * dy - np.sin(t) * dx
            sx = cx + np.sin(t) * dy + np.cos(t) * dx
            sy, sx = min(max(sy, 0), h - 1), min(max(sx, 0), w - 1)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[i, j] = ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
                         + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])
    return out


def test_mix_ratio_mean_uniform():
    rng = np.random.default_rng(0)
    draws = np.array([sample_mix_ratio(1.0, rng) for _ in range(100_000)])
    assert 0.49 <= draws.mean() <= 0.51
    assert draws.min() >= 0 and draws.max() <= 1


def test_mix_ratio_deterministic_and_validated():
    assert sample_mix_ratio(1.0, 123) == sample_mix_ratio(1.0, 123)
    with pytest.raises(MixingError):
        sample_mix_ratio(0.0, 1)


def test_rotate_identity_and_constant():
    x = np.random.default_rng(1).random((12, 9))
    assert np.array_equal(rotate(x, 0), x)
    c = np.full((10, 10), 0.37)
    for theta in (-30, -7.5, 12, 45):
        np.testing.assert_allclose(rotate(c, theta), c, atol=1e-15)
    with pytest.raises(MixingError):
        rotate(x, 50)


def test_rotate_matches_scalar_oracle():
    x = np.random.default_rng(2).random((11, 13))
    for theta in (-13.0, 4.5, 30.0):
        np.testing.assert_allclose(rotate(x, theta), loop_rotate(x, theta), atol=1e-12)


def test_rotate_round_trip_on_smooth_phantom():
    s = gen_structure_sample(PhantomSpec(64, 64, 3, noise_sigma=0.0), 7)
    smooth = ndimage.gaussian_filter(s.image, 2.0)
    back = rotate(rotate(smooth, 10), -10)
    interior = (slice(12, 52), slice(12, 52))
    assert np.abs(back - smooth)[interior].max() <= 0.05


def test_intra_mix_identities():
    rng = np.random.default_rng(3)
    x = rng.random((16, 16))
    ib = sample_bbox(16, 16, (0.2, 0.4), rng).mask
    assert np.array_equal(intra_mix(x, ib, 1.0, 12.0), x)
    assert np.array_equal(intra_mix(x, np.ones_like(x), 0.3, 12.0), x)
    np.testing.assert_allclose(intra_mix(x, ib, 0.3, 0.0), x, atol=1e-12)


def test_intra_mix_matches_loop_oracle():
    rng = np.random.default_rng(4)
    for _ in range(10):
        x = rng.random((8, 8))
        ib = sample_bbox(8, 8, (0.1, 0.5), rng).mask
        bp, theta = rng.random(), rng.uniform(-15, 15)
        np.testing.assert_allclose(intra_mix(x, ib, bp, theta), loop_intra_mix(x, ib, bp, loop_rotate(x, theta)),
                                   atol=1e-12, rtol=0)


def test_bbox_full_image():
    b = sample_bbox(20, 30, (1.0, 1.0), 0)
    assert b.box == (0, 0, 20, 30) and b.mask.all()


def test_bbox_area_within_range_exhaustive():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        b = sample_bbox(64, 64, (0.1, 0.3), rng)
        frac = b.mask.sum() / (64 * 64)
        assert 0.1 <= frac <= 0.3
        assert b.mask.sum() == b.area
        r0, c0, r1, c1 = b.box
        assert b.mask[r0:r1, c0:c1].all() and b.mask.sum() == (r1 - r0) * (c1 - c0)


def test_bbox_reproducible():
    assert sample_bbox(64, 64, (0.1, 0.3), 9).box == sample_bbox(64, 64, (0.1, 0.3), 9).box


def test_subsets_m2_and_nesting():
    s = sample_subsets(2, 0)
    assert s.subsets == (frozenset({1, 2}),)
    for seed in range(50):
        s3 = sample_subsets(3, seed)
        o2, o3 = s3.subsets
        assert o2 < o3 and len(o2) == 2 and o3 == frozenset({1, 2, 3})
    with pytest.raises(MixingError):
        sample_subsets(1, 0)


def test_subsets_cover_all_pairs():
    seen = {sample_subsets(3, seed).subsets[0] for seed in range(1000)}
    assert seen == {frozenset({1, 2}), frozenset({1, 3}), frozenset({2, 3})}


@settings(max_examples=40, deadline=None)
@given(m=st.integers(2, 8), seed=st.integers(0, 2**31))
def test_schedule_invariants(m, seed):
    s = sample_subsets(m, seed)
    assert sorted(s.perm) == list(range(1, m + 1))
    subs = s.subsets
    assert subs[-1] == frozenset(range(1, m + 1))
    for k, sub in zip(range(2, m + 1), subs):
        assert len(sub) == k
    for a, b in zip(subs, subs[1:]):
        assert a < b


def _mixed(img, box, schedule):
    h, w = img.shape
    return MixedSample(img, BoundingBoxMask.from_box(h, w, box), schedule)


def test_inter_mix_formula_and_union():
    sched = sample_subsets(3, 0)
    rng = np.random.default_rng(6)
    a, b = rng.random((16, 16)), rng.random((16, 16))
    s1, s2 = _mixed(a, (0, 0, 4, 4), sched), _mixed(b, (8, 8, 12, 14), sched)
    out = inter_mix(s1, s2, 1.0)
    assert np.array_equal(out.image, a)
    assert out.bbox.mask.sum() == 16 + 24  # disjoint boxes: areas add
    same = inter_mix(s1, _mixed(a.copy(), (2, 2, 5, 5), sched), 0.5)
    np.testing.assert_allclose(same.image, a, atol=1e-15)
    out2 = inter_mix(s1, s2, 0.3)
    expected = np.array([[0.3 * a[i, j] + 0.7 * b[i, j] for j in range(16)] for i in range(16)])
    np.testing.assert_allclose(out2.image, expected, atol=1e-12)
    assert np.array_equal(out2.bbox.mask, np.maximum(s1.bbox.mask, s2.bbox.mask))


def test_inter_mix_requires_shared_schedule():
    img = np.zeros((8, 8))
    s1 = _mixed(img, (0, 0, 2, 2), SubsetSchedule((1, 2, 3)))
    s2 = _mixed(img, (0, 0, 2, 2), SubsetSchedule((2, 1, 3)))
    with pytest.raises(MixingError):
        inter_mix(s1, s2, 0.5)


def test_mix_targets():
    rng = np.random.default_rng(7)
    y1, y2 = rng.random((5, 4, 4)), rng.random((5, 4, 4))
    assert np.array_equal(mix_targets(y1, y2, 1.0).target, y1)
    np.testing.assert_allclose(mix_targets(y1, y1, 0.37).target, y1, atol=1e-15)
    assert mix_targets(np.array([0.8]), np.array([0.4]), 0.25).target[0] == pytest.approx(0.5, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), beta=st.floats(0, 1), bp=st.floats(0, 1), theta=st.floats(-45, 45))
def test_mixes_preserve_unit_range(seed, beta, bp, theta):
    rng = np.random.default_rng(seed)
    x, z = rng.random((10, 10)), rng.random((10, 10))
    ib = sample_bbox(10, 10, (0.1, 0.5), rng).mask
    xm = intra_mix(x, ib, bp, theta)
    assert xm.min() >= 0 and xm.max() <= 1
    sched = SubsetSchedule((1, 2))
    out = inter_mix(MixedSample(xm, BoundingBoxMask(ib, (0, 0, 1, 1)), sched),
                    MixedSample(z, BoundingBoxMask(ib, (0, 0, 1, 1)), sched), beta)
    assert out.image.min() >= 0 and out.image.max() <= 1


def test_samplers_deterministic():
    img = np.random.default_rng(8).random((16, 16))
    sched = sample_subsets(3, 1)
    a, b = make_intra_mixed(img, sched, 5), make_intra_mixed(img, sched, 5)
    assert np.array_equal(a.image, b.image) and a.bbox.box == b.bbox.box
    assert a.provenance == b.provenance


def test_multi_crop_identity():
    s = gen_structure_sample(PhantomSpec(32, 32, 3), 1)
    (crop,) = multi_crop(s, 1, 0, global_scale=(1.0, 1.0), seed=0)
    assert np.array_equal(crop.image, s.image)
    assert np.array_equal(crop.labels, s.labels) and np.array_equal(crop.scribbles, s.scribbles)


def test_multi_crop_scribbles_stay_sound():
    s = gen_structure_sample(PhantomSpec(64, 64, 3), 2)
    crops = multi_crop(s, 4, 6, seed=3)
    assert len(crops) == 10
    for c in crops:
        assert c.image.shape == (64, 64)
        ann = c.scribbles != UNLABELED
        assert np.array_equal(c.scribbles[ann], c.labels[ann])
        assert c.present_classes == frozenset(int(v) for v in np.unique(c.labels) if v)


def test_multi_crop_resizes_to_network_size():
    s = gen_structure_sample(PhantomSpec(64, 64, 3), 2)
    crops = multi_crop(s, 2, 2, seed=0, out_size=(32, 32))
    assert all(c.image.shape == (32, 32) and c.labels.shape == (32, 32) for c in crops)


def test_amplification_default_25_sources():
    spec = PhantomSpec(32, 32, 3)
    samples = [gen_structure_sample(spec, i) for i in range(25)]
    units = amplify_epoch(samples, sample_subsets(3, 0), seed=0)
    assert len(units) == epoch_units(25) == 1000
    assert len(units) >= 900
    assert all(u.image.shape == (32, 32) for u in units)
