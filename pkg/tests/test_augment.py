import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import random_mask
from smokedistill.augment import GEOMETRIC, OPS, AugOp, AugSpec, apply_joint_augmentation, sample_policy
from smokedistill.data import SegMask
from smokedistill.edges import boundary_map

PHOTOMETRIC = [op for op in OPS if op not in GEOMETRIC]


def _pair(seed, h=24, w=32):
    rng = np.random.default_rng(seed)
    image = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    mask = np.zeros((h, w), np.uint8)
    mask[h // 4:3 * h // 4, w // 3:w - 2] = 1
    return image, SegMask(mask)


def test_ten_ops():
    assert len(OPS) == 10
    assert GEOMETRIC == {AugOp.CROP, AugOp.VFLIP, AugOp.ROTATION, AugOp.PERSPECTIVE}


def test_policy_deterministic_under_seed():
    assert sample_policy(7) == sample_policy(7)
    a, b = np.random.default_rng(1), np.random.default_rng(1)
    assert [sample_policy(a) for _ in range(20)] == [sample_policy(b) for _ in range(20)]


def test_policy_strength_uniform():
    rng = np.random.default_rng(0)
    s = np.array([sample_policy(rng).strength for _ in range(5000)])
    assert s.min() >= 0 and s.max() <= 1
    assert abs(s.mean() - 0.5) < 0.02
    hist, _ = np.histogram(s, bins=5, range=(0, 1))
    assert (np.abs(hist / len(s) - 0.2) < 0.03).all()


def test_spec_rejects_bad_strength():
    with pytest.raises(ValueError):
        AugSpec(AugOp.CROP, 1.5, False, 0)


def test_hflip_twice_is_identity():
    image, mask = _pair(0)
    spec = AugSpec(None, 0.0, True, 0)
    once = apply_joint_augmentation(image, mask, spec)
    np.testing.assert_array_equal(once.image, image[:, ::-1])
    twice = apply_joint_augmentation(once.image, once.mask, spec)
    np.testing.assert_array_equal(twice.image, image)
    assert twice.mask == mask


def test_identity_spec():
    image, mask = _pair(1)
    out = apply_joint_augmentation(image, mask, AugSpec(None, 0.7, False, 3))
    np.testing.assert_array_equal(out.image, image)
    assert out.mask == mask


@pytest.mark.parametrize("op", PHOTOMETRIC)
@pytest.mark.parametrize("strength", [0.0, 0.4, 1.0])
def test_photometric_ops_leave_mask_alone(op, strength):
    image, mask = _pair(2)
    out = apply_joint_augmentation(image, mask, AugSpec(op, strength, False, 11))
    assert out.mask == mask
    assert out.image.shape == image.shape and out.image.dtype == np.uint8


def test_photometric_ops_change_image():
    image, mask = _pair(3)
    for op in (AugOp.GRAYSCALE, AugOp.INVERSION, AugOp.ERASING, AugOp.GAUSSIAN_BLUR, AugOp.COLOR_JITTER):
        out = apply_joint_augmentation(image, mask, AugSpec(op, 1.0, False, 5))
        assert not np.array_equal(out.image, image), op


def test_vflip_preserves_positive_count():
    image, mask = _pair(4)
    out = apply_joint_augmentation(image, mask, AugSpec(AugOp.VFLIP, 0.3, False, 0))
    assert out.mask.positives == mask.positives
    np.testing.assert_array_equal(out.mask.data, mask.data[::-1])


def test_geometric_ops_move_image_and_mask_together():
    # the mask marks exactly the pixels that are pure white, so after any warp the
    # mask must still sit on (near-)white pixels
    h, w = 40, 40
    image = np.zeros((h, w, 3), np.uint8)
    m = np.zeros((h, w), np.uint8)
    m[10:30, 12:26] = 1
    image[m == 1] = 255
    for op in (AugOp.CROP, AugOp.ROTATION, AugOp.PERSPECTIVE, AugOp.VFLIP):
        for seed in range(5):
            out = apply_joint_augmentation(image, SegMask(m), AugSpec(op, 0.8, bool(seed % 2), seed))
            inside = out.image[out.mask.data == 1].mean()
            outside = out.image[out.mask.data == 0].mean()
            assert inside > 200 and outside < 60, (op, seed, inside, outside)


def test_erasing_fills_with_zero_and_bounded_area():
    image = np.full((50, 50, 3), 200, np.uint8)
    mask = SegMask.zeros(50, 50)
    for seed in range(20):
        out = apply_joint_augmentation(image, mask, AugSpec(AugOp.ERASING, 1.0, False, seed))
        erased = (out.image == 0).all(axis=2).sum()
        assert 0 < erased <= 0.2 * 50 * 50 + 50


def test_crop_never_empty_at_full_strength():
    image, mask = _pair(5, 9, 7)
    for seed in range(50):
        out = apply_joint_augmentation(image, mask, AugSpec(AugOp.CROP, 1.0, False, seed))
        assert out.image.shape == image.shape


def test_same_spec_same_output():
    image, mask = _pair(6)
    for op in OPS:
        spec = AugSpec(op, 0.9, True, 42)
        a = apply_joint_augmentation(image, mask, spec)
        b = apply_joint_augmentation(image, mask, spec)
        np.testing.assert_array_equal(a.image, b.image)
        assert a.mask == b.mask


@settings(max_examples=120, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(4, 40), st.integers(4, 40), st.sampled_from([1, 3, 5]))
def test_random_policies_keep_invariants(seed, h, w, edge_width):
    rng = np.random.default_rng(seed)
    image = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    mask = SegMask(random_mask(rng, h, w))
    spec = sample_policy(rng)
    out = apply_joint_augmentation(image, mask, spec, edge_width)
    assert out.image.shape == image.shape and out.image.dtype == np.uint8
    assert out.mask.data.shape == (h, w)
    assert set(np.unique(out.mask.data)) <= {0, 1}
    np.testing.assert_array_equal(out.edges.data, boundary_map(out.mask, edge_width).data)
    assert out.spec == spec


def test_size_mismatch_rejected():
    image, _ = _pair(0)
    with pytest.raises(ValueError):
        apply_joint_augmentation(image, SegMask.zeros(5, 5), AugSpec(None, 0.0, False, 0))
