import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsdh.boxes import (
    CODEC_CLAMP,
    DEFAULT_SCALE,
    SCALE_CLAMP,
    Box,
    DeltaScale,
    SizeBucket,
    area_bucket,
    clip_boxes,
    decode_full,
    decode_offset,
    decode_scaling,
    decode_view,
    encode_delta,
    iou,
    nms,
    pairwise_iou,
    views_to_delta,
)
from dsdh.errors import InvalidInputError

from . import oracles

coord = st.floats(-200, 200, allow_nan=False)
size = st.floats(1, 512, allow_nan=False)
box_st = st.tuples(coord, coord, size, size)
delta_st = st.tuples(*[st.floats(-4, 4, allow_nan=False)] * 4)


def random_boxes(rng, n):
    return np.column_stack([rng.uniform(-100, 100, (n, 2)), rng.uniform(1, 512, (n, 2))])


class TestCodec:
    def test_identity_encodes_to_zero(self):
        b = np.array([[10, 10, 20, 20.0]])
        assert np.array_equal(encode_delta(b, b), np.zeros((1, 4)))

    def test_center_shift_example(self):
        d = encode_delta([10, 10, 20, 20], [12, 11, 20, 20])
        assert np.array_equal(d, [1.0, 0.5, 0.0, 0.0])

    def test_size_doubling_example(self):
        d = encode_delta([0, 0, 10, 10], [0, 0, 20, 20])
        assert np.array_equal(d, [0.0, 0.0, 5 * math.log(2), 5 * math.log(2)])
        assert d[2] == pytest.approx(3.4657, abs=1e-4)

    def test_default_scale_constants(self):
        assert tuple(DEFAULT_SCALE) == (10, 10, 5, 5)
        assert tuple(DeltaScale()) == (10.0, 10.0, 5.0, 5.0)

    def test_decode_zero_delta_is_identity(self):
        b = np.array([[3.0, -4.0, 7.0, 9.0]])
        assert np.array_equal(decode_full(b, np.zeros((1, 4))), b)

    def test_decode_inverts_encode_example(self):
        assert np.array_equal(decode_full([10, 10, 20, 20], [1.0, 0.5, 0, 0]), [12, 11, 20, 20])

    def test_decode_offset_example(self):
        assert np.array_equal(decode_offset([10, 10, 20, 20], [1.0, 0.5]), [12, 11, 20, 20])

    def test_decode_scaling_example(self):
        out = decode_scaling([12, 11, 10, 10], [5 * math.log(2), 5 * math.log(2)])
        assert np.allclose(out, [12, 11, 20, 20], atol=1e-12)

    def test_round_trip_ten_thousand_pairs(self):
        rng = np.random.default_rng(0)
        p, g = random_boxes(rng, 10_000), random_boxes(rng, 10_000)
        err = np.abs(decode_full(p, encode_delta(p, g)) - g)
        assert err.max() < 1e-9

    def test_sequential_composition_is_exact(self):
        rng = np.random.default_rng(1)
        p = random_boxes(rng, 10_000)
        d = rng.normal(0, 2, (10_000, 4))
        seq = decode_scaling(decode_offset(p, d[:, :2]), d[:, 2:])
        assert np.array_equal(seq, decode_full(p, d))

    def test_offset_keeps_size_and_scaling_keeps_center(self):
        rng = np.random.default_rng(2)
        p = random_boxes(rng, 100)
        v = rng.normal(0, 3, (100, 2))
        assert np.array_equal(decode_offset(p, v)[:, 2:], p[:, 2:])
        assert np.array_equal(decode_scaling(p, v)[:, :2], p[:, :2])

    def test_view_independence(self):
        rng = np.random.default_rng(3)
        p, g = random_boxes(rng, 500), random_boxes(rng, 500)
        resized = g.copy()
        resized[:, 2:] = rng.uniform(1, 512, (500, 2))
        moved = g.copy()
        moved[:, :2] = rng.uniform(-100, 100, (500, 2))
        assert np.array_equal(encode_delta(p, g)[:, :2], encode_delta(p, resized)[:, :2])
        assert np.array_equal(encode_delta(p, g)[:, 2:], encode_delta(p, moved)[:, 2:])

    def test_hv_views_reassemble(self):
        d = np.array([1.0, 2.0, 3.0, 4.0])
        assert np.array_equal(views_to_delta(d[[0, 1]], d[[2, 3]], "OS"), d)
        assert np.array_equal(views_to_delta(d[[0, 2]], d[[1, 3]], "HV"), d)
        b = np.array([5.0, 6.0, 7.0, 8.0])
        hv = decode_view(decode_view(b, d[[0, 2]], "H"), d[[1, 3]], "V")
        assert np.allclose(hv, decode_full(b, d), rtol=0, atol=1e-12)

    def test_decode_saturates_instead_of_overflowing(self):
        out = decode_full([0, 0, 10, 10], [0, 0, 1e6, 1e6])
        assert np.all(np.isfinite(out))
        assert out[2] == pytest.approx(10 * math.exp(CODEC_CLAMP))

    def test_decode_clamp_is_configurable(self):
        out = decode_full([0, 0, 10, 10], [0, 0, 1e6, 0], clamp=SCALE_CLAMP)
        assert out[2] == pytest.approx(10 * 1000 / 16)
        assert out[3] == 10

    @pytest.mark.parametrize("bad", [[0, 0, 0, 5], [0, 0, 5, -1], [0, 0, np.nan, 1]])
    def test_encode_rejects_degenerate(self, bad):
        with pytest.raises(InvalidInputError):
            encode_delta(bad, [0, 0, 1, 1])

    def test_box_type(self):
        b = Box(1, 2, 3, 4)
        assert b.area == 12
        assert tuple(Box.from_corners(0, 0, 4, 2)) == (2, 1, 4, 2)

    @settings(max_examples=200, deadline=None)
    @given(box_st, box_st)
    def test_round_trip_property(self, p, g):
        assert np.allclose(decode_full(p, encode_delta(p, g)), g, rtol=1e-9, atol=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(box_st, delta_st)
    def test_sequential_composition_property(self, p, d):
        d = np.asarray(d)
        assert np.array_equal(decode_scaling(decode_offset(p, d[:2]), d[2:]), decode_full(p, d))


class TestIoU:
    def test_self_overlap(self):
        assert iou([5, 5, 10, 10], [5, 5, 10, 10]) == 1.0

    def test_disjoint(self):
        assert iou([0, 0, 2, 2], [10, 10, 2, 2]) == 0.0

    def test_half_shift_is_one_third(self):
        assert iou([5, 5, 10, 10], [10, 5, 10, 10]) == pytest.approx(1 / 3, abs=1e-15)

    def test_matches_oracle(self):
        rng = np.random.default_rng(4)
        a, b = random_boxes(rng, 40) / 4, random_boxes(rng, 30) / 4
        ious = pairwise_iou(a, b)
        ref = np.array([[oracles.box_iou(x, y) for y in b.tolist()] for x in a.tolist()])
        assert np.allclose(ious, ref, atol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(box_st, box_st)
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0
        assert iou(a, a) == pytest.approx(1.0)


class TestNMS:
    def test_single_detection_kept(self):
        assert nms([[0, 0, 5, 5]], [1], [0.3]).tolist() == [0]

    def test_identical_boxes_keep_best(self):
        assert nms([[0, 0, 5, 5]] * 2, [1, 1], [0.8, 0.9]).tolist() == [1]

    def test_low_overlap_both_kept(self):
        keep = nms([[5, 5, 10, 10], [10, 5, 10, 10]], [1, 1], [0.9, 0.8], 0.5)
        assert keep.tolist() == [0, 1]

    def test_other_class_not_suppressed(self):
        assert nms([[0, 0, 5, 5]] * 2, [1, 2], [0.9, 0.8]).tolist() == [0, 1]

    def test_equal_scores_prefer_earlier_index(self):
        assert nms([[0, 0, 5, 5]] * 3, [1, 1, 1], [0.5, 0.5, 0.5]).tolist() == [0]

    def test_matches_reference_on_random_cases(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            n = int(rng.integers(0, 25))
            boxes = np.column_stack([rng.uniform(0, 60, (n, 2)), rng.uniform(4, 40, (n, 2))])
            classes = rng.integers(1, 4, n)
            scores = np.round(rng.uniform(0, 1, n), 1)  # coarse scores force ties
            thr = float(rng.choice([0.3, 0.5, 0.7]))
            got = nms(boxes, classes, scores, thr).tolist()
            ref = oracles.nms(boxes.tolist(), classes.tolist(), scores.tolist(), thr)
            assert got == ref

    def test_kept_boxes_do_not_overlap_and_are_order_invariant(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            n = 20
            boxes = np.column_stack([rng.uniform(0, 60, (n, 2)), rng.uniform(4, 40, (n, 2))])
            classes = rng.integers(1, 3, n)
            scores = rng.uniform(0, 1, n)
            keep = nms(boxes, classes, scores, 0.5)
            for i in keep:
                for j in keep:
                    if i < j and classes[i] == classes[j]:
                        assert iou(boxes[i], boxes[j]) <= 0.5
            perm = rng.permutation(n)
            keep_perm = nms(boxes[perm], classes[perm], scores[perm], 0.5)
            assert sorted(perm[keep_perm].tolist()) == sorted(keep.tolist())

    def test_rejects_bad_threshold(self):
        with pytest.raises(InvalidInputError):
            nms([[0, 0, 1, 1]], [1], [1.0], 1.5)


class TestBuckets:
    @pytest.mark.parametrize(
        "side,bucket",
        [(30, SizeBucket.SMALL), (32, SizeBucket.MEDIUM), (96, SizeBucket.MEDIUM), (100, SizeBucket.LARGE)],
    )
    def test_thresholds(self, side, bucket):
        assert area_bucket([0, 0, side, side]) == bucket

    def test_boundaries_are_exact(self):
        assert area_bucket([0, 0, 1023.9 / 32, 32]) == SizeBucket.SMALL
        assert area_bucket([0, 0, 9216.1 / 96, 96]) == SizeBucket.LARGE


def test_clip_boxes():
    out = clip_boxes([[0, 0, 10, 10]], 100, 100)
    assert np.allclose(out, [[2.5, 2.5, 5, 5]])
