import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_confusion, brute_iou, brute_metrics
from smokedistill.data import SegMask
from smokedistill.metrics import (ConfusionCounts, binarize, binary_metrics, confusion_counts, evaluate_model,
                                  false_positive_rate, mean_iou, pooled_iou, report_from_dict, sample_iou,
                                  summarize)


def M(rows):
    return SegMask(np.array(rows, np.uint8))


def test_binarize_threshold_convention():
    assert binarize(np.full((3, 3), 0.5), 0.5).positives == 9
    assert binarize(np.full((3, 3), 0.49), 0.5).positives == 0
    grid = np.random.default_rng(0).random((6, 7))
    np.testing.assert_array_equal(binarize(grid, 0.5).data, (grid >= 0.5).astype(np.uint8))


def test_binarize_rejects_out_of_range():
    with pytest.raises(ValueError):
        binarize(np.array([[1.2]]), 0.5)
    with pytest.raises(ValueError):
        binarize(np.array([[0.2]]), 1.0)


def test_confusion_examples():
    gt = np.zeros((4, 4), np.uint8)
    gt.flat[:5] = 1
    c = confusion_counts(SegMask(gt), SegMask(gt))
    assert (c.tp, c.tn, c.fp, c.fn) == (5, 11, 0, 0)
    c = confusion_counts(SegMask(1 - gt), SegMask(gt))
    assert c.tp == 0 and c.tn == 0
    rng = np.random.default_rng(1)
    a, b = rng.integers(0, 2, (8, 8)).astype(np.uint8), rng.integers(0, 2, (8, 8)).astype(np.uint8)
    c = confusion_counts(SegMask(a), SegMask(b))
    assert (c.tp, c.tn, c.fp, c.fn) == brute_confusion(a, b)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        confusion_counts(SegMask.zeros(3, 3), SegMask.zeros(4, 3))


def test_iou_examples():
    a = M([[1, 1, 0], [0, 0, 0]])
    assert sample_iou(a, a) == 1.0
    assert sample_iou(a, M([[0, 0, 1], [1, 0, 0]])) == 0.0
    assert sample_iou(M([[1, 1, 1, 0, 0]]), M([[0, 1, 1, 1, 1]])) == pytest.approx(0.4)
    assert sample_iou(SegMask.zeros(3, 2), SegMask.zeros(3, 2)) == 1.0


def test_binary_metrics_examples():
    m = binary_metrics(ConfusionCounts(tp=3, tn=5, fp=1, fn=1))
    assert (m.accuracy, m.precision, m.recall, m.f1) == pytest.approx((0.8, 0.75, 0.75, 0.75))
    m = binary_metrics(ConfusionCounts(tp=7, tn=3, fp=0, fn=0))
    assert (m.accuracy, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0)
    m = binary_metrics(ConfusionCounts(tp=0, tn=9, fp=0, fn=0))
    assert (m.accuracy, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0)


def test_mean_iou_examples():
    half = (M([[1, 1]]), M([[1, 0]]))
    full = (M([[1, 0]]), M([[1, 0]]))
    assert mean_iou([half, full]) == pytest.approx(0.75)
    assert mean_iou([half]) == sample_iou(*half)
    with pytest.raises(ValueError):
        mean_iou([])


masks_pair_st = st.integers(1, 10).flatmap(lambda h: st.integers(1, 10).flatmap(
    lambda w: st.tuples(arrays(np.uint8, (h, w), elements=st.integers(0, 1)),
                        arrays(np.uint8, (h, w), elements=st.integers(0, 1)))))


@settings(max_examples=200, deadline=None)
@given(masks_pair_st)
def test_iou_symmetric_flip_invariant_and_matches_oracle(pair):
    a, b = pair
    iou = sample_iou(SegMask(a), SegMask(b))
    assert iou == brute_iou(a, b)
    assert iou == sample_iou(SegMask(b), SegMask(a))
    assert iou == sample_iou(SegMask(np.ascontiguousarray(a[:, ::-1])), SegMask(np.ascontiguousarray(b[:, ::-1])))
    m = binary_metrics(confusion_counts(SegMask(a), SegMask(b)))
    assert all(0.0 <= v <= 1.0 for v in (m.accuracy, m.precision, m.recall, m.f1))
    assert (m.accuracy, m.precision, m.recall, m.f1) == brute_metrics(*brute_confusion(a, b))


@settings(max_examples=100, deadline=None)
@given(st.lists(masks_pair_st, min_size=1, max_size=6))
def test_mean_iou_within_sample_range(pairs):
    pairs = [(SegMask(a), SegMask(b)) for a, b in pairs]
    ious = [sample_iou(p, g) for p, g in pairs]
    assert min(ious) - 1e-12 <= mean_iou(pairs) <= max(ious) + 1e-12


def test_pooled_differs_from_sample_wise():
    a = M([[1]])
    b_gt = SegMask(np.ones((10, 10), np.uint8))
    b_pred = np.zeros((10, 10), np.uint8)
    b_pred[0, 0] = 1
    pairs = [(a, a), (SegMask(b_pred), b_gt)]
    assert mean_iou(pairs) == pytest.approx(0.505)
    assert pooled_iou(pairs) == pytest.approx(2 / 101)


def test_fp_rate_examples():
    zeros = [SegMask.zeros(4, 4)] * 5
    assert false_positive_rate(zeros) == 0.0
    assert false_positive_rate([SegMask(np.ones((4, 4), np.uint8))] * 3) == 1.0
    rate = false_positive_rate([SegMask(np.ones((2, 2), np.uint8))] * 89 + [SegMask.zeros(2, 2)] * 534)
    assert f"{rate:.3f}" == "0.143"
    with pytest.raises(ValueError):
        false_positive_rate([])


def test_fp_rate_min_area():
    preds = [SegMask(np.array([[1, 1, 0]], np.uint8)), SegMask(np.array([[1, 0, 0]], np.uint8))]
    assert false_positive_rate(preds, 0) == 1.0
    assert false_positive_rate(preds, 1) == 0.5
    assert false_positive_rate(preds, 2) == 0.0


def test_summarize_per_source():
    pairs = [(M([[1, 0]]), M([[1, 0]])), (M([[0, 0]]), M([[1, 1]])), (M([[1, 1]]), M([[1, 0]]))]
    report = summarize(pairs, ["UAV", "FIXED_CAMERA", "UAV"])
    assert report.sample_count == 3
    assert report.miou == pytest.approx((1 + 0 + 0.5) / 3)
    assert report.per_source["UAV"].sample_count == 2
    assert report.per_source["UAV"].miou == pytest.approx(0.75)
    assert sum(r.sample_count for r in report.per_source.values()) == 3
    # recall per sample: 1, 0, 1
    assert report.recall == pytest.approx(2 / 3)
    back = report_from_dict(json.loads(report.to_json()))
    assert back.to_dict() == report.to_dict()
    assert "0.500" in report.table("x")


def test_evaluate_model_oracle_and_zero():
    rng = np.random.default_rng(0)
    gts = [SegMask((rng.random((6, 6)) < 0.5).astype(np.uint8)) for _ in range(4)]
    images = [np.full((6, 6, 3), i, np.uint8) for i in range(4)]
    oracle = lambda img: gts[int(img[0, 0, 0])].data.astype(float)  # noqa: E731
    report = evaluate_model(oracle, [("UAV", im, g) for im, g in zip(images, gts)])
    assert (report.miou, report.accuracy, report.precision, report.recall, report.f1) == (1.0,) * 5
    full = [SegMask(np.ones((6, 6), np.uint8))] * 2
    zero = evaluate_model(lambda img: np.zeros((6, 6)), [("UAV", images[0], g) for g in full],
                          smokeless=[images[0]])
    assert zero.miou == 0.0 and zero.recall == 0.0
    assert zero.fp_rate == 0.0


def test_evaluate_model_hand_computed():
    gts = [M([[1, 1], [0, 0]]), M([[0, 0], [0, 0]]), M([[1, 1], [1, 1]]), M([[0, 1], [0, 1]])]
    preds = [M([[1, 0], [0, 0]]), M([[0, 0], [0, 1]]), M([[1, 1], [1, 1]]), M([[1, 0], [1, 0]])]
    images = [np.full((2, 2, 3), i, np.uint8) for i in range(4)]
    model = lambda img: preds[int(img[0, 0, 0])].data.astype(float)  # noqa: E731
    report = evaluate_model(model, [("S", im, g) for im, g in zip(images, gts)])
    ious = [0.5, 0.0, 1.0, 0.0]
    acc = [0.75, 0.75, 1.0, 0.0]
    prec = [1.0, 0.0, 1.0, 0.0]
    rec = [0.5, 1.0, 1.0, 0.0]
    f1 = [2 / 3, 0.0, 1.0, 0.0]
    assert report.miou == pytest.approx(np.mean(ious))
    assert report.accuracy == pytest.approx(np.mean(acc))
    assert report.precision == pytest.approx(np.mean(prec))
    assert report.recall == pytest.approx(np.mean(rec))
    assert report.f1 == pytest.approx(np.mean(f1))


def test_evaluate_requires_gt():
    with pytest.raises(ValueError):
        evaluate_model(lambda im: np.zeros((2, 2)), [("S", np.zeros((2, 2, 3), np.uint8), None)])
