import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ssfda.metrics import Confusion, binarize, confusion, dataset_confusion, evaluate, macro_miou, report


def hand_confusion(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def test_confusion_matches_hand_count_on_50_masks():
    rng = np.random.default_rng(0)
    for _ in range(50):
        shape = tuple(rng.integers(1, 7, size=2))
        pred = (rng.uniform(size=shape) < 0.5).astype(np.uint8)
        gt = (rng.uniform(size=shape) < 0.4).astype(np.uint8)
        c = confusion(pred, gt)
        assert (c.tp, c.fp, c.fn, c.tn) == hand_confusion(pred, gt)


def test_report_hand_example():
    r = report(Confusion(tp=3, fp=1, fn=2, tn=4))
    assert r.road_iou == 3 / 6
    assert r.bg_iou == 4 / 7
    assert r.miou == (3 / 6 + 4 / 7) / 2
    assert r.recall == 3 / 5 and r.precision == 3 / 4
    assert r.f1 == pytest.approx(2 * 0.75 * 0.6 / 1.35)


def test_undefined_ratios_are_none():
    r = report(Confusion(tp=0, fp=0, fn=0, tn=5))
    assert r.road_iou is None and r.recall is None and r.precision is None and r.miou is None
    assert r.bg_iou == 1.0


def test_binarize_inclusive_threshold():
    assert np.array_equal(binarize([0.49, 0.5, 0.9]), [0, 1, 1])


def test_invalid_inputs():
    with pytest.raises(ValueError):
        confusion(np.array([0, 2]), np.array([0, 1]))
    with pytest.raises(ValueError):
        confusion(np.array([0, 1]), np.array([0, 1, 1]))


def test_micro_average_sums_confusions():
    rng = np.random.default_rng(1)
    probs = rng.uniform(size=(4, 5, 5))
    labels = (rng.uniform(size=(4, 5, 5)) < 0.3).astype(np.uint8)
    total = dataset_confusion(binarize(probs), labels)
    assert total.total == probs.size
    assert evaluate(probs, labels) == report(total)
    assert macro_miou(probs, labels) is not None


@settings(max_examples=60, deadline=None)
@given(arrays(np.uint8, (4, 6), elements=st.integers(0, 1)), arrays(np.uint8, (4, 6), elements=st.integers(0, 1)))
def test_metric_ranges_and_perfect_prediction(pred, gt):
    r = report(confusion(pred, gt))
    for v in (r.road_iou, r.bg_iou, r.miou, r.recall, r.precision, r.f1):
        assert v is None or 0.0 <= v <= 1.0
    perfect = report(confusion(gt, gt))
    assert perfect.road_iou in (None, 1.0) and perfect.bg_iou in (None, 1.0)
