"""Overlap metrics, pattern features, and the softmax classification head."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vismine.backbone import BackboneSpec, ConvLayer, forward
from vismine.kernels import ConvKernel
from vismine.localize import BBox
from vismine.metrics import (
    SoftmaxHead,
    abo,
    iou,
    mabo,
    metrics_report,
    pattern_features,
    recall_at,
)
from vismine.mining import SingleClassError, VisualPattern


def box(x0, y0, x1, y1):
    return BBox(x_min=x0, y_min=y0, x_max=x1, y_max=y1)


# --- IoU ---------------------------------------------------------------------

def test_iou_examples():
    a = box(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, box(2, 2, 4, 4)) == 0.0  # touching, no interior overlap
    # 1x2 overlap over union 4 + 4 - 2 = 6
    assert iou(box(0, 0, 2, 2), box(1, 0, 3, 2)) == pytest.approx(2.0 / 6.0)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=50, deadline=None)
def test_iou_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)

    def rand_box():
        x0, y0 = int(rng.integers(0, 10)), int(rng.integers(0, 10))
        return box(x0, y0, x0 + int(rng.integers(1, 8)), y0 + int(rng.integers(1, 8)))

    a, b = rand_box(), rand_box()
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0


# --- ABO / MABO / recall -----------------------------------------------------

def test_abo_oracle():
    gts = [("im0", box(0, 0, 4, 4)), ("im1", box(0, 0, 2, 2))]
    proposals = {
        "im0": [box(0, 0, 4, 4), box(5, 5, 6, 6)],  # best overlap 1.0
        # im1 has no proposals -> contributes 0
    }
    assert abo(gts, proposals) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        abo([], proposals)


def test_self_proposals_give_perfect_scores():
    gts = [("im0", box(1, 1, 5, 5)), ("im1", box(2, 2, 7, 9))]
    proposals = {"im0": [box(1, 1, 5, 5)], "im1": [box(2, 2, 7, 9)]}
    assert abo(gts, proposals) == 1.0
    assert recall_at(gts, proposals, 0.5) == 1.0
    assert mabo({"c": abo(gts, proposals)}) == 1.0


def test_empty_proposals_give_zero():
    gts = [("im0", box(0, 0, 4, 4))]
    assert abo(gts, {}) == 0.0
    assert recall_at(gts, {}, 0.5) == 0.0


def test_recall_threshold_semantics():
    gts = [("im0", box(0, 0, 2, 2))]
    proposals = {"im0": [box(1, 0, 3, 2)]}  # IoU = 1/3
    assert recall_at(gts, proposals, 1.0 / 3.0) == 1.0  # at-or-above matches
    assert recall_at(gts, proposals, 0.34) == 0.0


def test_recall_monotone_in_threshold():
    rng = np.random.default_rng(4)
    gts, proposals = [], {}
    for i in range(20):
        x0, y0 = int(rng.integers(0, 20)), int(rng.integers(0, 20))
        gts.append((i, box(x0, y0, x0 + 8, y0 + 8)))
        dx, dy = int(rng.integers(-4, 5)), int(rng.integers(-4, 5))
        proposals[i] = [box(x0 + dx, y0 + dy, x0 + dx + 8, y0 + dy + 8)]
    prev = 1.0
    for t in (0.1, 0.3, 0.5, 0.7, 0.9):
        r = recall_at(gts, proposals, t)
        assert r <= prev
        prev = r


def test_mabo_is_unweighted_mean():
    assert mabo({"a": 0.2, "b": 0.8}) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        mabo({})


def test_metrics_report_text():
    report = metrics_report({"a": 0.5}, {"a": 1.0}, 3.0)
    assert "abo a 0.500000" in report
    assert "mabo 0.500000" in report
    assert "recall a 1.000000" in report
    assert "mean-proposals-per-image 3.000000" in report


# --- pattern features --------------------------------------------------------

def one_by_one_spec():
    k = ConvKernel(weights=np.eye(2, dtype=np.float32).reshape(2, 2, 1, 1),
                   biases=np.zeros(2, dtype=np.float32))
    return BackboneSpec(layers=(ConvLayer(k),), input_channels=2,
                        input_height=2, input_width=2)


def test_pattern_features_binary_and_margin():
    spec = one_by_one_spec()
    im_hi = np.full((2, 2, 2), 0.9, dtype=np.float32)
    im_lo = np.full((2, 2, 2), 0.1, dtype=np.float32)
    patterns = [VisualPattern(filters=(0, 1), weights=(1.0, 1.0), neuron=0)]
    thresholds = np.array([0.5, 0.5])
    feats = pattern_features([im_hi, im_lo], spec, patterns, thresholds)
    np.testing.assert_array_equal(feats, [[1.0], [0.0]])
    margins = pattern_features([im_hi, im_lo], spec, patterns, thresholds, margin=True)
    assert margins[0, 0] == pytest.approx(1.0)  # pooled == max pooled
    assert margins[1, 0] == 0.0  # below threshold clamps to 0
    with pytest.raises(ValueError):
        pattern_features([im_hi], spec, [], thresholds)


# --- softmax head ------------------------------------------------------------

def three_class_features(n=60, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat(["a", "b", "c"], n // 3)
    X = np.zeros((n, 6))
    for ci, label in enumerate(("a", "b", "c")):
        rows = np.flatnonzero(y == label)
        X[rows, 2 * ci] = 1.0
        X[rows, 2 * ci + 1] = rng.integers(0, 2, size=len(rows))
    return X, y


def test_softmax_separable_and_deterministic():
    X, y = three_class_features()
    clf = SoftmaxHead(seed=1).fit(X, y)
    assert clf.score(X, y) == 1.0
    conf = clf.confusion(X, y)
    np.testing.assert_array_equal(conf, np.diag([20, 20, 20]))
    clf2 = SoftmaxHead(seed=1).fit(X, y)
    np.testing.assert_array_equal(clf.W_, clf2.W_)


def test_softmax_label_permutation_invariance():
    """Renaming labels permutes predictions consistently."""
    X, y = three_class_features()
    swap = {"a": "b", "b": "a", "c": "c"}
    y_swapped = np.array([swap[v] for v in y])
    clf = SoftmaxHead(seed=2).fit(X, y)
    clf_sw = SoftmaxHead(seed=2).fit(X, y_swapped)
    pred = clf.predict(X)
    pred_sw = clf_sw.predict(X)
    assert np.array_equal(np.array([swap[v] for v in pred]), pred_sw)


def test_softmax_single_class_errors():
    X = np.ones((10, 3))
    with pytest.raises(SingleClassError):
        SoftmaxHead().fit(X, np.repeat("a", 10))
