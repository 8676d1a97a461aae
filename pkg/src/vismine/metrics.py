"""Quantitative evaluation: overlap metrics for proposed boxes against
ground truth, pattern-detection feature vectors, and a softmax head that
uses those features for classification.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .backbone import forward
from .localize import BBox
from .mining import SingleClassError, binarize, detect


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two pixel boxes."""
    ix = max(0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


def abo(gts, proposals) -> float:
    """Average best overlap for one class.

    gts is a list of (image_id, BBox); proposals maps image_id to a list of
    BBoxes.  A ground-truth box whose image has no proposals contributes 0.
    """
    gts = list(gts)
    if not gts:
        raise ValueError("ABO needs at least one ground-truth box")
    total = 0.0
    for image_id, g in gts:
        cand = proposals.get(image_id, [])
        total += max((iou(g, l) for l in cand), default=0.0)
    return total / len(gts)


def mabo(class_abos) -> float:
    """Unweighted mean of per-class ABO values."""
    values = list(class_abos.values()) if isinstance(class_abos, dict) else list(class_abos)
    if not values:
        raise ValueError("MABO needs at least one class")
    return float(np.mean(values))


def recall_at(gts, proposals, iou_thresh: float = 0.5) -> float:
    """Fraction of ground-truth boxes matched by a same-image proposal at or
    above the IoU threshold."""
    gts = list(gts)
    if not gts:
        raise ValueError("recall needs at least one ground-truth box")
    hits = 0
    for image_id, g in gts:
        cand = proposals.get(image_id, [])
        if any(iou(g, l) >= iou_thresh for l in cand):
            hits += 1
    return hits / len(gts)


def pattern_features(images, spec, patterns, thresholds, margin: bool = False) -> np.ndarray:
    """One feature vector per image, one entry per pattern.

    Binary mode: 1 iff the pattern is detected.  Margin mode: the minimum
    over the pattern's filters of (pooled - threshold) / (max pooled -
    threshold), clamped to [0, 1].
    """
    if not patterns:
        raise ValueError("need at least one pattern")
    feats = np.zeros((len(images), len(patterns)), dtype=np.float64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    for ii, image in enumerate(images):
        trace = forward(spec, image)
        pooled = trace.pooled_values.astype(np.float64)
        profile = binarize(pooled, thresholds)
        for pi, pattern in enumerate(patterns):
            if margin:
                vals = []
                for f in pattern.filters:
                    denom = pooled.max() - thresholds[f]
                    vals.append((pooled[f] - thresholds[f]) / denom if denom > 0 else 0.0)
                feats[ii, pi] = float(np.clip(min(vals), 0.0, 1.0))
            else:
                feats[ii, pi] = 1.0 if detect(pattern, profile) else 0.0
    return feats


class SoftmaxHead(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression on pattern features, trained with the
    same seeded mini-batch gradient descent settings as the mining head."""

    def __init__(self, lr=0.05, batch_size=32, max_iter=500, seed=0):
        self.lr = lr
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        n_classes = len(self.classes_)
        if n_classes < 2:
            raise SingleClassError("softmax head needs at least 2 classes")
        yi = np.searchsorted(self.classes_, y)
        by_class = [np.flatnonzero(yi == c) for c in range(n_classes)]
        rng = np.random.default_rng(self.seed)
        n_feat = X.shape[1]
        W = rng.uniform(-0.1, 0.1, size=(n_classes, n_feat))
        b = np.zeros(n_classes)
        per = max(1, self.batch_size // n_classes)
        for _ in range(self.max_iter):
            batch = np.concatenate([rng.choice(idx, per) for idx in by_class])
            Xb, yb = X[batch], yi[batch]
            logits = Xb @ W.T + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(len(yb)), yb] -= 1.0
            W -= self.lr * (p.T @ Xb) / len(yb)
            b -= self.lr * p.mean(axis=0)
        self.W_, self.b_ = W, b
        return self

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        return self.classes_[np.argmax(X @ self.W_.T + self.b_, axis=1)]

    def score(self, X, y):
        return float(np.mean(self.predict(X) == np.asarray(y)))

    def confusion(self, X, y):
        pred = self.predict(X)
        y = np.asarray(y)
        n = len(self.classes_)
        mat = np.zeros((n, n), dtype=int)
        for t, p in zip(np.searchsorted(self.classes_, y), np.searchsorted(self.classes_, pred)):
            mat[t, p] += 1
        return mat


def metrics_report(class_abos, recalls, mean_proposals) -> str:
    """Plain-text report: per-class ABO, MABO, recall, proposals per image."""
    lines = []
    for name in sorted(class_abos):
        lines.append(f"abo {name} {class_abos[name]:.6f}")
    lines.append(f"mabo {mabo(class_abos):.6f}")
    for name in sorted(recalls):
        lines.append(f"recall {name} {recalls[name]:.6f}")
    lines.append(f"mean-recall {float(np.mean(list(recalls.values()))):.6f}")
    lines.append(f"mean-proposals-per-image {mean_proposals:.6f}")
    return "\n".join(lines) + "\n"
