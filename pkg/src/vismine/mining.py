"""Pattern mining head: threshold binarization of pooled filter responses,
an L1-regularized logistic head trained on frozen binary features, and
extraction of patterns as each neuron's strongest filter combination.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

LOSS_EPS = 1e-7


class SingleClassError(ValueError):
    """Training requires both positive and negative examples."""


class DivergenceError(FloatingPointError):
    """Loss became non-finite during training."""

    def __init__(self, iteration: int):
        super().__init__(f"training loss became non-finite at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class VisualPattern:
    """A small set of filter indices with the source neuron and its weights.

    Filter indices are distinct and sorted ascending; weights align with the
    sorted filter order.
    """

    filters: tuple
    weights: tuple
    neuron: int

    def __post_init__(self):
        if len(set(self.filters)) != len(self.filters):
            raise ValueError("pattern filters must be distinct")
        if tuple(sorted(self.filters)) != tuple(self.filters):
            raise ValueError("pattern filters must be sorted ascending")

    @property
    def weight_sum(self) -> float:
        return float(sum(self.weights))


def fit_thresholds(pooled: np.ndarray, q: float = 0.75) -> np.ndarray:
    """Per-filter activation threshold: the q-th percentile (linear
    interpolation) of each filter's pooled values over the positive set."""
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.ndim != 2 or pooled.shape[0] < 2:
        raise ValueError(f"need pooled values from at least 2 images, got shape {pooled.shape}")
    if not 0.0 < q < 1.0:
        raise ValueError(f"percentile q must lie in (0, 1), got {q}")
    return np.percentile(pooled, q * 100.0, axis=0, method="linear")


def binarize(pooled_values: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Activation status per filter: 1 iff pooled value strictly exceeds its
    threshold.  Works on a single vector or a stack of them."""
    pooled_values = np.asarray(pooled_values)
    thresholds = np.asarray(thresholds)
    if pooled_values.shape[-1] != thresholds.shape[-1]:
        raise ValueError(f"length mismatch: {pooled_values.shape[-1]} values vs {thresholds.shape[-1]} thresholds")
    return (pooled_values > thresholds).astype(np.float64)


def head_forward(W: np.ndarray, x: np.ndarray):
    """Linear response h = W x per neuron and its sigmoid probability."""
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    h = W @ x
    p = 1.0 / (1.0 + np.exp(-h))
    return h, p


def head_loss(p: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy over neurons and batch; probabilities are
    clamped into [eps, 1 - eps] before the logs."""
    p = np.clip(np.asarray(p, dtype=np.float64), LOSS_EPS, 1.0 - LOSS_EPS)
    y = np.asarray(y, dtype=np.float64)
    n_neurons, batch = p.shape
    per_neuron = (1.0 - y) * np.log(1.0 - p) + y * np.log(p)
    return float(-per_neuron.sum() / (n_neurons * batch))


def head_loss_grad(W: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Analytic gradient of head_loss(sigmoid(W X^T), y) with respect to W.

    X is (batch, n_filters), y is (batch,).
    """
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _, p = head_forward(W, X.T)
    n_neurons, batch = p.shape
    return (p - y[None, :]) @ X / (n_neurons * batch)


def train_head(
    X: np.ndarray,
    y: np.ndarray,
    n_neurons: int,
    l1: float = 1e-3,
    lr: float = 0.05,
    batch_size: int = 32,
    max_iter: int = 500,
    plateau_tol: float = 1e-5,
    plateau_window: int = 20,
    seed: int = 0,
):
    """Mini-batch subgradient descent on the cross-entropy loss plus an L1
    penalty, with balanced batches (half positive, half negative).

    Returns (W, loss_history) where loss_history records the data loss per
    iteration.  Deterministic given the seed.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise SingleClassError("training set must contain both positive and negative examples")
    if n_neurons < 1:
        raise ValueError("need at least one neuron")
    rng = np.random.default_rng(seed)
    W = rng.uniform(-0.1, 0.1, size=(n_neurons, X.shape[1]))
    half = batch_size // 2
    history = []
    for it in range(max_iter):
        batch = np.concatenate([rng.choice(pos, half), rng.choice(neg, batch_size - half)])
        Xb, yb = X[batch], y[batch]
        _, p = head_forward(W, Xb.T)
        loss = head_loss(p, yb)
        if not np.isfinite(loss):
            raise DivergenceError(it)
        history.append(loss)
        grad = (p - yb[None, :]) @ Xb / (n_neurons * batch_size) + l1 * np.sign(W)
        W -= lr * grad
        # plateau: smoothed (window-mean) loss improved by less than the
        # tolerance over the last window
        if plateau_window and len(history) >= 2 * plateau_window:
            recent = np.mean(history[-plateau_window:])
            before = np.mean(history[-2 * plateau_window:-plateau_window])
            if before - recent < plateau_tol:
                break
    return W, history


def extract_patterns(W: np.ndarray, k: int = 3):
    """Top-k filters per neuron, ties to the lower index.

    Neurons whose k-th strongest weight is not positive are dropped, and
    neurons sharing the same canonical filter set are deduplicated keeping
    the one with the largest weight sum.
    """
    W = np.asarray(W, dtype=np.float64)
    if not 1 <= k <= W.shape[1]:
        raise ValueError(f"k must lie in [1, {W.shape[1]}], got {k}")
    by_key = {}
    for neuron, row in enumerate(W):
        order = np.argsort(-row, kind="stable")  # stable: ties go to lower index
        top = order[:k]
        if row[top[-1]] <= 0:
            continue
        filters = tuple(int(f) for f in sorted(top))
        pattern = VisualPattern(
            filters=filters,
            weights=tuple(float(row[f]) for f in filters),
            neuron=neuron,
        )
        kept = by_key.get(filters)
        if kept is None or pattern.weight_sum > kept.weight_sum:
            by_key[filters] = pattern
    return sorted(by_key.values(), key=lambda pat: pat.neuron)


def detect(pattern: VisualPattern, x: np.ndarray) -> bool:
    """True iff every filter in the pattern is active in the profile."""
    x = np.asarray(x)
    for f in pattern.filters:
        if not 0 <= f < x.shape[-1]:
            raise IndexError(f"filter index {f} outside profile of length {x.shape[-1]}")
    return bool(all(x[f] == 1 for f in pattern.filters))


class ThresholdBinarizer(TransformerMixin, BaseEstimator):
    """Fit per-filter percentile thresholds on positives, then binarize."""

    def __init__(self, q=0.75):
        self.q = q

    def fit(self, X, y=None):
        X = np.asarray(X)
        if y is not None:
            y = np.asarray(y)
            X = X[y == 1]
        self.thresholds_ = fit_thresholds(X, q=self.q)
        return self

    def transform(self, X):
        return binarize(X, self.thresholds_)


class PatternMiner(BaseEstimator):
    """End-to-end mining head over precomputed binary activation profiles.

    fit(X, y) trains the logistic head; transform(X) returns the per-pattern
    detection matrix.
    """

    def __init__(self, n_neurons=20, k=3, l1=1e-3, lr=0.05, batch_size=32,
                 max_iter=500, seed=0):
        self.n_neurons = n_neurons
        self.k = k
        self.l1 = l1
        self.lr = lr
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.seed = seed

    def fit(self, X, y):
        self.W_, self.loss_history_ = train_head(
            X, y, self.n_neurons, l1=self.l1, lr=self.lr,
            batch_size=self.batch_size, max_iter=self.max_iter, seed=self.seed,
        )
        self.final_loss_ = self.loss_history_[-1]
        self.n_iter_ = len(self.loss_history_)
        self.patterns_ = extract_patterns(self.W_, k=self.k)
        return self

    def transform(self, X):
        X = np.atleast_2d(np.asarray(X))
        out = np.zeros((X.shape[0], len(self.patterns_)), dtype=np.float64)
        for pi, pattern in enumerate(self.patterns_):
            for ri, row in enumerate(X):
                out[ri, pi] = 1.0 if detect(pattern, row) else 0.0
        return out

    def detection_rates(self, X, y):
        """Per-pattern detection frequency on positives and on negatives."""
        X = np.asarray(X)
        y = np.asarray(y)
        det = self.transform(X)
        pos = det[y == 1].mean(axis=0) if np.any(y == 1) else np.zeros(det.shape[1])
        neg = det[y == 0].mean(axis=0) if np.any(y == 0) else np.zeros(det.shape[1])
        return pos, neg
