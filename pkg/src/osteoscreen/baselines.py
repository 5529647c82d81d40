"""Classical comparison methods: uniform LBP histograms with KNN or bagged stumps.

LBP codes use the 8 pixels of the 3x3 neighbourhood, bit ``k`` set when
neighbour ``k`` is >= the centre, neighbours numbered clockwise from the
top-left::

    0 1 2
    7 c 3
    6 5 4

Codes with at most two circular 0/1 transitions are "uniform"; the 58
uniform codes get bins 0..57 in increasing code order and every other code
shares bin 58.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .network import N_PATCHES, NORMAL, OSTEOPOROSIS

NEIGHBOURS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))
N_BINS = 59


def _transitions(code: int) -> int:
    bits = [(code >> k) & 1 for k in range(8)]
    return sum(bits[k] != bits[(k + 1) % 8] for k in range(8))


UNIFORM_CODES = tuple(c for c in range(256) if _transitions(c) <= 2)
CODE_TO_BIN = np.full(256, N_BINS - 1, dtype=np.int64)
CODE_TO_BIN[list(UNIFORM_CODES)] = np.arange(len(UNIFORM_CODES))


def lbp_codes(patch: np.ndarray) -> np.ndarray:
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 2 or min(patch.shape) < 3:
        raise InputError(f"LBP needs a 2-D patch of side >= 3, got {patch.shape}")
    h, w = patch.shape
    center = patch[1:h - 1, 1:w - 1]
    codes = np.zeros(center.shape, dtype=np.int64)
    for bit, (dy, dx) in enumerate(NEIGHBOURS):
        codes |= (patch[1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx] >= center).astype(np.int64) << bit
    return codes


def lbp_histogram(patch: np.ndarray) -> np.ndarray:
    """59-bin uniform-LBP histogram normalised by the number of interior pixels."""
    codes = lbp_codes(patch)
    hist = np.bincount(CODE_TO_BIN[codes].ravel(), minlength=N_BINS).astype(np.float64)
    return hist / codes.size


def lbp_features(patches: np.ndarray) -> np.ndarray:
    """Concatenated histograms of the eight patches of one sample (length 472)."""
    if len(patches) != N_PATCHES:
        raise InputError(f"expected {N_PATCHES} patches, got {len(patches)}")
    return np.concatenate([lbp_histogram(p) for p in patches])


# ---------------------------------------------------------------- KNN


@dataclass
class KnnModel:
    features: np.ndarray
    labels: np.ndarray
    k: int = 5

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) == 0:
            raise InputError("KNN model has no training points")
        if self.k < 1 or self.k % 2 == 0:
            raise InputError(f"k must be a positive odd integer, got {self.k}")
        if self.k > len(self.features):
            raise InputError(f"k={self.k} exceeds the {len(self.features)} training points")


def knn_predict(model: KnnModel, query: np.ndarray) -> int:
    """Majority label among the ``k`` nearest points; equal distances favour lower training index."""
    d = np.sum((model.features - np.asarray(query, dtype=np.float64)) ** 2, axis=1)
    nearest = np.argsort(d, kind="stable")[: model.k]
    votes = np.bincount(model.labels[nearest], minlength=2)
    return OSTEOPOROSIS if votes[OSTEOPOROSIS] > votes[NORMAL] else NORMAL


# ---------------------------------------------------------------- bagged stumps


@dataclass(frozen=True)
class Stump:
    """Polarity +1: ``x[feature] > threshold`` is OSTEOPOROSIS, else NORMAL. Polarity -1 flips it."""

    feature: int
    threshold: float
    polarity: int

    def predict(self, x: np.ndarray) -> int:
        above = x[self.feature] > self.threshold
        return OSTEOPOROSIS if above == (self.polarity == 1) else NORMAL


@dataclass
class EnsembleModel:
    stumps: list[Stump]

    def __post_init__(self):
        if not self.stumps:
            raise InputError("ensemble needs at least one stump")


def fit_stump(features: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> Stump:
    """Exhaustive search over (feature, threshold, polarity) minimising weighted error.

    Candidate thresholds are the values of samples with positive weight. Ties
    go to the lowest feature index, then the lowest threshold, then polarity +1.
    When no split strictly beats the majority-class constant (one class in
    the resample, or constant features) the constant is returned instead,
    encoded with an infinite threshold; a tied majority is NORMAL.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    w = np.asarray(weights, dtype=np.float64)
    used = np.flatnonzero(w > 0)
    T = X[used]
    above = X[:, None, :] > T[None, :, :]
    w_op = np.where(y == OSTEOPOROSIS, w, 0.0)
    w_no = np.where(y == NORMAL, w, 0.0)
    op_above = np.tensordot(w_op, above, axes=1)
    no_above = np.tensordot(w_no, above, axes=1)
    # polarity +1 errs on normals above and osteoporotics at or below
    err = np.stack([no_above + (w_op.sum() - op_above), op_above + (w_no.sum() - no_above)])  # [pol, t, j]
    best_err = err.min()
    op_total, no_total = w_op.sum(), w_no.sum()
    majority = OSTEOPOROSIS if op_total > no_total else NORMAL
    if best_err >= min(op_total, no_total):
        return Stump(0, float("inf"), 1 if majority == NORMAL else -1)
    # integer weights make errors exact, so equality picks every minimiser
    pol_i, t_i, j_i = np.nonzero(err == best_err)
    cand = sorted(zip(j_i, T[t_i, j_i], pol_i))
    j, thr, p = cand[0]
    return Stump(int(j), float(thr), 1 if p == 0 else -1)


def ensemble_fit(features: np.ndarray, labels: np.ndarray, n_stumps: int = 100, rng: np.random.Generator | None = None) -> EnsembleModel:
    """Bag ``n_stumps`` stumps, each fit on a bootstrap resample drawn with ``rng.integers(0, n, n)``."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if n_stumps < 1:
        raise InputError(f"need at least one stump, got {n_stumps}")
    if len(X) == 0:
        raise InputError("ensemble_fit needs training data")
    rng = rng if rng is not None else np.random.default_rng(0)
    n = len(X)
    stumps = []
    for _ in range(n_stumps):
        idx = rng.integers(0, n, size=n)
        weights = np.bincount(idx, minlength=n).astype(np.float64)
        stumps.append(fit_stump(X, y, weights))
    return EnsembleModel(stumps)


def ensemble_predict(model: EnsembleModel, query: np.ndarray) -> int:
    """Majority vote; a tied vote is NORMAL."""
    query = np.asarray(query, dtype=np.float64)
    votes = sum(1 for s in model.stumps if s.predict(query) == OSTEOPOROSIS)
    return OSTEOPOROSIS if 2 * votes > len(model.stumps) else NORMAL
