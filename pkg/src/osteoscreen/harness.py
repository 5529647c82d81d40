"""Training loop, leave-one-out cross-validation, metrics and reports."""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import baselines
from .data.dataset import Sample
from .data.rois import augment
from .errors import FoldAbort, InputError, NumericError
from .network import (
    LABEL_NAMES,
    N_GROUPS,
    NORMAL,
    OSTEOPOROSIS,
    BackboneConfig,
    Mode,
    ModelParams,
    forward,
    forward_logits,
    init_params,
)
from .tensor_core import SgdState, Tape, make_rng, ops, sgd_step

METHODS = ("attention", "no-attention", "knn", "ensemble")

# independent RNG streams under one (seed, fold) key
_INIT_STREAM, _EPOCH_STREAM, _BASELINE_STREAM = 0, 1, 2


@dataclass
class Hyperparams:
    lr_backbone: float = 0.0001
    lr_head: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0001
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    class_weights: tuple[float, float] | None = None
    augment: bool = True
    knn_k: int = 5
    ensemble_size: int = 100

    def __post_init__(self):
        if not (self.lr_backbone > 0 and self.lr_head > 0):
            raise InputError("learning rates must be positive")
        if self.batch_size < 1:
            raise InputError(f"batch_size must be >= 1, got {self.batch_size}")
        # 0 is allowed: it returns the initialised parameters untouched
        if self.epochs < 0:
            raise InputError(f"epochs must be >= 0, got {self.epochs}")
        if self.seed < 0:
            raise InputError(f"seed must be non-negative, got {self.seed}")
        if self.class_weights is not None:
            self.class_weights = tuple(float(w) for w in self.class_weights)
            if len(self.class_weights) != 2 or min(self.class_weights) <= 0:
                raise InputError("class_weights needs two positive values")

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = "none" if v is None else ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "Hyperparams":
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            raw = str(d[f.name]).strip()
            if f.name == "class_weights":
                kw[f.name] = None if raw.lower() in ("", "none", "off") else tuple(float(x) for x in raw.split(","))
            elif f.name == "augment":
                kw[f.name] = raw.lower() in ("1", "true", "yes", "on")
            elif f.type in ("int", int):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = float(raw)
        return cls(**kw)


@dataclass(frozen=True)
class FoldReport:
    fold: int
    image_id: str
    true: int
    pred: int
    probs: tuple[float, float]  # (osteoporosis, normal)
    attention: tuple[float, ...]  # length 4; all ones without an attention head

    @property
    def correct(self) -> bool:
        return self.true == self.pred


@dataclass
class TrainResult:
    params: ModelParams
    losses: list[float]  # one entry per SGD step
    train_accuracy: float


# ---------------------------------------------------------------- splits


def loocv_splits(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Fold ``i`` tests ``[i]`` and trains on every other index."""
    if n < 2:
        raise InputError(f"leave-one-out needs at least 2 samples, got {n}")
    idx = np.arange(n)
    return [(np.delete(idx, i), np.array([i])) for i in range(n)]


# ---------------------------------------------------------------- training


def _stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.patches for s in samples])
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


def _augmented(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            out[i, j] = augment(x[i, j], rng)
    return out


def _default_config(samples: Sequence[Sample]) -> BackboneConfig:
    return BackboneConfig(input_side=samples[0].patches.shape[-1])


def train_fold(
    samples: Sequence[Sample],
    hp: Hyperparams,
    mode: Mode | str = Mode.ATTENTION,
    config: BackboneConfig | None = None,
    fold: int = 0,
) -> TrainResult:
    """Train a fresh model on ``samples``; randomness is keyed on ``(hp.seed, fold)``.

    Each epoch reshuffles and re-augments with its own stream, then takes
    ``ceil(n / batch_size)`` steps. Backbone weights use ``lr_backbone``;
    group transforms, attention and classifier use ``lr_head``.
    """
    if not samples:
        raise InputError("train_fold needs at least one sample")
    mode = Mode(mode)
    config = config or _default_config(samples)
    x_all, y_all = _stack(samples)
    missing = [LABEL_NAMES[c] for c in (OSTEOPOROSIS, NORMAL) if not np.any(y_all == c)]
    if missing:
        warnings.warn(f"fold {fold}: training set has no {', '.join(missing)} samples", stacklevel=2)

    params = init_params(config, make_rng(hp.seed, fold, _INIT_STREAM), mode)
    bb_state = SgdState(hp.lr_backbone, hp.momentum, hp.weight_decay)
    head_state = SgdState(hp.lr_head, hp.momentum, hp.weight_decay)
    n = len(samples)
    losses: list[float] = []
    for epoch in range(hp.epochs):
        rng = make_rng(hp.seed, fold, _EPOCH_STREAM, epoch)
        order = rng.permutation(n)
        for start in range(0, n, hp.batch_size):
            idx = order[start:start + hp.batch_size]
            xb = _augmented(x_all[idx], rng) if hp.augment else x_all[idx]
            try:
                with Tape() as tape:
                    logits, _ = forward_logits(xb, params, mode)
                    loss = ops.cross_entropy(logits, y_all[idx], hp.class_weights)
                tape.backward(loss)
            except NumericError as exc:
                raise FoldAbort(fold, f"epoch {epoch}: non-finite value during training ({exc})") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise FoldAbort(fold, f"epoch {epoch}: loss is {value}")
            losses.append(value)
            sgd_step(params.backbone(), bb_state)
            sgd_step(params.head(), head_state)

    pred = forward(x_all, params, mode)
    return TrainResult(params, losses, float(np.mean(pred.labels == y_all)))


def evaluate(params: ModelParams, samples: Sequence[Sample], mode: Mode | str | None = None, folds: Sequence[int] | None = None) -> list[FoldReport]:
    """Predict without augmentation. ``folds`` labels each report (defaults to 0..n-1)."""
    if not samples:
        return []
    folds = list(range(len(samples))) if folds is None else list(folds)
    x, _ = _stack(samples)
    pred = forward(x, params, mode)
    return [
        FoldReport(
            fold=f,
            image_id=s.image_id,
            true=s.label,
            pred=int(pred.labels[i]),
            probs=(float(pred.probs[i, OSTEOPOROSIS]), float(pred.probs[i, NORMAL])),
            attention=tuple(float(v) for v in pred.attention[i]),
        )
        for i, (f, s) in enumerate(zip(folds, samples))
    ]


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class MetricsReport:
    op_correct: int
    op_total: int
    nop_correct: int
    nop_total: int

    @property
    def total(self) -> int:
        return self.op_total + self.nop_total

    @property
    def opa_defined(self) -> bool:
        return self.op_total > 0

    @property
    def nopa_defined(self) -> bool:
        return self.nop_total > 0

    def exact(self) -> tuple[Fraction | None, Fraction | None, Fraction]:
        opa = Fraction(self.op_correct, self.op_total) if self.op_total else None
        nopa = Fraction(self.nop_correct, self.nop_total) if self.nop_total else None
        return opa, nopa, Fraction(self.op_correct + self.nop_correct, self.total)

    @property
    def opa(self) -> float:
        return float(self.exact()[0]) if self.opa_defined else math.nan

    @property
    def nopa(self) -> float:
        return float(self.exact()[1]) if self.nopa_defined else math.nan

    @property
    def oa(self) -> float:
        return float(self.exact()[2])

    def swapped(self) -> "MetricsReport":
        """The same counts with the class roles exchanged."""
        return MetricsReport(self.nop_correct, self.nop_total, self.op_correct, self.op_total)

    def percents(self) -> tuple[str, str, str]:
        return tuple(display_percent(v) for v in self.exact())


def compute_metrics(reports: Sequence[FoldReport]) -> MetricsReport:
    if not reports:
        raise InputError("compute_metrics needs at least one report")
    op = [r for r in reports if r.true == OSTEOPOROSIS]
    nop = [r for r in reports if r.true == NORMAL]
    return MetricsReport(sum(r.correct for r in op), len(op), sum(r.correct for r in nop), len(nop))


def display_percent(value: Fraction | None) -> str:
    """Percent with one decimal, rounding half-up first to 4 then to 3 decimals of the ratio.

    The two-step rule is what makes 4/21 read 19.1 rather than 19.0.
    """
    if value is None:
        return "n/a"
    exact = Decimal(value.numerator) / Decimal(value.denominator)
    ratio = exact.quantize(Decimal("0.0001"), ROUND_HALF_UP).quantize(Decimal("0.001"), ROUND_HALF_UP)
    return f"{ratio * 100:.1f}"


# ---------------------------------------------------------------- LOOCV


@dataclass
class LoocvResult:
    method: str
    reports: list[FoldReport]
    metrics: MetricsReport | None
    failures: list[FoldAbort] = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.failures)


def _baseline_fold(method: str, features: np.ndarray, labels: np.ndarray, fold: int, hp: Hyperparams) -> tuple[int, float]:
    """Prediction and osteoporosis vote share for held-out index ``fold``."""
    train = np.delete(np.arange(len(labels)), fold)
    q = features[fold]
    if method == "knn":
        model = baselines.KnnModel(features[train], labels[train], k=hp.knn_k)
        d = np.sum((model.features - q) ** 2, axis=1)
        nearest = np.argsort(d, kind="stable")[: model.k]
        share = float(np.mean(model.labels[nearest] == OSTEOPOROSIS))
        return baselines.knn_predict(model, q), share
    model = baselines.ensemble_fit(features[train], labels[train], hp.ensemble_size, make_rng(hp.seed, fold, _BASELINE_STREAM))
    share = float(np.mean([s.predict(q) == OSTEOPOROSIS for s in model.stumps]))
    return baselines.ensemble_predict(model, q), share


def run_fold(
    samples: Sequence[Sample],
    fold: int,
    hp: Hyperparams,
    method: str,
    config: BackboneConfig | None = None,
    features: np.ndarray | None = None,
    checkpoint_dir=None,
) -> FoldReport:
    """Run one leave-one-out fold from scratch. Raises FoldAbort on divergence."""
    held = samples[fold]
    if method in ("knn", "ensemble"):
        if features is None:
            features = np.stack([baselines.lbp_features(s.patches) for s in samples])
        labels = np.array([s.label for s in samples])
        pred, share = _baseline_fold(method, features, labels, fold, hp)
        return FoldReport(fold, held.image_id, held.label, pred, (share, 1.0 - share), (1.0,) * N_GROUPS)
    train = [s for i, s in enumerate(samples) if i != fold]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = train_fold(train, hp, method, config, fold)
    if checkpoint_dir is not None:
        result.params.save(Path(checkpoint_dir) / f"fold{fold:03d}.tsck")
    return evaluate(result.params, [held], method, folds=[fold])[0]


def _fold_task(args) -> FoldReport | FoldAbort:
    try:
        return run_fold(*args)
    except FoldAbort as exc:
        return exc


def run_loocv(
    samples: Sequence[Sample],
    hp: Hyperparams,
    method: str = "attention",
    config: BackboneConfig | None = None,
    jobs: int = 1,
    out_dir=None,
    fold_order: Sequence[int] | None = None,
    checkpoint_dir=None,
) -> LoocvResult:
    """Leave-one-out over ``samples`` with ``method`` in ``METHODS``.

    Folds are independent, so ``fold_order`` and ``jobs`` never change a
    report. Network methods optionally save each fold's final parameters
    to ``checkpoint_dir/foldNNN.tsck``. Aborted folds are listed in ``failures`` and excluded from the
    metrics; the result is then marked partial.
    """
    if method not in METHODS:
        raise InputError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    n = len(samples)
    splits = loocv_splits(n)
    order = list(range(len(splits))) if fold_order is None else list(fold_order)
    if sorted(order) != list(range(n)):
        raise InputError("fold_order must be a permutation of the fold indices")
    features = None
    if method in ("knn", "ensemble"):
        features = np.stack([baselines.lbp_features(s.patches) for s in samples])
    if checkpoint_dir is not None and method not in ("knn", "ensemble"):
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    else:
        checkpoint_dir = None
    tasks = [(samples, i, hp, method, config, features, checkpoint_dir) for i in order]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_fold_task, tasks))
    else:
        outcomes = [_fold_task(t) for t in tasks]

    reports = sorted((o for o in outcomes if isinstance(o, FoldReport)), key=lambda r: r.fold)
    failures = sorted((o for o in outcomes if isinstance(o, FoldAbort)), key=lambda e: e.fold)
    result = LoocvResult(method, reports, compute_metrics(reports) if reports else None, failures)
    if out_dir is not None:
        write_reports(out_dir, result)
    return result


# ---------------------------------------------------------------- output files

CSV_HEADER = ["fold", "image_id", "true", "pred", "p_op", "p_nop"] + [f"s{g + 1}" for g in range(N_GROUPS)]


def folds_csv_rows(reports: Sequence[FoldReport]) -> list[list[str]]:
    rows = []
    for r in reports:
        rows.append([str(r.fold), r.image_id, LABEL_NAMES[r.true], LABEL_NAMES[r.pred]]
                    + [f"{p:.6f}" for p in r.probs] + [f"{s:.6f}" for s in r.attention])
    return rows


def write_folds_csv(path, reports: Sequence[FoldReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        writer.writerows(folds_csv_rows(reports))


def summary_text(result: LoocvResult) -> str:
    lines = [f"method: {result.method}", ""]
    lines.append(f"{'Method':<14}{'OPA (%)':>10}{'NOPA (%)':>10}{'OA (%)':>10}")
    if result.metrics is None:
        lines.append(f"{result.method:<14}{'n/a':>10}{'n/a':>10}{'n/a':>10}")
    else:
        m = result.metrics
        opa, nopa, oa = m.percents()
        lines.append(f"{result.method:<14}{opa:>10}{nopa:>10}{oa:>10}")
        lines.append("")
        lines.append(f"counts: osteoporosis {m.op_correct}/{m.op_total}, normal {m.nop_correct}/{m.nop_total}, "
                     f"overall {m.op_correct + m.nop_correct}/{m.total}")
        s_opa, s_nopa, _ = m.swapped().percents()
        lines.append(f"* with the class roles swapped: OPA {s_opa}, NOPA {s_nopa} (OA unchanged)")
        if not (m.opa_defined and m.nopa_defined):
            lines.append("* a class is absent from the held-out predictions; its accuracy is undefined")
    if result.failures:
        lines.append("")
        lines.append(f"PARTIAL: {len(result.failures)} fold(s) aborted; metrics cover the completed folds only")
        lines += [f"  {exc}" for exc in result.failures]
    return "\n".join(lines) + "\n"


def write_reports(out_dir, result: LoocvResult) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_folds_csv(out / "folds.csv", result.reports)
    (out / "summary.txt").write_text(summary_text(result), encoding="utf-8")
