import math
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osteoscreen.data import PhantomSpec, generate_phantoms, samples_from_images
from osteoscreen.errors import FoldAbort, InputError
from osteoscreen.harness import (
    FoldReport,
    Hyperparams,
    MetricsReport,
    compute_metrics,
    display_percent,
    evaluate,
    loocv_splits,
    run_fold,
    run_loocv,
    summary_text,
    train_fold,
)
from osteoscreen.network import NORMAL, OSTEOPOROSIS, TINY, Mode, init_params
from osteoscreen.tensor_core import BACKWARD_RULES, make_rng


def phantom_samples(n_per_class=4, delta=1.0, seed=0):
    return samples_from_images(generate_phantoms(PhantomSpec(seed=seed, delta=delta), n_per_class), crop_side=32, side=16)


@pytest.fixture(scope="module")
def eight():
    return phantom_samples(4)


def reports_from(true, pred):
    return [FoldReport(i, f"s{i}", int(t), int(p), (0.5, 0.5), (1.0,) * 4) for i, (t, p) in enumerate(zip(true, pred))]


def counts_for(op_correct, op_total, nop_correct, nop_total):
    true = [OSTEOPOROSIS] * op_total + [NORMAL] * nop_total
    pred = ([OSTEOPOROSIS] * op_correct + [NORMAL] * (op_total - op_correct)
            + [NORMAL] * nop_correct + [OSTEOPOROSIS] * (nop_total - nop_correct))
    return reports_from(true, pred)


# -- splits


@pytest.mark.parametrize("n", range(2, 101))
def test_loocv_partition(n):
    splits = loocv_splits(n)
    assert len(splits) == n
    tests = np.concatenate([te for _, te in splits])
    assert sorted(tests.tolist()) == list(range(n))
    for i, (tr, te) in enumerate(splits):
        assert te.tolist() == [i]
        assert len(tr) == n - 1
        assert not set(tr.tolist()) & set(te.tolist())


def test_loocv_too_small():
    for n in (0, 1):
        with pytest.raises(InputError):
            loocv_splits(n)


# -- metrics


def confusion_oracle(true, pred):
    table = {(a, b): 0 for a in (0, 1) for b in (0, 1)}
    for t, p in zip(true, pred):
        table[(t, p)] += 1
    op_total = table[(0, 0)] + table[(0, 1)]
    nop_total = table[(1, 0)] + table[(1, 1)]
    return table[(0, 0)], op_total, table[(1, 1)], nop_total


def test_metrics_match_confusion_oracle():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        true = rng.integers(0, 2, n)
        pred = rng.integers(0, 2, n)
        m = compute_metrics(reports_from(true, pred))
        opc, opt, nopc, nopt = confusion_oracle(true.tolist(), pred.tolist())
        assert (m.op_correct, m.op_total, m.nop_correct, m.nop_total) == (opc, opt, nopc, nopt)
        opa, nopa, oa = m.exact()
        assert oa * m.total == m.op_correct + m.nop_correct
        assert oa == Fraction(int(np.sum(true == pred)), n)
        if opt:
            assert opa == Fraction(opc, opt)
        else:
            assert opa is None and math.isnan(m.opa)
        if nopt:
            assert nopa == Fraction(nopc, nopt)
        else:
            assert nopa is None and math.isnan(m.nopa)


@pytest.mark.parametrize(
    "counts, expected",
    [
        ((32, 49, 9, 21), ("65.3", "42.9", "58.6")),
        ((39, 49, 4, 21), ("79.6", "19.1", "61.4")),
        # the network rows only fit integer counts with 21 osteoporosis / 49 normal
        ((14, 21, 43, 49), ("66.7", "87.8", "81.4")),
        ((15, 21, 46, 49), ("71.4", "93.9", "87.1")),
    ],
)
def test_table_rows(counts, expected):
    m = compute_metrics(counts_for(*counts))
    assert m.percents() == expected


def test_metrics_all_correct_and_absent_class():
    m = compute_metrics(counts_for(5, 5, 3, 3))
    assert (m.opa, m.nopa, m.oa) == (1.0, 1.0, 1.0)
    m = compute_metrics(counts_for(2, 3, 0, 0))
    assert not m.nopa_defined and math.isnan(m.nopa)
    assert m.oa == pytest.approx(2 / 3)
    assert "undefined" in summary_text_for(m)
    with pytest.raises(InputError):
        compute_metrics([])


def summary_text_for(m):
    from osteoscreen.harness import LoocvResult

    return summary_text(LoocvResult("knn", [], m))


def test_display_percent():
    assert display_percent(Fraction(4, 21)) == "19.1"
    assert display_percent(Fraction(1, 1)) == "100.0"
    assert display_percent(Fraction(0, 3)) == "0.0"
    assert display_percent(None) == "n/a"


def test_swapped_orientation():
    m = MetricsReport(15, 21, 46, 49)
    assert m.swapped() == MetricsReport(46, 49, 15, 21)
    assert m.swapped().oa == m.oa


# -- hyperparams


def test_hyperparams_defaults_and_validation():
    hp = Hyperparams()
    assert (hp.lr_backbone, hp.lr_head, hp.momentum, hp.weight_decay, hp.batch_size, hp.epochs) == (1e-4, 1e-2, 0.9, 1e-4, 32, 100)
    assert hp.class_weights is None
    for bad in ({"lr_head": 0}, {"lr_backbone": -1}, {"batch_size": 0}, {"epochs": -1}, {"class_weights": (1.0,)}):
        with pytest.raises(InputError):
            Hyperparams(**bad)


def test_hyperparams_roundtrip():
    hp = Hyperparams(lr_head=0.05, epochs=7, seed=3, class_weights=(1.0, 2.5), augment=False)
    assert Hyperparams.from_dict(hp.to_dict()) == hp
    assert Hyperparams.from_dict(Hyperparams().to_dict()) == Hyperparams()


# -- training


def test_epochs_zero_returns_init(eight):
    hp = Hyperparams(epochs=0, seed=5)
    result = train_fold(eight, hp, Mode.ATTENTION, TINY, fold=2)
    ref = init_params(TINY, make_rng(5, 2, 0), Mode.ATTENTION)
    assert result.losses == []
    for name, t in ref.items():
        np.testing.assert_array_equal(result.params[name].data, t.data)


def test_step_count(eight):
    hp = Hyperparams(epochs=3, batch_size=3)
    result = train_fold(eight, hp, Mode.NO_ATTENTION, TINY)
    assert len(result.losses) == 3 * math.ceil(8 / 3)
    assert all(math.isfinite(v) for v in result.losses)


def test_overfit_and_evaluate(eight):
    result = train_fold(eight, Hyperparams(epochs=200), Mode.ATTENTION, TINY)
    assert result.train_accuracy == 1.0
    assert result.losses[-1] < result.losses[0]
    reports = evaluate(result.params, eight)
    assert all(r.correct for r in reports)
    assert reports == evaluate(result.params, eight)
    assert evaluate(result.params, []) == []
    for r in reports:
        assert sum(r.probs) == pytest.approx(1.0, abs=1e-6)
        assert sum(r.attention) == pytest.approx(4.0, abs=1e-5)


def test_training_deterministic(eight):
    hp = Hyperparams(epochs=3, seed=11)
    a = train_fold(eight, hp, "attention", TINY, fold=4)
    b = train_fold(eight, hp, "attention", TINY, fold=4)
    assert a.losses == b.losses
    for name, t in a.params.items():
        np.testing.assert_array_equal(t.data, b.params[name].data)


def test_missing_class_warns(eight):
    only_normal = [s for s in eight if s.label == NORMAL]
    with pytest.warns(UserWarning, match="OSTEOPOROSIS"):
        train_fold(only_normal, Hyperparams(epochs=1), "no-attention", TINY)


def test_nan_loss_aborts_fold(eight, monkeypatch):
    real = BACKWARD_RULES["affine"]

    def poisoned(g, node):
        gx, gw, gb = real(g, node)
        return gx, gw * np.nan, gb

    monkeypatch.setitem(BACKWARD_RULES, "affine", poisoned)
    with pytest.raises(FoldAbort) as info:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            train_fold(eight, Hyperparams(epochs=3), "attention", TINY, fold=6)
    assert info.value.fold == 6


# -- LOOCV


def test_fold_order_independence(eight):
    hp = Hyperparams(epochs=2)
    forward_run = run_loocv(eight, hp, "attention", TINY)
    shuffled = run_loocv(eight, hp, "attention", TINY, fold_order=[5, 2, 7, 0, 3, 6, 1, 4])
    assert forward_run.reports == shuffled.reports
    assert forward_run.metrics == shuffled.metrics
    assert [r.fold for r in forward_run.reports] == list(range(8))


def test_single_fold_matches_loocv(eight):
    hp = Hyperparams(epochs=2)
    full = run_loocv(eight, hp, "no-attention", TINY)
    assert run_fold(eight, 3, hp, "no-attention", TINY) == full.reports[3]


@pytest.mark.parametrize("method", ["knn", "ensemble"])
def test_baseline_loocv(method, tmp_path):
    samples = phantom_samples(6)
    hp = Hyperparams(ensemble_size=15)
    result = run_loocv(samples, hp, method, out_dir=tmp_path)
    assert len(result.reports) == 12 and not result.partial
    assert (tmp_path / "folds.csv").read_text().splitlines()[0] == "fold,image_id,true,pred,p_op,p_nop,s1,s2,s3,s4"
    again = run_loocv(samples, hp, method, out_dir=tmp_path / "b")
    assert (tmp_path / "folds.csv").read_bytes() == (tmp_path / "b" / "folds.csv").read_bytes()
    summary = (tmp_path / "summary.txt").read_text()
    assert "OPA (%)" in summary and "swapped" in summary


def test_loocv_unknown_method(eight):
    with pytest.raises(InputError):
        run_loocv(eight, Hyperparams(), "svm")


def test_aborted_folds_reported(eight, monkeypatch, tmp_path):
    import osteoscreen.harness as harness

    real = harness.run_fold

    def flaky(samples, fold, *args):
        if fold == 1:
            raise FoldAbort(fold, "loss is nan")
        return real(samples, fold, *args)

    monkeypatch.setattr(harness, "run_fold", flaky)
    result = run_loocv(eight, Hyperparams(), "knn", out_dir=tmp_path)
    assert result.partial and [e.fold for e in result.failures] == [1]
    assert len(result.reports) == 7 and result.metrics.total == 7
    assert "PARTIAL" in (tmp_path / "summary.txt").read_text()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=40))
def test_metric_identity_property(pairs):
    true, pred = zip(*pairs)
    m = compute_metrics(reports_from(true, pred))
    assert m.oa * m.total == pytest.approx(m.op_correct + m.nop_correct)
    assert m.op_total + m.nop_total == len(pairs)
