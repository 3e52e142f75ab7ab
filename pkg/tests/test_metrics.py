import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from denseswin.data import stratified_split
from denseswin.errors import ContractError, DimensionError
from denseswin.evaluation import evaluate, split_data
from denseswin.metrics import (
    ConfusionMatrix,
    binary_curves,
    confusion,
    f1_score,
    mann_whitney_auc,
    metrics_from_cm,
    pca_2d,
    roc_pr_curves,
    sensitivity_ci,
)
from denseswin.train import train

from helpers import (
    PRINTED_PRECISION,
    PRINTED_RECALL,
    PUBLISHED_BY_OUTPUT,
    TABLE_ACCURACY,
    TABLE_COUNTS,
    manifest_from_counts,
    tiny_config,
)
from oracles import pair_count_auc, per_class_counts


def published_cm():
    return ConfusionMatrix(PUBLISHED_BY_OUTPUT.T.copy())


# ---------------------------------------------------------------- confusion


def test_perfect_predictions_are_diagonal():
    labels = [0, 1, 2, 3, 4, 2]
    cm = confusion(labels, labels, 5)
    np.testing.assert_array_equal(cm.counts, np.diag([1, 1, 2, 1, 1]))


def test_single_mistake_is_one_off_diagonal():
    cm = confusion([0, 1, 3], [0, 1, 2], 5)
    assert cm.counts[2, 3] == 1 and cm.counts.sum() == 3 and np.trace(cm.counts) == 2


def test_confusion_contract():
    with pytest.raises(ContractError):
        confusion([0, 5], [0, 1], 5)
    with pytest.raises(ContractError):
        confusion([0, 1], [-1, 1], 5)
    with pytest.raises(DimensionError):
        confusion([0, 1], [0], 5)
    with pytest.raises(ContractError):
        ConfusionMatrix(np.array([[1, -1], [0, 0]]))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(1, 80), st.integers(0, 10_000))
def test_rates_match_per_sample_counting(k, n, seed):
    rng = np.random.default_rng(seed)
    preds, labels = rng.integers(0, k, n), rng.integers(0, k, n)
    cm = confusion(preds, labels, k)
    rep = metrics_from_cm(cm)
    assert cm.total == n
    assert rep.accuracy == int(np.sum(preds == labels)) / n
    for c in range(k):
        tp, fp, fn, tn = per_class_counts(preds, labels, c)
        assert cm.one_vs_rest(c) == (tp, fp, fn, tn)
        assert tp + fp + fn + tn == n
        assert rep.sensitivity[c] == (tp / (tp + fn) if tp + fn else 0.0)
        assert rep.precision[c] == (tp / (tp + fp) if tp + fp else 0.0)
        assert rep.per_class_accuracy[c] == (tp + tn) / n
    assert rep.macro_sensitivity == pytest.approx(np.mean(rep.sensitivity), abs=0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_f1_is_harmonic_mean(p, s):
    f = f1_score(p, s)
    assert min(p, s) - 1e-15 <= f <= max(p, s) + 1e-15
    if p != s and min(p, s) > 0:
        assert f < max(p, s)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.permutations(range(5)))
def test_macro_rates_invariant_under_relabeling(seed, perm):
    rng = np.random.default_rng(seed)
    preds, labels = rng.integers(0, 5, 60), rng.integers(0, 5, 60)
    perm = np.array(perm)
    a = metrics_from_cm(confusion(preds, labels, 5))
    b = metrics_from_cm(confusion(perm[preds], perm[labels], 5))
    assert a.accuracy == b.accuracy
    np.testing.assert_array_equal(np.array(b.sensitivity)[perm], a.sensitivity)
    np.testing.assert_array_equal(np.array(b.precision)[perm], a.precision)
    for name in ("macro_sensitivity", "macro_precision", "macro_f1", "micro_f1"):
        assert getattr(a, name) == pytest.approx(getattr(b, name), rel=1e-15)


def test_symmetric_binary_case_is_half():
    rep = metrics_from_cm(ConfusionMatrix(np.array([[1, 1], [1, 1]])))
    assert rep.accuracy == rep.sensitivity[1] == rep.precision[1] == rep.f1[1] == 0.5
    assert rep.per_class_accuracy[1] == 0.5


def test_zero_denominators_are_flagged():
    rep = metrics_from_cm(ConfusionMatrix(np.array([[3, 0, 0], [1, 0, 0], [0, 0, 0]])))
    assert rep.sensitivity[2] == 0.0 and rep.precision[1] == 0.0
    assert "sensitivity:2" in rep.zero_division and "precision:1" in rep.zero_division
    assert all(0 <= v <= 1 for v in rep.sensitivity + rep.precision + rep.f1)


def test_empty_matrix_is_contract_error():
    with pytest.raises(ContractError):
        metrics_from_cm(ConfusionMatrix(np.zeros((5, 5), int)))


# ---------------------------------------------------------------- published matrix


def test_published_matrix_totals_and_accuracy():
    cm = published_cm()
    assert cm.total == 6236 and int(np.trace(cm.counts)) == 6145
    rep = metrics_from_cm(cm)
    assert rep.accuracy == 6145 / 6236
    assert round(100 * rep.accuracy, 2) == 98.54


def test_published_margins_reproduced():
    rep = metrics_from_cm(published_cm())
    assert rep.precision[0] == 1444 / 1465 and rep.sensitivity[0] == 1444 / 1464
    for c in range(5):
        assert abs(100 * rep.precision[c] - PRINTED_PRECISION[c]) <= 0.05
        assert abs(100 * rep.sensitivity[c] - PRINTED_RECALL[c]) <= 0.05


def test_published_accuracy_gap_to_table():
    gap = 100 * 6145 / 6236 - TABLE_ACCURACY
    assert 0.025 < gap < 0.035


def test_published_targets_equal_twenty_percent_split():
    # the matrix column sums are exactly the per-class sizes of a 0.2 stratified hold-out
    split = stratified_split(manifest_from_counts(TABLE_COUNTS), 0.2, seed=0).split("test")
    per_class = np.bincount([e.label for e in split.entries], minlength=5)
    np.testing.assert_array_equal(published_cm().counts.sum(axis=1), per_class)
    assert len(split) == 6236


def test_f1_from_table_rates():
    assert abs(100 * f1_score(0.9742, 0.9701) - 97.21) <= 0.005


# ---------------------------------------------------------------- confidence interval


def test_ci_examples():
    lo, hi = sensitivity_ci(0.5, 100)
    assert hi - 0.5 == pytest.approx(0.098, abs=1e-12) and 0.5 - lo == pytest.approx(0.098, abs=1e-12)
    lo, hi = sensitivity_ci(0.9761, 5738)
    assert (hi - lo) / 2 == pytest.approx(0.00395, abs=5e-6)
    assert sensitivity_ci(1.0, 10) == (1.0, 1.0)
    assert sensitivity_ci(0.0, 10) == (0.0, 0.0)


def test_ci_is_clamped_and_validated():
    lo, hi = sensitivity_ci(0.99, 1)
    assert hi == 1.0 and lo >= 0.0
    with pytest.raises(ContractError):
        sensitivity_ci(1.1, 10)
    with pytest.raises(ContractError):
        sensitivity_ci(0.5, 0)


# ---------------------------------------------------------------- ROC / PR


def test_four_sample_hand_case():
    roc, pr = binary_curves([0.9, 0.8, 0.4, 0.1], [1, 1, 0, 0])
    assert roc.auc == 1.0 and pr.auc == 1.0
    roc, _ = binary_curves([0.9, 0.8, 0.4, 0.1], [1, 0, 1, 0])
    assert roc.auc == pair_count_auc([0.9, 0.8, 0.4, 0.1], [1, 0, 1, 0]) == 0.75


@pytest.mark.parametrize("case", range(50))
def test_roc_auc_equals_pair_counting(case):
    rng = np.random.default_rng(case)
    n = int(rng.integers(4, 60))
    positive = rng.random(n) < 0.4
    positive[:2] = [True, False]
    # coarse scores so ties are common
    scores = np.round(rng.random(n), int(rng.integers(1, 4)))
    roc, _ = binary_curves(scores, positive)
    assert roc.auc == pair_count_auc(scores.tolist(), positive.tolist())
    assert mann_whitney_auc(scores, positive) == roc.auc


def test_constant_scores_give_chance():
    roc, _ = binary_curves(np.full(10, 0.3), [1, 0] * 5)
    assert abs(roc.auc - 0.5) <= 1e-9


def test_roc_points_monotone_and_anchored():
    rng = np.random.default_rng(3)
    roc, pr = binary_curves(rng.random(40), rng.random(40) < 0.5)
    assert (np.diff(roc.x) >= 0).all() and (np.diff(roc.y) >= 0).all()
    assert (roc.x[0], roc.y[0], roc.x[-1], roc.y[-1]) == (0.0, 0.0, 1.0, 1.0)
    assert (np.diff(pr.x) >= 0).all() and pr.x[-1] == 1.0
    assert 0 <= pr.auc <= 1


def test_pr_auc_is_step_sum():
    # ranks: +, -, +, -  -> recall steps 0.5 at precision 1 and 0.5 at precision 2/3
    _, pr = binary_curves([0.9, 0.8, 0.4, 0.1], [1, 0, 1, 0])
    assert pr.auc == pytest.approx(0.5 * 1 + 0.5 * 2 / 3, abs=1e-15)


def test_multiclass_perfect_and_chance():
    labels = np.repeat(np.arange(5), 4)
    onehot = np.eye(5)[labels]
    res = roc_pr_curves(onehot, labels)
    assert res.roc_auc == 1.0 and res.pr_auc == 1.0 and res.skipped == []
    assert roc_pr_curves(np.full((20, 5), 0.2), labels).roc_auc == 0.5


def test_multiclass_skips_absent_class_and_checks_rows():
    labels = np.array([0, 1, 0, 1, 2, 2])
    scores = np.random.default_rng(4).dirichlet(np.ones(5), 6)
    res = roc_pr_curves(scores, labels)
    assert res.skipped == [3, 4] and set(res.roc) == {0, 1, 2}
    with pytest.raises(ContractError):
        roc_pr_curves(scores * 1.1, labels)
    with pytest.raises(DimensionError):
        roc_pr_curves(scores, labels[:4])


# ---------------------------------------------------------------- PCA


@pytest.mark.parametrize("seed", range(5))
def test_pca_matches_dense_eigensolver(seed):
    x = np.random.default_rng(seed).normal(size=(20, 5)) * [3, 2, 1.5, 1, 0.5]
    p = pca_2d(x)
    xc = x - x.mean(0)
    vals, vecs = np.linalg.eigh(xc.T @ xc / 19)
    np.testing.assert_allclose(p.variances, vals[::-1][:2], rtol=0, atol=1e-6)
    np.testing.assert_allclose(p.coords.var(axis=0, ddof=1), vals[::-1][:2], atol=1e-6)
    for i in range(2):
        assert abs(abs(p.axes[i] @ vecs[:, -1 - i]) - 1) <= 1e-6
    g = p.axes @ p.axes.T
    assert np.abs(g - np.eye(2)).max() <= 1e-8
    assert p.explained[0] >= p.explained[1]


def test_pca_sign_convention_and_translation():
    x = np.random.default_rng(7).normal(size=(30, 4))
    a, b = pca_2d(x), pca_2d(x + [100.0, -5.0, 3.0, 0.25])
    for ax in a.axes:
        assert ax[np.argmax(np.abs(ax))] > 0
    np.testing.assert_allclose(a.coords, b.coords, atol=1e-9)
    np.testing.assert_array_equal(pca_2d(x).coords, a.coords)


def test_pca_rank_one_line():
    t = np.linspace(-2, 3, 12)[:, None]
    direction = np.array([1.0, -2.0, 2.0]) / 3
    p = pca_2d(t * direction + [1.0, 1.0, 1.0])
    assert p.explained[0] == pytest.approx(1.0, abs=1e-12)
    assert abs(abs(p.axes[0] @ direction) - 1) <= 1e-12
    assert abs(p.axes[0] @ p.axes[1]) <= 1e-8


def test_pca_two_points():
    a, b = np.array([0.0, 1.0, 2.0, 3.0]), np.array([2.0, -1.0, 2.0, 4.0])
    p = pca_2d(np.stack([a, b]))
    d = (b - a) / np.linalg.norm(b - a)
    assert abs(abs(p.axes[0] @ d) - 1) <= 1e-12


def test_pca_degenerate_and_shape_errors():
    p = pca_2d(np.ones((5, 3)))
    assert p.degenerate
    assert np.abs(p.axes @ p.axes.T - np.eye(2)).max() == 0
    with pytest.raises(DimensionError):
        pca_2d(np.ones((5, 1)))


# ---------------------------------------------------------------- evaluate


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("evalrun")
    cfg = tiny_config(out, epochs=2)
    res = train(cfg, out)
    return out, res


def test_evaluate_is_internally_consistent(tiny_run, tmp_path):
    out, res = tiny_run
    data = split_data(res.checkpoint, out / "synthetic" / "manifest.tsv", "train")
    ev = evaluate(res.checkpoint, data, tmp_path)
    assert ev.report.accuracy == metrics_from_cm(confusion(ev.probabilities.argmax(1), data.labels, 5)).accuracy
    assert ev.features.shape[0] == len(data.labels) == ev.confusion.total
    np.testing.assert_allclose(ev.probabilities.sum(1), 1, atol=1e-12)
    rows = list(csv.reader((tmp_path / "features.csv").open()))
    assert len(rows) == len(data.labels) + 1
    assert rows[0][:3] == ["sample_id", "label", "f0"] and len(rows[0]) == ev.features.shape[1] + 2
    metric_rows = list(csv.DictReader((tmp_path / "metrics.csv").open()))
    acc = [r for r in metric_rows if r["metric"] == "accuracy" and r["class"] == "all"]
    assert float(acc[0]["value"]) == ev.report.accuracy
    conf = list(csv.reader((tmp_path / "confusion.csv").open()))
    assert len(conf) == 6 and sum(int(v) for r in conf[1:] for v in r[1:]) == len(data.labels)
    for name in ("roc.csv", "pr.csv", "pca.csv"):
        assert (tmp_path / name).read_text().count("\n") > 1
    assert math.isfinite(ev.report.roc_auc)


def test_evaluate_rejects_wrong_image_size(tiny_run):
    out, res = tiny_run
    data = split_data(res.checkpoint, out / "synthetic" / "manifest.tsv", "test")
    data.images = np.zeros((len(data.images), 3, 16, 16), np.float32)
    with pytest.raises(DimensionError):
        evaluate(res.checkpoint, data)
