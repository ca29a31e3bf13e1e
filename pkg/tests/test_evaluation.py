import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coughscreen.config import PipelineConfig
from coughscreen.dataset import load_manifest
from coughscreen.errors import EmptyGroup, EmptyInput, LengthMismatch, SingleClass
from coughscreen.evaluation import (
    ConfusionMatrix,
    ScoredChunk,
    confusion,
    cross_validate,
    evaluate,
    evaluate_levels,
    implied_precision,
    metrics,
    roc_auc,
)
from coughscreen.synth import synth_corpus


def concordance(labels, scores):
    """Mann-Whitney probability over every (positive, negative) pair, ties 1/2."""
    pos = [s for y, s in zip(labels, scores) if y]
    neg = [s for y, s in zip(labels, scores) if not y]
    total = Fraction(0)
    for p in pos:
        for n in neg:
            total += 1 if p > n else Fraction(1, 2) if p == n else 0
    return float(total / (len(pos) * len(neg)))


def naive_counts(labels, preds):
    tp = fp = tn = fn = 0
    for y, p in zip(labels, preds):
        if y and p:
            tp += 1
        elif y:
            fn += 1
        elif p:
            fp += 1
        else:
            tn += 1
    return tp, fp, tn, fn


# --- confusion / metrics ---------------------------------------------------------------------

def test_confusion_examples():
    assert confusion([1, 0], [1, 0]) == ConfusionMatrix(tp=1, fp=0, tn=1, fn=0)
    assert confusion([1, 0], [0, 1]) == ConfusionMatrix(tp=0, fp=1, tn=0, fn=1)
    with pytest.raises(LengthMismatch):
        confusion([1], [1, 0])
    with pytest.raises(EmptyInput):
        confusion([], [])


def test_thousand_random_matrices(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 120))
        y = rng.random(n) < rng.random()
        p = rng.random(n) < rng.random()
        m = confusion(y, p)
        tp, fp, tn, fn = naive_counts(y, p)
        assert (m.tp, m.fp, m.tn, m.fn) == (tp, fp, tn, fn)
        assert confusion(y[::-1], p[::-1]) == m
        r = metrics(m)
        assert r["accuracy"] * n == pytest.approx(tp + tn, abs=1e-9)
        assert r["sensitivity"] == (tp / (tp + fn) if tp + fn else None)
        assert r["specificity"] == (tn / (tn + fp) if tn + fp else None)
        assert r["precision"] == (tp / (tp + fp) if tp + fp else None)
        if tp == 0:
            assert r["f1"] is None
        else:
            assert r["f1"] == pytest.approx(2 * tp / (2 * tp + fp + fn), rel=1e-12)


def test_metric_conventions():
    perfect = metrics(ConfusionMatrix(tp=3, fp=0, tn=4, fn=0))
    assert all(v == 1.0 for v in perfect.values())
    nopred = metrics(ConfusionMatrix(tp=0, fp=0, tn=5, fn=2))
    assert nopred["precision"] is None and nopred["f1"] is None
    assert not any(isinstance(v, float) and math.isnan(v) for v in nopred.values())


def test_implied_precision_reproduces_reported_triple():
    # recall 0.89 and F1 0.87, as reported for the retrained classifier
    p = implied_precision(0.89, 0.87)
    assert abs(p - 0.8509) <= 0.005
    assert 2 * p * 0.89 / (p + 0.89) == pytest.approx(0.87, abs=1e-12)


# --- ROC / AUC ---------------------------------------------------------------------------------

def test_auc_examples():
    assert roc_auc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9])[1] == 1.0
    assert roc_auc([0, 1, 0, 1], [0.3] * 4)[1] == 0.5
    assert roc_auc([1, 1, 0, 0], [0.1, 0.2, 0.8, 0.9])[1] == 0.0
    with pytest.raises(SingleClass):
        roc_auc([1, 1], [0.1, 0.2])


def test_ten_random_pairs(rng):
    for _ in range(50):
        y = rng.random(10) < 0.5
        if y.all() or not y.any():
            continue
        s = rng.random(10)
        assert abs(roc_auc(y, s)[1] - concordance(y, s)) <= 1e-12


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 20)), min_size=2, max_size=200))
def test_auc_equals_concordance(pairs):
    labels = [y for y, _ in pairs]
    if all(labels) or not any(labels):
        return
    # coarse integer scores force many ties
    scores = [s / 20 for _, s in pairs]
    points, auc = roc_auc(labels, scores)
    assert abs(auc - concordance(labels, scores)) <= 1e-12
    f = [p[0] for p in points]
    t = [p[1] for p in points]
    assert f == sorted(f) and t == sorted(t)
    assert points[0][:2] == (0.0, 0.0) and points[-1][:2] == (1.0, 1.0)
    assert all(a[2] > b[2] for a, b in zip(points, points[1:]))


def test_roc_threshold_rule_matches_predictions(rng):
    y = rng.random(60) < 0.4
    s = np.round(rng.random(60), 1)
    for fpr, tpr, th in roc_auc(y, s)[0][1:]:
        m = confusion(y, s >= th)
        assert fpr == m.fp / (m.fp + m.tn) and tpr == m.tp / (m.tp + m.fn)


def test_evaluate_report():
    rep = evaluate([True, False, True, False], [0.9, 0.2, 0.5, 0.6])
    assert rep.matrix == ConfusionMatrix(tp=2, fp=1, tn=1, fn=0)
    assert rep.auc == 0.75 and rep.n_samples == 4
    assert rep.roc_csv().splitlines()[0] == "fpr,tpr,threshold"
    assert rep.roc_csv().splitlines()[1] == "0.0,0.0,inf"
    single = evaluate([True, True], [0.9, 0.1])
    assert single.auc is None and single.accuracy == 0.5


# --- grouped levels ---------------------------------------------------------------------------------

# Two hand-assigned chunk scores per fixture file.
FIXTURE_SCORES = {
    "n01a": (0.1, 0.2), "n01b": (0.3, 0.1), "n02a": (0.6, 0.2), "n02b": (0.7, 0.6),
    "n03a": (0.9, 0.8), "n03b": (0.2, 0.2), "n04a": (0.4, 0.4), "n04b": (0.1, 0.3),
    "n05a": (0.5, 0.1), "n05b": (0.2, 0.0), "n06a": (0.3, 0.3), "n06b": (0.45, 0.5),
    "p07a": (0.9, 0.7), "p07b": (0.8, 0.6), "p08a": (0.4, 0.2), "p08b": (0.3, 0.5),
    "p09a": (0.6, 0.4), "p09b": (0.9, 0.9), "p10a": (0.2, 0.3), "p10b": (0.7, 0.9),
}

# Worked by hand at threshold 0.5 (inclusive), mean aggregation:
#   chunks: positive chunks >= .5 -> 10 of 16; negative chunks >= .5 -> 7 of 24
#   files: positives .8 .7 .3 .4 .5 .9 .25 .8; negatives >= .5 are n02b (.65) and n03a (.85)
#   individuals: ind-02 .525, ind-03 .525 are false positives; ind-08 .35 is a false negative
HAND = {
    "chunk": ConfusionMatrix(tp=10, fp=7, tn=17, fn=6),
    "file": ConfusionMatrix(tp=5, fp=2, tn=10, fn=3),
    "individual": ConfusionMatrix(tp=3, fp=2, tn=4, fn=1),
}


def fixture_chunks(records):
    out = []
    for r in records:
        key = r.audio_path.split("/")[-1][:-4]
        for s in FIXTURE_SCORES[key]:
            out.append(ScoredChunk(r.individual_id, r.audio_path, r.label == "positive", s))
    return out


def test_levels_hand_oracle(fixture_records):
    reps = evaluate_levels(fixture_chunks(fixture_records))
    for level, m in HAND.items():
        assert reps[level].matrix == m, level
        assert reps[level].level == level
    assert reps["individual"].n_samples == 10
    assert reps["individual"].accuracy == 0.7
    assert reps["file"].sensitivity == 5 / 8


def test_levels_small_examples():
    one = evaluate_levels([ScoredChunk("i", "f", True, 0.7)])
    assert one["chunk"].matrix == one["file"].matrix == one["individual"].matrix
    two = evaluate_levels([ScoredChunk("i", "f", True, 0.4), ScoredChunk("i", "f", True, 0.8)])
    assert two["file"].matrix.tp == 1
    assert (two["chunk"].matrix.tp, two["chunk"].matrix.fn) == (1, 1)
    with pytest.raises(EmptyGroup):
        evaluate_levels([])
    with pytest.raises(EmptyGroup):
        evaluate_levels([ScoredChunk("i", "", True, 0.4)])


# --- cross-validation ----------------------------------------------------------------------------------

def test_cross_validate_with_stub(fixture_records):
    seen = []

    def fit(train, val, test):
        ids = [{r.individual_id for r in part} for part in (train, val, test)]
        seen.append(ids)
        assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
        # a perfect scorer except for one fixed mistake per fold
        labels = [r.label == "positive" for r in test]
        scores = [1.0 if y else 0.0 for y in labels]
        scores[0] = 1.0 - scores[0]
        return labels, scores

    cv = cross_validate(fixture_records, k=5, seed=0, fit=fit)
    assert len(cv.fold_reports) == 5 and len(seen) == 5
    covered = set().union(*(s[2] for s in seen))
    assert covered == {r.individual_id for r in fixture_records}
    assert cv.mean_matrix.total == 4.0
    assert cv.mean_matrix_report.accuracy == pytest.approx(0.75)
    again = cross_validate(fixture_records, k=5, seed=0, fit=fit)
    assert again.folds == cv.folds


@pytest.mark.slow
def test_cross_validate_real_pipeline(tmp_path):
    # each fold trains on ~55 individuals; smaller corpora learn too slowly for the bound
    manifest = synth_corpus(tmp_path / "corpus", 240, seed=2)
    records = load_manifest(manifest)
    cfg = PipelineConfig().with_values("train", epochs=40, batch_size=16, learning_rate=2e-3, seed=1)
    cv = cross_validate(records, k=2, pipeline_cfg=cfg, seed=0)
    assert all(r.accuracy >= 0.9 for r in cv.fold_reports)
