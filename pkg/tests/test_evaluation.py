import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from madl.evaluation import (
    ConfusionCounts,
    DimensionMismatchError,
    UnmatchedFrameError,
    confusion_counts,
    curb_metrics,
    evaluate_dataset,
    mask_metrics,
    write_report,
)
from madl.geometry import Label, LabeledCloud
from madl.labels import LabelMask, write_curb_points, write_mask_png

import oracles


def test_identical_masks():
    m = np.random.default_rng(0).random((6, 7)) > 0.5
    c = confusion_counts(m, m)
    assert c.fp == 0 and c.fn == 0 and c.total == 42


def test_hand_tally():
    truth = np.zeros((4, 4), bool)
    truth[:2] = True
    c = confusion_counts(np.ones((4, 4), bool), truth)
    assert (c.tp, c.fp, c.tn, c.fn) == (8, 8, 0, 0)


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        confusion_counts(np.zeros((2, 2)), np.zeros((3, 3)))


def test_metric_formulas():
    r = mask_metrics(ConfusionCounts(3, 1, 5, 1))
    assert r.accuracy == pytest.approx(0.8)
    assert r.precision == pytest.approx(0.75) and r.recall == pytest.approx(0.75)
    assert r.f1 == pytest.approx(0.75) and r.iou == pytest.approx(0.6)
    assert r.degenerate == []


def test_perfect_prediction():
    r = mask_metrics(ConfusionCounts(5, 0, 5, 0))
    assert (r.accuracy, r.precision, r.recall, r.f1, r.iou) == (1.0, 1.0, 1.0, 1.0, 1.0)


def test_degenerate_all_negative():
    r = mask_metrics(ConfusionCounts(0, 0, 10, 0))
    assert r.accuracy == 1.0
    assert (r.precision, r.recall, r.f1, r.iou) == (0.0, 0.0, 0.0, 0.0)
    assert set(r.degenerate) == {"precision", "recall", "f1", "iou"}


def test_zero_population():
    with pytest.raises(ValueError):
        mask_metrics(ConfusionCounts(0, 0, 0, 0))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000))
def test_counts_match_loop(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 20, 2))
    p, t = rng.random(shape) > 0.4, rng.random(shape) > 0.6
    c = confusion_counts(p, t)
    assert (c.tp, c.fp, c.tn, c.fn) == oracles.tally(p, t)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500), st.integers(0, 500))
def test_metrics_exact(tp, fp, tn, fn):
    if tp + fp + tn + fn == 0:
        return
    r = mask_metrics(ConfusionCounts(tp, fp, tn, fn))
    ref = oracles.metrics(Fraction(tp), Fraction(fp), Fraction(tn), Fraction(fn))
    for k, v in ref.items():
        assert getattr(r, k) == pytest.approx(float(v), abs=1e-12)
    assert r.iou <= r.f1 + 1e-12
    assert r.iou <= min(r.precision, r.recall) + 1e-12


# -- curb metrics -------------------------------------------------------------------


def test_curb_tolerance_examples():
    truth = np.array([[10.0, 4.0, -1.6]])
    assert curb_metrics(truth + [0.1, 0, 0], truth, 0.2).precision == 1.0
    assert curb_metrics(truth + [0.3, 0, 0], truth, 0.2).precision == 0.0


def test_curb_identity():
    pts = np.random.default_rng(1).normal(size=(30, 3))
    r = curb_metrics(pts, pts, 0.2)
    assert (r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0)


def test_curb_empty_sets_degenerate():
    r = curb_metrics(np.zeros((0, 3)), np.ones((4, 3)), 0.2)
    assert r.f1 == 0.0 and "precision" in r.degenerate


def test_curb_negative_tolerance():
    with pytest.raises(ValueError):
        curb_metrics(np.zeros((1, 3)), np.zeros((1, 3)), -0.1)


def _curb_oracle(pred, truth, tol):
    def near(p, pts):
        return any(sum((a - b) ** 2 for a, b in zip(p, q)) <= tol * tol for q in pts)

    tp = sum(near(p, truth) for p in pred)
    matched = sum(near(q, pred) for q in truth)
    return tp, matched


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_curb_matches_loop_and_f1_symmetric(seed):
    rng = np.random.default_rng(seed)
    pred = rng.uniform(0, 3, (int(rng.integers(1, 30)), 3))
    truth = rng.uniform(0, 3, (int(rng.integers(1, 30)), 3))
    tol = float(rng.uniform(0.05, 1.0))
    r = curb_metrics(pred, truth, tol)
    tp, matched = _curb_oracle(pred.tolist(), truth.tolist(), tol)
    assert r.precision == pytest.approx(tp / len(pred), abs=1e-12)
    assert r.recall == pytest.approx(matched / len(truth), abs=1e-12)
    assert curb_metrics(truth, pred, tol).f1 == pytest.approx(r.f1, abs=1e-12)


# -- dataset aggregation -------------------------------------------------------------


def _write_masks(d, name, arr):
    d.mkdir(parents=True, exist_ok=True)
    write_mask_png(d / f"{name}.png", LabelMask(np.where(arr, 255, 0).astype(np.uint8)))


def test_single_frame_aggregate(tmp_path):
    rng = np.random.default_rng(2)
    p, t = rng.random((5, 6)) > 0.5, rng.random((5, 6)) > 0.5
    _write_masks(tmp_path / "pred", "000000", p)
    _write_masks(tmp_path / "truth", "000000", t)
    rep = evaluate_dataset(tmp_path / "pred", tmp_path / "truth")
    frame = rep.frames["000000"]
    for k in ("accuracy", "precision", "recall", "f1", "iou"):
        assert getattr(rep.micro, k) == getattr(frame, k)
        assert getattr(rep.macro, k) == pytest.approx(getattr(frame, k))


def test_pooled_counts(tmp_path):
    # Frame a: tp 3, fp 2, fn 0, tn 5; frame b: tp 3, fp 0, fn 2, tn 5.
    a_pred = np.array([[1, 1, 1, 1, 1, 0, 0, 0, 0, 0]], bool)
    a_true = np.array([[1, 1, 1, 0, 0, 0, 0, 0, 0, 0]], bool)
    b_pred = np.array([[1, 1, 1, 0, 0, 0, 0, 0, 0, 0]], bool)
    b_true = np.array([[1, 1, 1, 1, 1, 0, 0, 0, 0, 0]], bool)
    for name, p, t in (("000000", a_pred, a_true), ("000001", b_pred, b_true)):
        _write_masks(tmp_path / "pred", name, p)
        _write_masks(tmp_path / "truth", name, t)
    rep = evaluate_dataset(tmp_path / "pred", tmp_path / "truth")
    assert rep.micro.precision == pytest.approx(0.75)
    assert rep.macro.precision == pytest.approx((0.6 + 1.0) / 2)
    j, t = write_report(rep, tmp_path / "out")
    doc = json.loads(j.read_text())
    assert doc["micro"]["precision"] == pytest.approx(0.75) and "macro" in doc
    assert "micro" in t.read_text()


def test_missing_truth_names_frame(tmp_path):
    _write_masks(tmp_path / "pred", "000000", np.ones((2, 2), bool))
    _write_masks(tmp_path / "pred", "000007", np.ones((2, 2), bool))
    _write_masks(tmp_path / "truth", "000000", np.ones((2, 2), bool))
    with pytest.raises(UnmatchedFrameError, match="000007"):
        evaluate_dataset(tmp_path / "pred", tmp_path / "truth")


def test_curb_mode(tmp_path):
    pts = np.array([[10.0, 4.0, -1.6], [11.0, 4.0, -1.6], [10.0, -4.0, -1.6]])
    labels = np.array([Label.CURB_LEFT, Label.CURB_LEFT, Label.CURB_RIGHT])
    for d, shift in (("pred", 0.1), ("truth", 0.0)):
        (tmp_path / d).mkdir()
        write_curb_points(tmp_path / d / "000000.json", LabeledCloud(pts + [shift, 0, 0], labels=labels))
    rep = evaluate_dataset(tmp_path / "pred", tmp_path / "truth", "curb", 0.2)
    assert rep.micro.f1 == 1.0
    rep = evaluate_dataset(tmp_path / "pred", tmp_path / "truth", "curb", 0.05)
    assert rep.micro.f1 == 0.0
