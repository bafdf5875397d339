import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partvos.metrics import (
    MetricReport,
    boundary,
    default_tolerance,
    evaluate_sequence,
    f_frame,
    format_summary,
    j_frame,
    sequence_stats,
)

from oracles import boundary_pixels, f_measure_direct

masks_24 = st.lists(st.booleans(), min_size=576, max_size=576).map(lambda v: np.array(v).reshape(24, 24))


def square(top, left, side=4, shape=(10, 10)):
    m = np.zeros(shape, bool)
    m[top : top + side, left : left + side] = True
    return m


# ----------------------------------------------------------------- J


def test_j_examples():
    gt = square(2, 2)
    assert j_frame(gt, gt) == 1.0
    assert j_frame(np.zeros_like(gt), gt) == 0.0
    a = np.zeros((8, 8), bool)
    a[0:2, :] = True
    b = np.zeros((8, 8), bool)
    b[0:2, 2:] = True
    b[2, 0:4] = True
    assert j_frame(a, b) == 0.6
    with pytest.raises(ValueError):
        j_frame(a, np.zeros((8, 9), bool))


# ----------------------------------------------------------------- F


def test_boundary_matches_oracle():
    rng = np.random.default_rng(0)
    m = rng.random((20, 30)) < 0.6
    expected = np.zeros_like(m)
    for y, x in boundary_pixels(m):
        expected[y, x] = True
    assert np.array_equal(boundary(m), expected)


def test_boundary_includes_image_border():
    m = np.ones((5, 5), bool)
    b = boundary(m)
    assert b[0].all() and b[:, 0].all() and not b[1:4, 1:4].any()


def test_f_identity_and_far():
    gt = square(1, 1, 3, (30, 30))
    assert f_frame(gt, gt, 0) == 1.0
    assert f_frame(square(20, 20, 3, (30, 30)), gt, 2) == 0.0
    assert f_frame(np.zeros_like(gt), np.zeros_like(gt), 2) == 1.0
    assert f_frame(np.zeros_like(gt), gt, 2) == 0.0


def test_f_shifted_square():
    gt = square(2, 2, 6, (14, 14))
    pred = square(2, 3, 6, (14, 14))
    assert f_frame(pred, gt, 2) == 1.0
    assert f_frame(pred, gt, 0) == pytest.approx(f_measure_direct(pred, gt, 0), abs=1e-12)


def test_f_hand_computed():
    # 4x4 squares two columns apart: 8 of 12 ring pixels lie within one pixel of the other ring,
    # 4 of 12 coincide exactly
    gt, pred = square(2, 2), square(2, 4)
    assert f_frame(pred, gt, 1) == pytest.approx(2 / 3, abs=1e-12)
    assert f_frame(pred, gt, 0) == pytest.approx(1 / 3, abs=1e-12)
    assert j_frame(pred, gt) == 8 / 24


@settings(max_examples=60, deadline=None)
@given(masks_24, masks_24, st.integers(0, 4))
def test_f_matches_pairwise_distance_oracle(a, b, tol):
    assert f_frame(a, b, tol) == pytest.approx(f_measure_direct(a, b, tol), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(masks_24, masks_24, st.integers(0, 3))
def test_symmetry_and_tolerance_monotone(a, b, tol):
    assert j_frame(a, b) == j_frame(b, a)
    assert f_frame(a, b, tol) == f_frame(b, a, tol)
    assert f_frame(a, b, tol + 1) >= f_frame(a, b, tol)


def test_default_tolerance():
    assert default_tolerance(480, 854) == 8
    assert default_tolerance(100, 100) == 2


# ------------------------------------------------------------ sequences


def test_constant_sequence():
    s = sequence_stats([0.8] * 20)
    assert (s.mean, s.recall, s.decay) == pytest.approx((0.8, 1.0, 0.0))
    assert s.decay_defined


def test_ramp_decay_closed_form():
    values = [1 - i / 19 for i in range(20)]
    s = sequence_stats(values)
    # quartile of 5: means 1 - 2/19 and 1 - 17/19
    assert s.decay == pytest.approx(15 / 19, abs=1e-12)
    assert s.recall == 10 / 20


def test_low_values_have_zero_recall():
    assert sequence_stats([0.5, 0.2, 0.4, 0.1]).recall == 0.0


def test_short_sequence_flags_decay():
    s = sequence_stats([0.9, 0.1, 0.4])
    assert s.decay == 0.0 and not s.decay_defined
    with pytest.raises(ValueError):
        sequence_stats([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=40))
def test_decay_is_antisymmetric(values):
    forward = sequence_stats(values).decay
    backward = sequence_stats(values[::-1]).decay
    assert forward == pytest.approx(-backward, abs=1e-12)
    assert -1.0 <= forward <= 1.0


# ---------------------------------------------------------- evaluation


def test_evaluate_sequence_multi_object():
    gt = np.zeros((10, 10), np.uint8)
    gt[1:4, 1:4] = 1
    gt[6:9, 6:9] = 2
    pred_good = gt.copy()
    pred_half = gt.copy()
    pred_half[6:9, 6:9] = 0
    preds = [gt, pred_good, pred_half, pred_good]
    gts = [gt, gt, None, gt]
    objs = evaluate_sequence("toy", preds, gts, tolerance=1)
    assert [o.object_id for o in objs] == [1, 2]
    assert objs[0].frames == [1, 3]
    assert objs[1].j == [1.0, 1.0]
    report = MetricReport(objs)
    assert report.j_mean == 1.0 and report.f_mean == 1.0
    assert report.t_mean is None
    assert report.aggregate()["J_mean"] == 1.0


def test_evaluate_sequence_errors():
    with pytest.raises(ValueError):
        evaluate_sequence("x", [np.zeros((2, 2))], [])
    with pytest.raises(ValueError):
        evaluate_sequence("x", [np.zeros((2, 2))], [None])


def test_format_summary_marks_temporal_stability():
    gt = square(2, 2).astype(np.uint8)
    report = MetricReport(evaluate_sequence("toy", [gt, gt], [gt, gt]))
    text = format_summary(report)
    assert "T_mean: not computed" in text
    assert text.splitlines()[0].split()[:3] == ["sequence", "obj", "J_mean"]
    assert "ALL" in text
