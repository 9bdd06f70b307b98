import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emdnerf.errors import InputError
from emdnerf.metrics import align_scale_mean, aligned_error_map, depth_metrics, evaluate_depths, psnr, write_report


def test_depth_metric_examples():
    assert depth_metrics([2.0, 4.0], [2.0, 4.0]) == (0.0, 0.0, 0.0, 0.0)
    abs_rel, sq_rel, rmse, rmse_log = depth_metrics([1.0, 2.0], [2.0, 2.0])
    assert rmse == pytest.approx(0.707107, abs=1e-6)
    assert abs_rel == pytest.approx(0.5) and sq_rel == pytest.approx(0.5)
    assert rmse_log == pytest.approx(0.490129, abs=1e-6)
    assert depth_metrics([1.0], [math.e])[3] == pytest.approx(1.0, abs=1e-15)


def test_depth_metric_errors():
    with pytest.raises(InputError):
        depth_metrics([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(InputError) as info:
        depth_metrics([1.0, 2.0], [0.0, 2.0])
    assert info.value.args[1][0] == pytest.approx(0.5)


def test_psnr_examples():
    a = np.zeros((4, 4, 3))
    assert psnr(a + 0.1, a) == pytest.approx(20.0)
    assert psnr(a, a) == 99.0
    assert psnr(a + 1, a) == pytest.approx(0.0)
    with pytest.raises(InputError):
        psnr(a, np.zeros((4, 4)))


def test_align_examples():
    assert align_scale_mean([2.0, 2.0], [1.0, 1.0]) == 2.0
    assert align_scale_mean([1.5, 3.0], [1.5, 3.0]) == 1.0
    assert align_scale_mean([2.0, 4.0], [1.0, 1.0]) == 3.0
    with pytest.raises(InputError):
        align_scale_mean([1.0], [0.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100))
def test_joint_scaling_identities(seed, s):
    rng = np.random.default_rng(seed)
    gt, pred = rng.uniform(0.5, 5, 30), rng.uniform(0.5, 5, 30)
    a = depth_metrics(gt, pred)
    b = depth_metrics(s * gt, s * pred)
    assert b[0] == pytest.approx(a[0], rel=1e-10)
    assert b[2] == pytest.approx(s * a[2], rel=1e-10)
    assert b[3] == pytest.approx(a[3], rel=1e-9, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_invalid_pixels_ignored_and_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.5, 5, 40)
    gt[rng.random(40) < 0.3] = 0.0
    gt[0] = 1.0
    pred = rng.uniform(0.5, 5, 40)
    base = depth_metrics(gt, pred)
    pred2 = pred.copy()
    pred2[gt == 0] = rng.uniform(0.5, 5, int((gt == 0).sum()))
    assert depth_metrics(gt, pred2) == base
    exact = np.where(gt > 0, gt, pred)
    assert depth_metrics(gt, exact) == (0.0, 0.0, 0.0, 0.0)
    assert all(v > 0 for v in base)


def test_evaluate_depths_means_and_report(tmp_path):
    gts = [np.array([[1.0, 2.0]]), np.array([[2.0, 4.0]])]
    preds = [np.array([[2.0, 2.0]]), np.array([[2.0, 4.0]])]
    rep = evaluate_depths(gts, preds)
    assert rep.abs_rel == pytest.approx(0.25) and rep.rmse == pytest.approx(0.707107 / 2, abs=1e-6)
    assert evaluate_depths(gts, [g * 1.3 for g in gts], align=True).rmse == pytest.approx(0.0, abs=1e-12)
    write_report(rep, tmp_path / "m.csv", tmp_path / "m.json")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "image,abs_rel,sq_rel,rmse,rmse_log"


def test_aligned_error_map():
    gt = np.array([[2.0, 4.0, 0.0]])
    np.testing.assert_allclose(aligned_error_map(gt, gt * 0.5), 0.0, atol=1e-12)
    np.testing.assert_allclose(aligned_error_map(gt, np.array([[1.0, 1.0, 7.0]])), [[1.0, 1.0, 0.0]])
