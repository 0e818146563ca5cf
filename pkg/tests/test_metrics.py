import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

import reference_metrics as ref
from fab import metrics
from fab.geometry import LandmarkSet, get_scheme

SCHEME = get_scheme()


@pytest.fixture(scope="module")
def records():
    """1000 synthetic prediction/ground-truth pairs with a spread of error levels."""
    rng = np.random.default_rng(42)
    out = []
    for i in range(1000):
        gt = rng.uniform(0, 64, (68, 2))
        pred = gt + rng.normal(size=(68, 2)) * rng.uniform(0.0, 4.0)
        out.append((pred, gt))
    return out


def test_nme_matches_reference(records):
    worst = max(abs(metrics.nme(p, LandmarkSet(g, SCHEME)) - ref.nme(p.tolist(), g.tolist())) for p, g in records)
    assert worst < 1e-9


def test_ced_auc_failure_match_reference(records):
    errs = [ref.nme(p.tolist(), g.tolist()) for p, g in records]
    curve = metrics.ced_curve(errs)
    taus, fracs = ref.ced(errs, 0.2, 1000)
    assert np.abs(curve.thresholds - taus).max() < 1e-9
    assert np.abs(curve.fractions - fracs).max() < 1e-9
    for t in metrics.REPORT_THRESHOLDS:
        assert abs(metrics.auc(curve, t) - ref.auc(errs, t)) < 1e-9
        assert abs(metrics.failure_rate(errs, t) - ref.failure_rate(errs, t)) < 1e-9


def test_report_thresholds_and_summary_keys(records):
    assert metrics.REPORT_THRESHOLDS == (0.2, 0.1, 0.08)
    errs = [metrics.ErrorRecord(ref.nme(p.tolist(), g.tolist()), str(i)) for i, (p, g) in enumerate(records)]
    summary = metrics.summarize(errs)
    for t in ("0.2", "0.1", "0.08"):
        assert f"auc@{t}" in summary and f"failure@{t}" in summary
    assert summary["count"] == 1000


def test_nme_rejects_scheme_mismatch_and_bad_records():
    with pytest.raises(ValueError):
        metrics.nme(np.zeros((5, 2)), LandmarkSet(np.random.default_rng(0).random((68, 2)), SCHEME))
    with pytest.raises(ValueError):
        metrics.ErrorRecord(float("nan"))
    with pytest.raises(ValueError):
        metrics.ErrorRecord(-0.1)
    with pytest.raises(ValueError):
        metrics.ced_curve([])


def test_auc_bounds():
    assert metrics.auc(metrics.ced_curve(np.zeros(7)), 0.08) == pytest.approx(1.0)
    assert metrics.auc(metrics.ced_curve(np.full(7, 5.0)), 0.2) == 0.0
    with pytest.raises(ValueError, match="outside"):
        metrics.auc(metrics.ced_curve(np.zeros(3)), 0.3)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 0.5), min_size=1, max_size=60))
def test_ced_is_monotone_and_auc_in_unit_range(errs):
    curve = metrics.ced_curve(errs)
    assert np.all(np.diff(curve.fractions) >= 0)
    for t in metrics.REPORT_THRESHOLDS:
        assert 0.0 <= metrics.auc(curve, t) <= 1.0 + 1e-12
        assert 0.0 <= metrics.failure_rate(errs, t) <= 100.0


def test_psnr_known_value_and_cap():
    assert metrics.psnr(np.full((4, 4), 0.6), np.full((4, 4), 0.5)) == pytest.approx(20.0)
    assert metrics.psnr(np.ones((3, 3)), np.ones((3, 3))) == metrics.PSNR_CAP
    with pytest.raises(ValueError):
        metrics.psnr(np.ones((3, 3)), np.ones((3, 4)))


def test_ssim_matches_scikit_image():
    rng = np.random.default_rng(5)
    a = rng.random((32, 32))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    expected = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, data_range=1.0,
                                     use_sample_covariance=True)
    assert metrics.ssim(a, b) == pytest.approx(expected, abs=1e-9)
    assert metrics.ssim(a, a) == pytest.approx(1.0)
