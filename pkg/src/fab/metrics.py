"""Alignment and image-fidelity metrics: NME, CED, AUC, failure rate, PSNR, SSIM."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import LandmarkSet, MarkupScheme, inter_ocular_distance

REPORT_THRESHOLDS = (0.2, 0.1, 0.08)
CED_BINS = 1000
PSNR_CAP = 99.0


@dataclass(frozen=True)
class ErrorRecord:
    nme: float
    sample_id: str = ""

    def __post_init__(self):
        if not np.isfinite(self.nme) or self.nme < 0:
            raise ValueError(f"NME must be finite and non-negative, got {self.nme}")


@dataclass(frozen=True)
class CEDCurve:
    thresholds: np.ndarray
    fractions: np.ndarray

    @property
    def max_threshold(self) -> float:
        return float(self.thresholds[-1])


def nme(pred: LandmarkSet | np.ndarray, gt: LandmarkSet, scheme: MarkupScheme | None = None) -> float:
    """Mean point-to-point distance divided by the ground-truth outer-eye-corner distance."""
    scheme = scheme or gt.scheme
    if isinstance(pred, LandmarkSet):
        if pred.scheme.name != gt.scheme.name:
            raise ValueError(f"scheme mismatch: {pred.scheme.name} vs {gt.scheme.name}")
        pred = pred.points
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != gt.points.shape:
        raise ValueError(f"landmark shape mismatch {pred.shape} vs {gt.points.shape}")
    iod = inter_ocular_distance(gt, scheme)
    return float(np.linalg.norm(pred - gt.points, axis=1).mean() / iod)


def _values(records) -> np.ndarray:
    vals = np.array([r.nme if isinstance(r, ErrorRecord) else float(r) for r in records], dtype=np.float64)
    if vals.size == 0:
        raise ValueError("no error records")
    return vals


def ced_curve(records, max_threshold: float = REPORT_THRESHOLDS[0], n_bins: int = CED_BINS) -> CEDCurve:
    """Fraction of samples with NME <= tau at ``n_bins`` evenly spaced tau in [0, max_threshold]."""
    vals = np.sort(_values(records))
    if max_threshold <= 0 or n_bins < 2:
        raise ValueError("need max_threshold > 0 and n_bins >= 2")
    taus = np.linspace(0.0, max_threshold, n_bins)
    fractions = np.searchsorted(vals, taus, side="right") / vals.size
    return CEDCurve(taus, fractions)


def auc(curve: CEDCurve, threshold: float) -> float:
    """Trapezoidal area under the CED up to ``threshold``, divided by ``threshold``."""
    if not 0 < threshold <= curve.max_threshold * (1 + 1e-12):
        raise ValueError(f"threshold {threshold} outside the curve range (0, {curve.max_threshold}]")
    t, f = curve.thresholds, curve.fractions
    keep = t < threshold
    xs = np.append(t[keep], threshold)
    ys = np.append(f[keep], np.interp(threshold, t, f))
    return float(np.trapezoid(ys, xs) / threshold)


def failure_rate(records, threshold: float) -> float:
    vals = _values(records)
    return float(100.0 * np.count_nonzero(vals > threshold) / vals.size)


def _pair(img, ref) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(img, "grid", img), dtype=np.float64)
    b = np.asarray(getattr(ref, "grid", ref), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(img, ref, cap: float = PSNR_CAP) -> float:
    """Peak signal-to-noise ratio for unit-range images, capped for identical inputs."""
    a, b = _pair(img, ref)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return cap
    return float(min(cap, 10.0 * np.log10(1.0 / mse)))


def ssim(img, ref, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean local SSIM with a Gaussian window truncated to ``window`` taps; borders are excluded."""
    a, b = _pair(img, ref)
    if window % 2 == 0:
        raise ValueError(f"SSIM window must be odd, got {window}")
    if a.ndim == 3:
        return float(np.mean([ssim(x, y, window, sigma, k1, k2, data_range) for x, y in zip(a, b)]))
    truncate = ((window - 1) / 2) / sigma

    def blur(x):
        return ndimage.gaussian_filter(x, sigma, truncate=truncate, mode="reflect")

    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    n = window * window
    cov_norm = n / (n - 1)  # unbiased local (co)variances
    mu_a, mu_b = blur(a), blur(b)
    var_a = cov_norm * (blur(a * a) - mu_a * mu_a)
    var_b = cov_norm * (blur(b * b) - mu_b * mu_b)
    cov = cov_norm * (blur(a * b) - mu_a * mu_b)
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    pad = (window - 1) // 2
    inner = s[pad:-pad, pad:-pad] if min(s.shape) > 2 * pad else s
    return float(inner.mean())


def summarize(records, thresholds=REPORT_THRESHOLDS, n_bins: int = CED_BINS) -> dict[str, float]:
    """Mean NME plus AUC and failure rate at each threshold."""
    vals = _values(records)
    out = {"nme_mean": float(vals.mean()), "count": float(vals.size)}
    curve = ced_curve(vals, max(thresholds), n_bins)
    for t in thresholds:
        out[f"auc@{t:g}"] = auc(curve, t)
        out[f"failure@{t:g}"] = failure_rate(vals, t)
    return out
