"""Fast built-in checks: gradients, warp/flow oracles and metric oracles."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import metrics
from .autodiff import Tensor, functional as F, gradcheck
from .autodiff.tensor import softmax
from .flow import FlowField, FlowParams, estimate_flow, warp_backward
from .geometry import LandmarkSet, get_scheme
from .nets import (DeblurConfig, DeblurNet, DetectorConfig, LandmarkDetector, PredictorConfig, StructurePredictor,
                   warp_structure)

GRAD_TOL = 1e-4
NET_GRAD_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def _worst(errors: dict) -> float:
    return max(errors.values())


def check_conv_gradients(rng):
    x, w, b = _leaf(rng, 2, 3, 6, 6), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4)
    worst = 0.0
    for stride, pad in ((1, 1), (2, 1), (1, 0)):
        worst = max(worst, _worst(gradcheck(lambda: (F.conv2d(x, w, b, stride, pad) ** 2).sum(), [x, w, b])))
    return worst < GRAD_TOL, f"max relative error {worst:.2e}"


def check_norm_gradients(rng):
    x = _leaf(rng, 2, 3, 4, 4)
    g, b = _leaf(rng, 3), _leaf(rng, 3)
    probe = rng.normal(size=(2, 3, 4, 4))
    e1 = _worst(gradcheck(lambda: (F.instance_norm(x, g, b) * Tensor(probe)).sum(), [x, g, b]))
    e2 = _worst(gradcheck(lambda: (F.batch_norm(x, g, b, np.zeros(3), np.ones(3), training=True) * Tensor(probe)).sum(), [x, g, b]))
    worst = max(e1, e2)
    return worst < GRAD_TOL, f"max relative error {worst:.2e}"


def check_warp_gradients(rng):
    src = Tensor(rng.random((1, 2, 6, 6)), requires_grad=True)
    flow = Tensor(rng.uniform(-1.3, 1.3, (1, 2, 6, 6)), requires_grad=True)
    probe = Tensor(rng.normal(size=(1, 2, 6, 6)))
    worst = _worst(gradcheck(lambda: (F.warp(src, flow) * probe).sum(), [src, flow], eps=1e-6))
    return worst < GRAD_TOL, f"max relative error {worst:.2e}"


def check_softmax_gradients(rng):
    z = _leaf(rng, 2, 3, 4)
    probe = Tensor(rng.normal(size=(2, 3, 4)))
    worst = _worst(gradcheck(lambda: (softmax(z, axis=1) * probe).sum(), [z]))
    return worst < GRAD_TOL, f"max relative error {worst:.2e}"


def check_network_gradients(rng):
    """End-to-end gradient of each network with respect to its input at 16x16."""
    worst = 0.0
    pred = StructurePredictor(PredictorConfig(width=4, seed=1))
    pred.head.weight.data[:] = rng.normal(size=pred.head.weight.shape) * 0.05  # leave the zero-flow point
    a, b = Tensor(rng.random((1, 1, 16, 16))), Tensor(rng.random((1, 1, 16, 16)), requires_grad=True)
    probe = Tensor(rng.normal(size=(1, 1, 16, 16)))
    worst = max(worst, _worst(gradcheck(lambda: (warp_structure(a, b, pred(a, b)) * probe).sum(), [b],
                                        max_entries=12, rng=rng)))
    deb = DeblurNet(DeblurConfig(width=4, seed=1))
    deb.dec_conv2.weight.data[:] = rng.normal(size=deb.dec_conv2.weight.shape) * 0.05
    frames = [Tensor(rng.uniform(0.3, 0.7, (1, 1, 16, 16))) for _ in range(3)]
    e = Tensor(rng.random((1, 1, 16, 16)), requires_grad=True)
    worst = max(worst, _worst(gradcheck(lambda: (deb(e, *frames) * probe).sum(), [e], max_entries=12, rng=rng)))
    det = LandmarkDetector(DetectorConfig(width=4, resolution=(16, 16), seed=1)).eval()
    img = Tensor(rng.random((1, 1, 16, 16)), requires_grad=True)
    p2 = Tensor(rng.normal(size=(1, 68, 2)))
    worst = max(worst, _worst(gradcheck(lambda: (det(img) * p2).sum(), [img], max_entries=12, rng=rng)))
    return worst < NET_GRAD_TOL, f"max relative error {worst:.2e}"


def check_identity_warp(rng):
    img = rng.random((3, 9, 11))
    out = warp_backward(img, FlowField.zeros((9, 11)))
    tensor_out = F.warp(Tensor(img[None]), Tensor(np.zeros((1, 2, 9, 11)))).data[0]
    ok = np.array_equal(out, img) and np.array_equal(tensor_out, img)
    return ok, "bit-exact" if ok else "identity warp changed pixels"


def check_integer_shift_warp(rng):
    img = rng.random((12, 12))
    out = warp_backward(img, FlowField.constant((12, 12), 2.0, -1.0))
    # out[y, x] = img[y + 1, x - 2]
    err = np.abs(out[2:-2, 2:-2] - img[3:-1, 0:-4]).max()
    return err < 1e-12, f"interior max error {err:.1e}"


def _blob(shape, cx, cy, s=2.5):
    gy, gx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(float)
    return np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2 * s * s))


def check_flow_oracles(rng):
    img = _blob((32, 32), 15, 16) + 0.5 * _blob((32, 32), 8, 9, 1.8)
    still = estimate_flow(img, img)
    mag = float(np.hypot(still.u, still.v).max())
    moved = _blob((32, 32), 17, 16) + 0.5 * _blob((32, 32), 10, 9, 1.8)
    flow = estimate_flow(img, moved, FlowParams())
    support = img > 0.3
    err = float(np.median(np.hypot(flow.u[support] - 2.0, flow.v[support])))
    ok = mag < 1e-6 and err < 0.3
    return ok, f"zero-motion magnitude {mag:.1e}, translated-blob median error {err:.3f} px"


def check_metric_oracles(rng):
    scheme = get_scheme()
    gt = LandmarkSet(rng.random((68, 2)) * 30, scheme)
    pred = LandmarkSet(gt.points + rng.normal(size=(68, 2)), scheme)
    iod = np.linalg.norm(gt.points[36] - gt.points[45])
    ref = np.mean(np.sqrt(((pred.points - gt.points) ** 2).sum(1))) / iod
    errs = [abs(metrics.nme(pred, gt) - ref)]
    vals = rng.uniform(0, 0.3, 200)
    curve = metrics.ced_curve(vals, 0.2, 1000)
    errs.append(abs(curve.fractions[500] - np.mean(vals <= curve.thresholds[500])))
    errs.append(abs(metrics.failure_rate(vals, 0.1) - 100 * np.mean(vals > 0.1)))
    errs.append(abs(metrics.auc(metrics.ced_curve(np.zeros(5)), 0.08) - 1.0))
    errs.append(abs(metrics.psnr(np.full((4, 4), 0.6), np.full((4, 4), 0.5)) - 20.0))
    a = rng.random((24, 24))
    errs.append(abs(metrics.ssim(a, a) - 1.0))
    worst = max(errs)
    return worst < 1e-9, f"max deviation {worst:.1e}"


CHECKS: dict[str, Callable] = {
    "grad.conv2d": check_conv_gradients,
    "grad.normalization": check_norm_gradients,
    "grad.warp": check_warp_gradients,
    "grad.softmax": check_softmax_gradients,
    "grad.networks": check_network_gradients,
    "warp.identity": check_identity_warp,
    "warp.integer_shift": check_integer_shift_warp,
    "flow.oracles": check_flow_oracles,
    "metrics.oracles": check_metric_oracles,
}


def run_selftest(seed: int = 0, only: list[str] | None = None) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        if only and name not in only:
            continue
        start = time.perf_counter()
        try:
            passed, detail = fn(np.random.default_rng(seed))
        except Exception as exc:  # a crash is reported as a failed, named check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - start))
    return results
