"""Acceptance criteria, one test per criterion.

Every test records a one-line verdict that the terminal summary prints as
``criterion N: PASS|FAIL ...``. Criteria 5 to 8 share one toy training run.
"""
import time

import numpy as np
import pytest

import reference_metrics as ref
from reference_blur import oracle_blur
from fab import metrics
from fab.autodiff import Tensor, functional as F
from fab.autodiff.gradcheck import max_gradcheck_error
from fab.autodiff.tensor import concat, softmax, tanh
from fab.blur import motion_intensity, synthesize_blur_triplet
from fab.datasets import make_blurred
from fab.experiment import ToyConfig, evaluate_ablation, make_data, train_models
from fab.flow import FlowField, FlowParams, estimate_flow, interpolate_subframes, warp_backward
from fab.geometry import LandmarkSet, get_scheme
from fab.metrics import nme
from fab.pipeline import run_circle
from fab.selftest import check_network_gradients
from fab.synthetic import generate_sequence

VERDICTS: dict[int, str] = {}


def record(number: int, passed: bool, detail: str) -> None:
    VERDICTS[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}"
    assert passed, VERDICTS[number]


@pytest.fixture(scope="session")
def toy():
    cfg = ToyConfig()
    start = time.perf_counter()
    data = make_data(cfg)
    models = train_models(cfg, data)
    seconds = time.perf_counter() - start
    return cfg, data, models, evaluate_ablation(cfg, models, data.test), seconds


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(11)

    def leaf(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    x, y, w, b = leaf(2, 3, 6, 6), leaf(2, 3, 6, 6), leaf(4, 3, 3, 3), leaf(4)
    g, beta = leaf(3), leaf(3)
    v, lw, lb = leaf(5, 3), leaf(2, 3), leaf(2)
    pos = Tensor(rng.uniform(0.5, 2.0, (2, 3, 6, 6)), requires_grad=True)
    probe = Tensor(rng.normal(size=(2, 3, 6, 6)))
    flow = Tensor(rng.uniform(-1.3, 1.3, (2, 2, 6, 6)), requires_grad=True)
    target = Tensor(rng.normal(size=(2, 3, 6, 6)))
    ops = {
        "arith": (lambda: ((x * y - x / pos + (pos ** 1.5)) * probe).sum(), [x, y, pos]),
        "exp_log": (lambda: ((x.exp() + pos.log()) * probe).sum(), [x, pos]),
        "activations": (lambda: (((x + 0.03).relu() + x.sigmoid() + tanh(x) + (x + 0.03).abs()) * probe).sum(), [x]),
        "conv_s1": (lambda: (F.conv2d(x, w, b, 1, 1) ** 2).sum(), [x, w, b]),
        "conv_s2": (lambda: (F.conv2d(x, w, b, 2, 1) ** 2).sum(), [x, w, b]),
        "instance_norm": (lambda: (F.instance_norm(x, g, beta) * probe).sum(), [x, g, beta]),
        "batch_norm": (lambda: (F.batch_norm(x, g, beta, np.zeros(3), np.ones(3), training=True) * probe).sum(),
                       [x, g, beta]),
        "pool_upsample": (lambda: (F.upsample2x(F.avg_pool2d(x)) * probe).sum() + (F.global_avg_pool(x) ** 2).sum(),
                          [x]),
        "linear": (lambda: (F.linear(v, lw, lb) ** 2).sum(), [v, lw, lb]),
        "softmax": (lambda: (softmax(x, axis=1) * probe).sum(), [x]),
        "concat": (lambda: (concat([x, y], axis=1) ** 2).sum(), [x, y]),
        "warp": (lambda: (F.warp(x[:, :2], flow) * probe[:, :2]).sum(), [x, flow]),
        "losses": (lambda: F.mse_loss(x, target) + F.l1_loss(x, target, normalizer=5.0), [x]),
    }
    worst_op = max((max_gradcheck_error(fn, inputs, eps=1e-6), name) for name, (fn, inputs) in ops.items())
    nets_ok, nets_detail = check_network_gradients(np.random.default_rng(0))
    seconds = time.perf_counter() - start
    passed = worst_op[0] < 1e-4 and nets_ok and seconds < 300
    record(1, passed, f"worst per-op relative error {worst_op[0]:.1e} ({worst_op[1]}); networks {nets_detail}; "
                      f"{seconds:.1f} s")


def test_criterion_2_blur_oracle():
    rng = np.random.default_rng(2)
    identical = True
    for speed in (1.0, 2.5, 4.0):
        seq = generate_sequence(rng, ToyConfig().synthetic(3, speed))
        expected, count = oracle_blur(*seq.frames)
        identical &= count == 20 and np.array_equal(synthesize_blur_triplet(*seq.frames).blurred_frame, expected)
    still = generate_sequence(rng, ToyConfig().synthetic(1, 0.0)).frames[0]
    static_err = float(np.abs(synthesize_blur_triplet(still, still, still).blurred_frame - still).max())
    n_default = len(interpolate_subframes(still, still, still))
    passed = identical and static_err < 1e-6 and n_default == 20
    record(2, passed, f"bit-identical to oracle: {identical}; static max error {static_err:.1e}; "
                      f"default subframes {n_default}")


def _blob(cx, cy, s=2.5):
    gy, gx = np.mgrid[0:32, 0:32].astype(float)
    return np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2 * s * s))


def test_criterion_3_flow_and_warp_oracles():
    img = _blob(15, 16) + 0.5 * _blob(8, 9, 1.8)
    still = estimate_flow(img, img)
    zero_mag = float(np.hypot(still.u, still.v).max())
    moved = _blob(17, 16) + 0.5 * _blob(10, 9, 1.8)
    flow = estimate_flow(img, moved, FlowParams())
    support = img > 0.3
    blob_err = float(np.median(np.hypot(flow.u[support] - 2.0, flow.v[support])))
    rng = np.random.default_rng(3)
    pic = rng.random((16, 16))
    shifted = warp_backward(pic, FlowField.constant((16, 16), 2.0, -1.0))
    shift_exact = np.array_equal(shifted[2:-2, 2:-2], pic[3:-1, 0:-4])
    identity_exact = np.array_equal(warp_backward(pic, FlowField.zeros((16, 16))), pic)
    passed = zero_mag < 1e-6 and blob_err < 0.3 and shift_exact and identity_exact
    record(3, passed, f"zero-motion magnitude {zero_mag:.1e}; blob median error {blob_err:.3f} px; "
                      f"integer shift exact {shift_exact}; identity bit-exact {identity_exact}")


def test_criterion_4_metric_oracle():
    rng = np.random.default_rng(4)
    scheme = get_scheme()
    pairs = []
    for _ in range(1000):
        gt = rng.uniform(0, 64, (68, 2))
        pairs.append((gt + rng.normal(size=(68, 2)) * rng.uniform(0, 4), gt))
    ours = [metrics.nme(p, LandmarkSet(g, scheme)) for p, g in pairs]
    theirs = [ref.nme(p.tolist(), g.tolist()) for p, g in pairs]
    dev = max(abs(a - b) for a, b in zip(ours, theirs))
    curve = metrics.ced_curve(ours)
    _, ref_fracs = ref.ced(theirs, 0.2, 1000)
    dev = max(dev, float(np.abs(curve.fractions - ref_fracs).max()))
    for t in (0.2, 0.1, 0.08):
        dev = max(dev, abs(metrics.auc(curve, t) - ref.auc(theirs, t)),
                  abs(metrics.failure_rate(ours, t) - ref.failure_rate(theirs, t)))
    thresholds_ok = metrics.REPORT_THRESHOLDS == (0.2, 0.1, 0.08)
    record(4, dev < 1e-9 and thresholds_ok, f"max deviation {dev:.1e} over 1000 records; "
                                           f"report thresholds {metrics.REPORT_THRESHOLDS}")


@pytest.mark.slow
def test_criterion_5_ablation_ordering(toy):
    _, _, _, result, seconds = toy
    fa, smd, sp = (result.nme[k] for k in ("FA", "FA+SMD", "FA+SMD+SP"))
    gap1, gap2 = (fa - smd) / fa, (smd - sp) / smd
    passed = gap1 >= 0.05 and gap2 >= 0.05 and seconds <= 1800
    record(5, passed, f"NME FA {fa:.4f} > FA+SMD {smd:.4f} ({gap1:+.1%}) > FA+SMD+SP {sp:.4f} ({gap2:+.1%}); "
                      f"data + training {seconds:.0f} s")


@pytest.mark.slow
def test_criterion_6_ground_truth_structure_bound(toy):
    result = toy[3]
    gt, sp = result.nme["FA+SMD+GT"], result.nme["FA+SMD+SP"]
    record(6, gt <= sp, f"NME with ground-truth structure {gt:.4f} vs predicted structure {sp:.4f}")


@pytest.mark.slow
def test_criterion_7_structure_prior_deblurring(toy):
    q = toy[3].psnr
    with_e, without_e, blurry = q["with_structure"], q["without_structure"], q["blurry"]
    passed = with_e >= without_e and min(with_e, without_e) - blurry >= 1.0
    record(7, passed, f"PSNR with structure {with_e:.2f} dB, without {without_e:.2f} dB, blurry input {blurry:.2f} dB")


@pytest.mark.slow
def test_criterion_8_circle_determinism_and_stability(toy):
    cfg, data, models, _, _ = toy
    pipeline = models.pipeline(True)
    seq = data.test[0]
    first = run_circle(seq.blurred, pipeline, sigma=cfg.boundary_sigma)
    second = run_circle(seq.blurred, pipeline, sigma=cfg.boundary_sigma)
    identical = all(a.landmarks.points.tobytes() == b.landmarks.points.tobytes() for a, b in zip(first, second))
    static = generate_sequence(np.random.default_rng(8), cfg.synthetic(20, 0.0))
    blurred = make_blurred(static.frames, static.landmarks, cfg.subframes)
    outs = run_circle(blurred.blurred, pipeline, sigma=cfg.boundary_sigma)
    errs = [nme(o.landmarks, blurred.target_landmarks[o.t]) for o in outs]
    spread = float(np.std(errs))
    record(8, identical and spread < 0.01, f"replay byte-identical {identical}; static-sequence NME std {spread:.2e} "
                                           f"over {len(errs)} frames")


def test_criterion_9_motion_intensity():
    scheme = get_scheme()
    base = np.zeros((68, 2))
    base[36], base[45] = [0.0, 0.0], [100.0, 0.0]
    base[42:48] = [[90, 0], [94, -2], [98, -2], [100, 0], [98, 2], [94, 2]]

    def track(step):
        return [LandmarkSet(base + [step * t, 0.0], scheme) for t in range(30)]

    static = float(motion_intensity(track(0.0))[0])
    moving = float(motion_intensity(track(1.0))[0])
    record(9, static == 0.0 and abs(moving - 0.29) < 1e-12, f"static {static}; 1 px/frame fixture {moving:.12f}")
