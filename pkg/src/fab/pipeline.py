"""Virtuous-circle inference, the three pretraining stages and alternate fine-tuning."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad
from .autodiff.tensor import default_dtype
from .autodiff.nn import Module
from .autodiff.optim import make_optimizer
from .geometry import AugmentRanges, LandmarkSet, MarkupScheme, augment, get_scheme, render_boundary_map
from .nets import (DeblurNet, LandmarkDetector, StructurePredictor, alignment_loss, reconstruction_loss,
                   save_model, structure_loss, warp_structure)

log = logging.getLogger(__name__)

STAGES = ("pretrain_predictor", "pretrain_deblur", "pretrain_detector", "finetune")
BOUNDARY_SIGMA = 1.5


class TrainingAborted(RuntimeError):
    """Raised when a loss turns non-finite; the model is restored to its last good state first."""


@dataclass
class TrainConfig:
    stage: str = "pretrain_detector"
    epochs: int = 1
    steps_per_epoch: int = 100
    batch_size: int = 16
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    augment: AugmentRanges | None = None
    seed: int = 0
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)  # structure, reconstruction, alignment
    checkpoint_dir: str | None = None
    precision: str = "float64"  # arithmetic used while training; models return to float64 afterwards

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.stage not in STAGES:
            raise ValueError(f"unknown training stage {self.stage!r}; expected one of {STAGES}")
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, steps_per_epoch and batch_size must all be >= 1")


@dataclass
class FabModels:
    predictor: StructurePredictor
    deblurrer: DeblurNet
    detector: LandmarkDetector

    def eval(self) -> "FabModels":
        for m in (self.predictor, self.deblurrer, self.detector):
            m.eval()
        return self


@dataclass
class CircleState:
    e_prev2: np.ndarray
    e_prev1: np.ndarray
    i_prev2: np.ndarray
    i_prev1: np.ndarray
    t: int

    def __post_init__(self):
        shapes = {np.shape(a) for a in (self.e_prev2, self.e_prev1, self.i_prev2, self.i_prev1)}
        if len(shapes) != 1:
            raise ValueError(f"circle state members disagree in resolution: {sorted(shapes)}")

    def advanced(self, e_t: np.ndarray, i_t: np.ndarray) -> "CircleState":
        return CircleState(self.e_prev1, e_t, self.i_prev1, i_t, self.t + 1)


@dataclass
class CircleOutput:
    """Per-frame products for frame ``t``: deblurred frame, landmarks and the boundary map fed forward."""

    t: int
    deblurred: np.ndarray
    landmarks: LandmarkSet
    boundary: np.ndarray
    predicted_boundary: np.ndarray
    reset: bool = False


# -- helpers -------------------------------------------------------------------------

def render(landmarks: LandmarkSet, resolution, sigma: float = BOUNDARY_SIGMA) -> np.ndarray:
    return render_boundary_map(landmarks, resolution=resolution, sigma=sigma).grid


def _batch(arrays) -> Tensor:
    return Tensor(np.stack([np.asarray(a, dtype=np.float64) for a in arrays])[:, None])


def _detect_batch(detector: LandmarkDetector, frames) -> np.ndarray:
    """(B, H, W) frames -> (B, P, 2) pixel coordinates, without recording a graph."""
    with no_grad():
        return detector.to_pixels(detector(_batch(frames)).data)


def _diverged(points: np.ndarray, resolution) -> bool:
    h, w = resolution
    x, y = points[:, 0], points[:, 1]
    return bool(np.any(~np.isfinite(points)) or np.any((x < -w) | (x > 2 * w) | (y < -h) | (y > 2 * h)))


def bootstrap(frame0, frame1, detector: LandmarkDetector, scheme: MarkupScheme | None = None,
              sigma: float = BOUNDARY_SIGMA) -> CircleState:
    """Start the loop from raw-frame detections on the first two frames."""
    scheme = scheme or get_scheme()
    frame0, frame1 = np.asarray(frame0, dtype=np.float64), np.asarray(frame1, dtype=np.float64)
    pts = _detect_batch(detector, [frame0, frame1])
    edges = [render(LandmarkSet(p, scheme), frame0.shape, sigma) for p in pts]
    return CircleState(edges[0], edges[1], frame0, frame1, 2)


# -- inference -------------------------------------------------------------------------

def circle_step(state: CircleState, frame, models: FabModels, scheme: MarkupScheme,
                structure: np.ndarray | None = None, use_deblur: bool = True,
                sigma: float = BOUNDARY_SIGMA) -> tuple[CircleOutput, CircleState]:
    """One loop iteration on frame ``state.t``; ``structure`` overrides the predicted boundary map."""
    frame = np.asarray(frame, dtype=np.float64)
    res = frame.shape
    with no_grad():
        if structure is not None:
            e_t = np.asarray(structure, dtype=np.float64)
        else:
            a, b = _batch([state.e_prev2]), _batch([state.e_prev1])
            e_t = warp_structure(a, b, models.predictor(a, b)).data[0, 0]
        if use_deblur:
            s_t = models.deblurrer(_batch([e_t]), _batch([state.i_prev2]), _batch([state.i_prev1]),
                                   _batch([frame])).data[0, 0]
        else:
            s_t = frame
        pts = models.detector.to_pixels(models.detector(_batch([s_t])).data)[0]
    reset = _diverged(pts, res)
    if reset:
        log.warning("frame %d: detector diverged, re-bootstrapping from raw frames", state.t)
        fresh = bootstrap(state.i_prev1, frame, models.detector, scheme, sigma)
        pts = _detect_batch(models.detector, [frame])[0]
        nxt = CircleState(fresh.e_prev1, render(LandmarkSet(pts, scheme), res, sigma), state.i_prev1, frame,
                          state.t + 1)
    else:
        nxt = state.advanced(render(LandmarkSet(pts, scheme), res, sigma), frame)
    out = CircleOutput(state.t, s_t, LandmarkSet(pts, scheme), nxt.e_prev1, e_t, reset)
    return out, nxt


def run_circle(frames, models: FabModels, scheme: MarkupScheme | None = None, init: str | CircleState = "bootstrap",
               gt_structure=None, use_deblur: bool = True, sigma: float = BOUNDARY_SIGMA) -> list[CircleOutput]:
    """Process a sequence; returns outputs for frames 2..N-1.

    ``init`` is ``"bootstrap"`` (raw detections on frames 0 and 1) or a prepared
    CircleState.  ``gt_structure`` (one map per frame) replaces the predictor.
    """
    scheme = scheme or get_scheme()
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    if len(frames) < 3:
        raise ValueError(f"the circle needs at least 3 frames, got {len(frames)}")
    models.eval()
    state = bootstrap(frames[0], frames[1], models.detector, scheme, sigma) if init == "bootstrap" else init
    if not isinstance(state, CircleState):
        raise ValueError(f"unknown init policy {init!r}")
    outputs = []
    for t in range(2, len(frames)):
        structure = gt_structure[t] if gt_structure is not None else None
        out, state = circle_step(state, frames[t], models, scheme, structure, use_deblur, sigma)
        outputs.append(out)
    return outputs


def detect_sequence(frames, detector: LandmarkDetector, scheme: MarkupScheme | None = None) -> list[LandmarkSet]:
    """Raw-frame detection (the detector-only baseline)."""
    scheme = scheme or get_scheme()
    detector.eval()
    return [LandmarkSet(p, scheme) for p in _detect_batch(detector, frames)]


# -- training ----------------------------------------------------------------------

def _save_last_good(model: Module, config: TrainConfig, name: str) -> None:
    if config.checkpoint_dir:
        path = Path(config.checkpoint_dir) / f"{name}_last_good.npz"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_model(path, model)


def _fit(models: list[Module], params, loss_fn, n_samples: int, config: TrainConfig, name: str,
         rng: np.random.Generator) -> list[float]:
    """Generic minibatch loop; returns the mean loss per epoch."""
    dtype = np.dtype(config.precision)
    for m in models:
        m.astype(dtype)
    try:
        with default_dtype(dtype):
            return _fit_epochs(models, params, loss_fn, n_samples, config, name, rng)
    finally:
        for m in models:
            m.astype(np.float64)
            m.eval()


def _fit_epochs(models, params, loss_fn, n_samples, config, name, rng) -> list[float]:
    opt = make_optimizer(params, config.optimizer, config.lr, config.momentum, config.weight_decay)
    history = []
    snapshot = [m.state_dict() for m in models]
    for m in models:
        m.train()
    for epoch in range(config.epochs):
        losses = []
        for _ in range(config.steps_per_epoch):
            idx = rng.choice(n_samples, size=min(config.batch_size, n_samples), replace=False)
            opt.zero_grad()
            loss = loss_fn(idx, rng)
            value = float(loss.data)
            if not np.isfinite(value):
                for m, state in zip(models, snapshot):
                    m.load_state_dict(state)
                    _save_last_good(m, config, f"{name}_{type(m).__name__.lower()}")
                raise TrainingAborted(f"{name}: non-finite loss at epoch {epoch + 1}; restored last good state")
            loss.backward()
            opt.step()
            losses.append(value)
        history.append(float(np.mean(losses)))
        snapshot = [m.state_dict() for m in models]
        log.info("%s epoch %d/%d loss %.6g", name, epoch + 1, config.epochs, history[-1])
    return history


@dataclass
class StructureTriplets:
    """Boundary-map training triplets (E_{t-2}, E_{t-1}, E_t), each (N, H, W)."""

    e_prev2: np.ndarray
    e_prev1: np.ndarray
    e_target: np.ndarray

    def __len__(self) -> int:
        return len(self.e_target)


@dataclass
class DeblurSamples:
    """Ground-truth structure, three blurry frames and the sharp target, each (N, H, W)."""

    structure: np.ndarray
    i_prev2: np.ndarray
    i_prev1: np.ndarray
    i_t: np.ndarray
    sharp: np.ndarray
    points: np.ndarray | None = None  # (N, P, 2) target landmarks, needed only for jittered structure

    def __len__(self) -> int:
        return len(self.sharp)


@dataclass(frozen=True)
class StructureJitter:
    """Perturbation of the landmarks behind the structure channel during deblur pretraining.

    Each sample is shifted as a whole by N(0, shift^2) pixels and every point
    moves by a further N(0, point^2); ``prob`` is the chance a sample is jittered.
    """

    shift: float = 0.7
    point: float = 0.4
    prob: float = 0.75
    sigma: float = BOUNDARY_SIGMA


@dataclass
class LandmarkSamples:
    frames: np.ndarray  # (N, H, W)
    points: np.ndarray  # (N, P, 2) pixels
    scheme: MarkupScheme = field(default_factory=get_scheme)

    def __len__(self) -> int:
        return len(self.frames)


def _t(a: np.ndarray) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64)[:, None])


def pretrain_predictor(model: StructurePredictor, data: StructureTriplets, config: TrainConfig) -> list[float]:
    rng = np.random.default_rng(config.seed)

    def loss_fn(idx, _rng):
        a, b = _t(data.e_prev2[idx]), _t(data.e_prev1[idx])
        return structure_loss(warp_structure(a, b, model(a, b)), _t(data.e_target[idx]))

    return _fit([model], model.parameters(), loss_fn, len(data), config, "predictor", rng)


def _jittered_structure(data: DeblurSamples, idx, jitter: StructureJitter, rng, scheme) -> np.ndarray:
    maps = data.structure[idx].copy()
    res = maps.shape[-2:]
    for row, i in enumerate(idx):
        if rng.random() < jitter.prob:
            pts = data.points[i] + rng.normal(0, jitter.shift, 2) + rng.normal(0, jitter.point, data.points[i].shape)
            maps[row] = render(LandmarkSet(pts, scheme), res, jitter.sigma)
    return maps


def pretrain_deblur(model: DeblurNet, data: DeblurSamples, config: TrainConfig,
                    jitter: StructureJitter | None = None) -> list[float]:
    """Reconstruction-loss training on ground-truth structure, optionally jittered toward test-time quality."""
    rng = np.random.default_rng(config.seed)
    if jitter is not None and data.points is None:
        raise ValueError("structure jitter needs the target landmarks in DeblurSamples.points")
    scheme = get_scheme()

    def loss_fn(idx, r):
        structure = data.structure[idx] if jitter is None else _jittered_structure(data, idx, jitter, r, scheme)
        out = model(_t(structure), _t(data.i_prev2[idx]), _t(data.i_prev1[idx]), _t(data.i_t[idx]))
        return reconstruction_loss(out, _t(data.sharp[idx]))

    return _fit([model], model.parameters(), loss_fn, len(data), config, "deblur", rng)


def _augmented(data: LandmarkSamples, idx, ranges: AugmentRanges | None, rng) -> tuple[np.ndarray, np.ndarray]:
    frames, points = data.frames[idx], data.points[idx]
    if ranges is None:
        return frames, points
    out_f, out_p = [], []
    for f, p in zip(frames, points):
        g, lm = augment(f, LandmarkSet(p, data.scheme), ranges.sample(rng))
        out_f.append(g)
        out_p.append(lm.points)
    return np.stack(out_f), np.stack(out_p)


def pretrain_detector(model: LandmarkDetector, data: LandmarkSamples, config: TrainConfig) -> list[float]:
    """L1 regression of normalised coordinates; augmentation is drawn per sample from ``config.augment``."""
    rng = np.random.default_rng(config.seed)
    h, w = model.config.resolution
    scale = np.array([w, h], dtype=np.float64)

    def loss_fn(idx, r):
        frames, points = _augmented(data, idx, config.augment, r)
        return alignment_loss(model(_t(frames)), Tensor(points / scale))

    return _fit([model], model.parameters(), loss_fn, len(data), config, "detector", rng)


@dataclass
class FinetuneSamples:
    """Everything the joint loss needs per training frame."""

    e_prev2: np.ndarray
    e_prev1: np.ndarray
    e_target: np.ndarray
    i_prev2: np.ndarray
    i_prev1: np.ndarray
    i_t: np.ndarray
    sharp: np.ndarray
    points: np.ndarray

    def __len__(self) -> int:
        return len(self.sharp)


def joint_loss(models: FabModels, data: FinetuneSamples, idx, weights=(1.0, 1.0, 1.0)):
    """L_str + L_rec + L_align on one minibatch; returns (total, parts)."""
    p, d, k = models.predictor, models.deblurrer, models.detector
    a, b = _t(data.e_prev2[idx]), _t(data.e_prev1[idx])
    e_t = warp_structure(a, b, p(a, b))
    l_str = structure_loss(e_t, _t(data.e_target[idx]))
    s_t = d(e_t, _t(data.i_prev2[idx]), _t(data.i_prev1[idx]), _t(data.i_t[idx]))
    l_rec = reconstruction_loss(s_t, _t(data.sharp[idx]))
    h, w = k.config.resolution
    l_align = alignment_loss(k(s_t), Tensor(data.points[idx] / np.array([w, h], dtype=np.float64)))
    ws, wr, wa = weights
    total = l_str * ws + l_rec * wr + l_align * wa
    return total, {"structure": float(l_str.data), "reconstruction": float(l_rec.data),
                   "alignment": float(l_align.data)}


def alternate_finetune(models: FabModels, data: FinetuneSamples, config: TrainConfig) -> list[dict]:
    """Odd epochs update detector + deblurrer, even epochs predictor + deblurrer, on the joint loss.

    The total loss and its parts are evaluated on the whole set after every
    epoch and returned as one record per epoch.
    """
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(1, config.epochs + 1):
        turn = models.detector if epoch % 2 == 1 else models.predictor
        params = turn.parameters() + models.deblurrer.parameters()
        one = TrainConfig(**{**config.__dict__, "epochs": 1, "stage": "finetune"})

        def loss_fn(idx, _rng):
            for m in (models.predictor, models.deblurrer, models.detector):
                m.eval()
            turn.train()
            models.deblurrer.train()
            return joint_loss(models, data, idx, config.loss_weights)[0]

        _fit([models.predictor, models.deblurrer, models.detector], params, loss_fn, len(data), one,
             f"finetune[{'detector' if epoch % 2 else 'predictor'}]", rng)
        models.eval()
        with no_grad():
            total, parts = joint_loss(models, data, np.arange(len(data)), config.loss_weights)
        if not np.isfinite(float(total.data)):
            raise TrainingAborted(f"non-finite total loss after fine-tuning epoch {epoch}")
        history.append({"epoch": epoch, "total": float(total.data), **parts})
    return history

