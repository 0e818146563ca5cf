"""End-to-end toy experiment on synthetic glyph video: data, pretraining and the component ablation."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .datasets import BlurredSequence, deblur_samples, landmark_samples, make_blurred, structure_triplets
from .flow import FlowParams
from .geometry import AugmentRanges, get_scheme
from .metrics import nme, psnr, ssim
from .nets import (DeblurConfig, DeblurNet, DetectorConfig, LandmarkDetector, PredictorConfig, StructurePredictor,
                   predict_structure)
from .pipeline import (DeblurSamples, FabModels, StructureJitter, TrainConfig, detect_sequence, pretrain_deblur,
                       pretrain_detector, pretrain_predictor, render, run_circle)
from .synthetic import SyntheticConfig, generate_sequence, generate_stills

log = logging.getLogger(__name__)

VARIANTS = ("FA", "FA+SMD", "FA+SMD+SP", "FA+SMD+GT")


@dataclass
class ToyConfig:
    resolution: int = 32
    seed: int = 0
    speed_range: tuple[float, float] = (1.5, 2.5)
    amplitude: float = 6.0
    face_scale: tuple[float, float] = (0.25, 0.29)
    boundary_sigma: float = 1.5
    n_stills: int = 800
    n_structure_sequences: int = 150
    n_blur_sequences: int = 30
    n_test_sequences: int = 8
    train_frames: int = 12
    test_frames: int = 16
    subframes: int = 20
    width: int = 8
    detector_steps: int = 1200
    predictor_steps: int = 900
    deblur_steps: int = 900
    batch_size: int = 16
    precision: str = "float32"
    augment: AugmentRanges | None = None  # detector augmentation; None covers the motion range
    jitter: StructureJitter | None = None
    loop_structure: bool = True  # also train the structure-aware deblurrer on loop-predicted maps

    def __post_init__(self):
        if self.augment is None:
            self.augment = AugmentRanges(self.amplitude + 1.0, 8.0, 0.5, (0.93, 1.07))

    def synthetic(self, n_frames: int, speed: float) -> SyntheticConfig:
        return SyntheticConfig(resolution=(self.resolution, self.resolution), n_frames=n_frames, speed=speed,
                               amplitude=self.amplitude, face_scale=self.face_scale)


@dataclass
class ToyData:
    stills: tuple[list, list]
    structure_sequences: list  # landmark lists
    train: list[BlurredSequence]
    test: list[BlurredSequence]


@dataclass
class ToyModels:
    detector: LandmarkDetector
    predictor: StructurePredictor
    deblur_with_structure: DeblurNet
    deblur_without_structure: DeblurNet
    histories: dict[str, list[float]] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)

    def pipeline(self, use_structure: bool = True) -> FabModels:
        deblurrer = self.deblur_with_structure if use_structure else self.deblur_without_structure
        return FabModels(self.predictor, deblurrer, self.detector)


@dataclass
class AblationResult:
    nme: dict[str, float]
    per_frame_nme: dict[str, np.ndarray]
    psnr: dict[str, float]
    ssim: dict[str, float]
    sharp_nme: float


def make_data(cfg: ToyConfig) -> ToyData:
    rng = np.random.default_rng(cfg.seed)
    still_cfg = cfg.synthetic(1, 0.0)
    stills = generate_stills(rng, cfg.n_stills, still_cfg)
    structure = [generate_sequence(rng, cfg.synthetic(cfg.train_frames, float(rng.uniform(*cfg.speed_range)))).landmarks
                 for _ in range(cfg.n_structure_sequences)]
    params = FlowParams()

    def blurred(n, n_frames):
        out = []
        for _ in range(n):
            seq = generate_sequence(rng, cfg.synthetic(n_frames, float(rng.uniform(*cfg.speed_range))))
            out.append(make_blurred(seq.frames, seq.landmarks, cfg.subframes, params))
        return out

    train = blurred(cfg.n_blur_sequences, cfg.train_frames)
    test = blurred(cfg.n_test_sequences, cfg.test_frames)
    structure += [s.landmarks for s in train]
    return ToyData(stills, structure, train, test)


def train_models(cfg: ToyConfig, data: ToyData) -> ToyModels:
    res = (cfg.resolution, cfg.resolution)
    seconds, histories = {}, {}

    def stage(name, steps, lr, **extra):
        epochs = 6
        return TrainConfig(stage=name, epochs=epochs, steps_per_epoch=max(1, steps // epochs), lr=lr,
                           batch_size=cfg.batch_size, seed=cfg.seed, precision=cfg.precision, **extra)

    start = time.perf_counter()
    marks = landmark_samples(*data.stills)
    detector = LandmarkDetector(DetectorConfig(width=cfg.width, resolution=res, seed=cfg.seed),
                                mean_shape=(marks.points / np.array(res[::-1])).mean(0))
    histories["detector"] = pretrain_detector(detector, marks, stage("pretrain_detector", cfg.detector_steps, 2e-3,
                                                                     augment=cfg.augment))
    seconds["detector"] = time.perf_counter() - start

    start = time.perf_counter()
    predictor = StructurePredictor(PredictorConfig(width=cfg.width, seed=cfg.seed))
    triplets = structure_triplets(data.structure_sequences, res, cfg.boundary_sigma)
    histories["predictor"] = pretrain_predictor(predictor, triplets, stage("pretrain_predictor", cfg.predictor_steps, 3e-3))
    seconds["predictor"] = time.perf_counter() - start

    samples = deblur_samples(data.train, res, cfg.boundary_sigma)
    jitter = None
    if cfg.jitter is not None:
        jitter = StructureJitter(cfg.jitter.shift, cfg.jitter.point, cfg.jitter.prob, cfg.boundary_sigma)
    nets = {}
    for use in (False, True):
        start = time.perf_counter()
        net = DeblurNet(DeblurConfig(width=cfg.width, use_structure=use, seed=cfg.seed))
        key = "deblur_with_structure" if use else "deblur_without_structure"
        train_set, steps = samples, cfg.deblur_steps
        if use and cfg.loop_structure:
            # twice the windows, so twice the steps for the same number of passes
            bare = FabModels(predictor, nets[False], detector)
            train_set = with_loop_structure(samples, loop_structure_maps(data.train, bare, res, cfg.boundary_sigma))
            steps *= 2
        histories[key] = pretrain_deblur(net, train_set, stage("pretrain_deblur", steps, 1e-3),
                                         jitter if use else None)
        seconds[key] = time.perf_counter() - start
        nets[use] = net
    for k, v in seconds.items():
        log.info("trained %s in %.0f s", k, v)
    return ToyModels(detector, predictor, nets[True], nets[False], histories, seconds)


def loop_structure_maps(sequences: list[BlurredSequence], bare: FabModels, resolution, sigma: float) -> np.ndarray:
    """Boundary maps predicted the way the loop predicts them, from detections on frames deblurred without structure.

    One map per deblur training window, in the order of :func:`deblur_samples`.
    """
    maps = []
    for seq in sequences:
        marks = detect_sequence(seq.blurred[:2], bare.detector) + [o.landmarks for o in run_circle(
            seq.blurred, bare, sigma=sigma)]
        edges = [render(m, resolution, sigma) for m in marks]
        for k in range(2, len(seq.blurred)):
            maps.append(predict_structure(edges[k - 2], edges[k - 1], bare.predictor)[1].grid)
    return np.stack(maps)


def with_loop_structure(samples: DeblurSamples, loop_maps: np.ndarray) -> DeblurSamples:
    """Every window twice: once with ground-truth structure, once with the loop-predicted map."""
    if len(loop_maps) != len(samples):
        raise ValueError(f"{len(loop_maps)} loop maps for {len(samples)} windows")

    def twice(a):
        return None if a is None else np.concatenate([a, a])

    return DeblurSamples(np.concatenate([samples.structure, loop_maps]), twice(samples.i_prev2),
                         twice(samples.i_prev1), twice(samples.i_t), twice(samples.sharp), twice(samples.points))


def evaluate_ablation(cfg: ToyConfig, models: ToyModels, sequences: list[BlurredSequence]) -> AblationResult:
    """Held-out NME for each pipeline variant, plus deblurring PSNR/SSIM.

    Scores cover blurred frames 2..N-1 of each sequence, the frames every
    variant produces.
    """
    res = (cfg.resolution, cfg.resolution)
    scheme = get_scheme()
    errs = {k: [] for k in VARIANTS}
    sharp_errs = []
    quality = {k: ([], []) for k in ("blurry", "without_structure", "with_structure", "with_gt_structure")}
    full, bare = models.pipeline(True), models.pipeline(False)
    for seq in sequences:
        gts, targets = seq.target_landmarks, seq.targets
        raw = detect_sequence(seq.blurred, models.detector, scheme)
        sharp = detect_sequence(targets, models.detector, scheme)
        gt_maps = [render(m, res, cfg.boundary_sigma) for m in gts]
        runs = {"FA+SMD": run_circle(seq.blurred, bare, scheme, sigma=cfg.boundary_sigma),
                "FA+SMD+SP": run_circle(seq.blurred, full, scheme, sigma=cfg.boundary_sigma),
                "FA+SMD+GT": run_circle(seq.blurred, full, scheme, gt_structure=gt_maps, sigma=cfg.boundary_sigma)}
        for t in range(2, len(seq.blurred)):
            errs["FA"].append(nme(raw[t], gts[t]))
            sharp_errs.append(nme(sharp[t], gts[t]))
            for k, outs in runs.items():
                errs[k].append(nme(outs[t - 2].landmarks, gts[t]))
            pairs = {"blurry": seq.blurred[t], "without_structure": runs["FA+SMD"][t - 2].deblurred,
                     "with_structure": runs["FA+SMD+SP"][t - 2].deblurred,
                     "with_gt_structure": runs["FA+SMD+GT"][t - 2].deblurred}
            for k, img in pairs.items():
                quality[k][0].append(psnr(img, targets[t]))
                quality[k][1].append(ssim(img, targets[t]))
    per_frame = {k: np.array(v) for k, v in errs.items()}
    return AblationResult({k: float(v.mean()) for k, v in per_frame.items()}, per_frame,
                          {k: float(np.mean(v[0])) for k, v in quality.items()},
                          {k: float(np.mean(v[1])) for k, v in quality.items()}, float(np.mean(sharp_errs)))


def run_toy_experiment(cfg: ToyConfig | None = None) -> tuple[ToyData, ToyModels, AblationResult]:
    cfg = cfg or ToyConfig()
    data = make_data(cfg)
    models = train_models(cfg, data)
    return data, models, evaluate_ablation(cfg, models, data.test)
