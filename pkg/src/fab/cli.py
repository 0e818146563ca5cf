"""``fab`` command line: data synthesis, training, tracking, evaluation and self-checks.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal check failure.
Set ``FAB_LOG_LEVEL`` (DEBUG, INFO, WARNING, ...) to control verbosity.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff.checkpoint import CheckpointError
from .blur import DEFAULT_SUBFRAMES, DEFAULT_WINDOW, blur_intensity, build_blurred_sequence, motion_intensity
from .config import RunConfig, load_config, write_snapshot
from .datasets import (deblur_samples, finetune_samples, landmark_samples, load_dataset, make_blurred,
                       read_sequence, structure_triplets, write_dataset_index)
from .geometry import get_scheme, render_boundary_map
from .io import SequenceManifest, read_image, read_landmarks, write_image, write_landmarks, write_sequence
from .nets import DeblurNet, LandmarkDetector, StructurePredictor, load_model, save_model
from .pipeline import FabModels, TrainConfig, TrainingAborted, alternate_finetune, pretrain_deblur, \
    pretrain_detector, pretrain_predictor, run_circle

log = logging.getLogger("fab")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
LOCK_NAME = ".fab.lock"
CHECKPOINTS = {"predictor": "predictor.npz", "deblur": "deblur.npz", "detector": "detector.npz"}


class DataError(Exception):
    """Bad or missing input; reported with exit code 2."""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- output directory ownership --------------------------------------------------------

@contextmanager
def owned_output(out_dir: Path, force: bool):
    """Claim ``out_dir`` for one run: refuse non-empty directories without --force and hold a lock file."""
    out_dir = Path(out_dir)
    if out_dir.exists() and any(p.name != LOCK_NAME for p in out_dir.iterdir()) and not force:
        raise DataError(f"output directory {out_dir} is not empty; pass --force to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"{out_dir} is locked by another run ({lock}); remove the lock if that run is dead")
    with os.fdopen(fd, "w") as fh:
        fh.write(f"{os.getpid()}\n")
    try:
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


@contextmanager
def staged_output(out_dir: Path, force: bool):
    """Write into a temporary sibling directory and move it into place only on success."""
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise DataError(f"output directory {out_dir} is not empty; pass --force to overwrite")
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    if out_dir.exists():
        shutil.rmtree(out_dir)
    os.replace(stage, out_dir)


def _config(args) -> RunConfig:
    overrides: dict[str, dict[str, str]] = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        overrides.setdefault(section, {})[name] = value
    try:
        return load_config(getattr(args, "config", None), overrides)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    except ValueError as exc:
        raise UsageError(f"bad configuration: {exc}") from exc


# -- commands ----------------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    from .synthetic import SyntheticConfig, generate_sequence

    cfg = _config(args)
    rng = np.random.default_rng(args.seed)
    syn = SyntheticConfig(resolution=(args.resolution, args.resolution), n_frames=args.frames, profile=args.profile,
                          speed=args.speed, amplitude=args.amplitude)
    with owned_output(Path(args.out), args.force) as out:
        manifests = []
        for i in range(args.n_sequences):
            seq = generate_sequence(rng, syn)
            m = write_sequence(out / f"seq_{i:03d}", seq.frames, seq.landmarks,
                               extra={"profile": args.profile, "speed": args.speed, "seed": args.seed})
            manifests.append(m.root / "manifest.json")
        write_dataset_index(out, manifests)
        cfg.paths["out"] = str(out)
        write_snapshot(cfg, out)
    log.info("wrote %d sequences to %s", args.n_sequences, args.out)
    return EXIT_OK


def _check_manifest_files(manifest: SequenceManifest) -> None:
    for i in range(len(manifest)):
        if not manifest.frame_path(i).is_file():
            raise DataError(f"missing frame file {manifest.frame_path(i)}")
    for i in range(len(manifest.annotations)):
        if not manifest.annotation_path(i).is_file():
            raise DataError(f"missing annotation file {manifest.annotation_path(i)}")


def cmd_synth(args) -> int:
    cfg = _config(args)
    cfg.subframes = args.subframes
    manifest = SequenceManifest.load(args.input)
    _check_manifest_files(manifest)
    with owned_output(Path(args.out), args.force) as out:
        blurred = build_blurred_sequence(manifest, out, args.subframes, cfg.flow)
        anns = blurred.load_annotations() if blurred.annotations else []
        windows = motion_intensity(anns, window_frames=args.window) if len(anns) >= 2 else np.zeros(0)
        with open(out / "intensity.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "source_frame", "blur_intensity", "motion_window", "motion_intensity"])
            for k in range(len(blurred)):
                win = k // args.window
                motion = windows[win] if win < len(windows) else float("nan")
                w.writerow([blurred.frames[k], k + 1, repr(blur_intensity(read_image(blurred.frame_path(k)))),
                            win, repr(float(motion))])
        cfg.paths.update({"input": str(args.input), "out": str(out)})
        write_snapshot(cfg, out)
    return EXIT_OK


def cmd_render_boundary(args) -> int:
    scheme = get_scheme(args.scheme)
    lm = read_landmarks(args.landmarks, scheme)
    bmap = render_boundary_map(lm, scheme, (args.resolution, args.resolution), args.sigma)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise DataError(f"{out} exists; pass --force to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_image(out, bmap.grid)
    if bmap.lost:
        log.warning("all landmarks lie outside the %dx%d crop; wrote an empty map", args.resolution, args.resolution)
    return EXIT_OK


def _load_blurred_sequences(manifests, cfg: RunConfig):
    seqs = []
    for m in manifests:
        frames, marks = read_sequence(m)
        if len(marks) != len(frames):
            raise DataError(f"{m.root}: every frame needs an annotation for training")
        seqs.append(make_blurred(frames, marks, cfg.subframes, cfg.flow))
    return seqs


def _resolution(manifests) -> tuple[int, int]:
    frames, _ = read_sequence(manifests[0])
    return frames[0].shape


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    cfg.train.stage = f"pretrain_{args.stage}"
    train = TrainConfig(**cfg.train.__dict__)
    manifests = load_dataset(args.data)
    res = _resolution(manifests)
    if res != (cfg.models.resolution, cfg.models.resolution):
        raise DataError(f"frames are {res[0]}x{res[1]} but [models] resolution is {cfg.models.resolution}")
    seed = train.seed
    with owned_output(Path(args.out), args.force) as out:
        train.checkpoint_dir = str(out)
        if args.stage == "predictor":
            model = StructurePredictor(cfg.models.predictor_config(seed))
            data = structure_triplets([read_sequence(m)[1] for m in manifests], res, cfg.boundary_sigma)
            history = pretrain_predictor(model, data, train)
        elif args.stage == "deblur":
            model = DeblurNet(cfg.models.deblur_config(seed, not args.no_structure))
            data = deblur_samples(_load_blurred_sequences(manifests, cfg), res, cfg.boundary_sigma)
            history = pretrain_deblur(model, data, train)
        else:
            frames, marks = [], []
            for m in manifests:
                f, lm = read_sequence(m)
                frames += f
                marks += lm
            data = landmark_samples(frames, marks)
            model = LandmarkDetector(cfg.models.detector_config(seed), mean_shape=(data.points / res[::-1]).mean(0))
            history = pretrain_detector(model, data, train)
        save_model(out / CHECKPOINTS[args.stage], model)
        (out / "loss.csv").write_text("epoch,loss\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(history)))
        cfg.paths.update({"data": str(args.data), "out": str(out)})
        write_snapshot(cfg, out)
    return EXIT_OK


def load_models(ckpt_dir) -> FabModels:
    ckpt_dir = Path(ckpt_dir)
    models = {}
    for kind, name in CHECKPOINTS.items():
        path = ckpt_dir / name
        if not path.is_file():
            raise DataError(f"missing checkpoint {path}")
        expected = {"predictor": "structure_predictor"}.get(kind, kind)
        models[kind] = load_model(path, expected)
    return FabModels(models["predictor"], models["deblur"], models["detector"]).eval()


def cmd_finetune(args) -> int:
    cfg = _config(args)
    cfg.train.stage = "finetune"
    train = TrainConfig(**cfg.train.__dict__)
    models = load_models(args.checkpoints)
    manifests = load_dataset(args.data)
    res = _resolution(manifests)
    with owned_output(Path(args.out), args.force) as out:
        train.checkpoint_dir = str(out)
        data = finetune_samples(_load_blurred_sequences(manifests, cfg), res, cfg.boundary_sigma)
        history = alternate_finetune(models, data, train)
        for kind, model in (("predictor", models.predictor), ("deblur", models.deblurrer),
                            ("detector", models.detector)):
            save_model(out / CHECKPOINTS[kind], model)
        with open(out / "loss.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "total", "structure", "reconstruction", "alignment"])
            w.writeheader()
            w.writerows(history)
        cfg.paths.update({"data": str(args.data), "checkpoints": str(args.checkpoints), "out": str(out)})
        write_snapshot(cfg, out)
    return EXIT_OK


def cmd_track(args) -> int:
    cfg = _config(args)
    models = load_models(args.checkpoints)  # fail before touching the output directory
    manifest = SequenceManifest.load(args.sequence)
    _check_manifest_files(manifest)
    frames, _ = read_sequence(manifest)
    scheme = get_scheme(manifest.scheme)
    if frames[0].shape != tuple(models.detector.config.resolution):
        raise DataError(f"frames are {frames[0].shape} but the detector expects {models.detector.config.resolution}")
    outputs = run_circle(frames, models, scheme, sigma=cfg.boundary_sigma)
    with staged_output(Path(args.out), args.force) as stage:
        write_sequence(stage, [o.deblurred for o in outputs], [o.landmarks for o in outputs],
                                 manifest.frame_rate, manifest.scheme,
                                 extra={"source_frames": [o.t for o in outputs],
                                        "resets": [o.t for o in outputs if o.reset]})
        if args.dump_boundaries:
            (stage / "boundaries").mkdir()
            for o in outputs:
                write_image(stage / "boundaries" / f"{o.t:06d}.pgm", o.boundary)
        cfg.paths.update({"sequence": str(args.sequence), "checkpoints": str(args.checkpoints),
                          "out": str(args.out)})
        write_snapshot(cfg, stage)
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import metrics

    pred = SequenceManifest.load(args.pred)
    gt = SequenceManifest.load(args.gt)
    _check_manifest_files(pred)
    _check_manifest_files(gt)
    scheme = get_scheme(gt.scheme)
    source = pred.extra.get("source_frames", list(range(len(pred))))
    if max(source) >= len(gt.annotations):
        raise DataError(f"prediction refers to frame {max(source)} but ground truth has {len(gt.annotations)}")
    ref = SequenceManifest.load(args.ref) if args.ref else None
    rows, records = [], []
    for k, t in enumerate(source):
        p = read_landmarks(pred.annotation_path(k), scheme)
        g = read_landmarks(gt.annotation_path(t), scheme)
        value = metrics.nme(p, g, scheme)
        records.append(metrics.ErrorRecord(value, pred.frames[k]))
        row = {"frame": pred.frames[k], "source_frame": t, "nme": repr(value), "psnr": "", "ssim": ""}
        if ref is not None:
            img, sharp = read_image(pred.frame_path(k)), read_image(ref.frame_path(t))
            row["psnr"], row["ssim"] = repr(metrics.psnr(img, sharp)), repr(metrics.ssim(img, sharp))
        rows.append(row)
    with owned_output(Path(args.out), args.force) as out:
        summary = metrics.summarize(records)
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for key, val in summary.items():
                w.writerow([key, repr(val)])
        curve = metrics.ced_curve(records, max(metrics.REPORT_THRESHOLDS), metrics.CED_BINS)
        with open(out / "ced.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fraction"])
            w.writerows([repr(float(a)), repr(float(b))] for a, b in zip(curve.thresholds, curve.fractions))
        with open(out / "per_frame.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["frame", "source_frame", "nme", "psnr", "ssim"])
            w.writeheader()
            w.writerows(rows)
        cfg = _config(args)
        cfg.paths.update({"pred": str(args.pred), "gt": str(args.gt), "out": str(out)})
        write_snapshot(cfg, out)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import CHECKS, run_selftest

    unknown = set(args.only or []) - set(CHECKS)
    if unknown:
        raise UsageError(f"unknown check(s): {', '.join(sorted(unknown))}")
    results = run_selftest(args.seed, args.only)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failed checks: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fab", description="Facial landmark tracking through structure-aware deblurring.")
    p.add_argument("--version", action="version", version=f"fab {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True, force=True):
        if config:
            sp.add_argument("--config", help="INI run configuration")
            sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                            help="override one configuration value (repeatable)")
        if force:
            sp.add_argument("--force", action="store_true", help="overwrite a non-empty output location")

    sp = sub.add_parser("gen-synthetic", help="generate sharp synthetic face-glyph sequences")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-sequences", type=int, default=4)
    sp.add_argument("--frames", type=int, default=12)
    sp.add_argument("--profile", choices=("static", "linear", "sinusoidal"), default="linear")
    sp.add_argument("--speed", type=float, default=2.0, help="pixels per frame")
    sp.add_argument("--amplitude", type=float, default=4.0)
    sp.add_argument("--resolution", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    common(sp)
    sp.set_defaults(func=cmd_gen_synthetic)

    sp = sub.add_parser("synth", help="blur a sequence by subframe averaging")
    sp.add_argument("--in", dest="input", required=True, help="sequence manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--subframes", type=int, default=DEFAULT_SUBFRAMES)
    sp.add_argument("--window", type=int, default=DEFAULT_WINDOW, help="motion-intensity window in frames")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("render-boundary", help="rasterise a landmark file as a boundary map")
    sp.add_argument("--landmarks", required=True)
    sp.add_argument("--out", required=True, help="output image (.pgm or .png)")
    sp.add_argument("--resolution", type=int, default=128)
    sp.add_argument("--sigma", type=float, default=1.5)
    sp.add_argument("--scheme", default="face68")
    common(sp, config=False)
    sp.set_defaults(func=cmd_render_boundary)

    sp = sub.add_parser("pretrain", help="pretrain one network")
    sp.add_argument("--stage", choices=("predictor", "deblur", "detector"), required=True)
    sp.add_argument("--data", required=True, help="dataset directory, index or sequence manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-structure", action="store_true", help="deblurrer without the boundary channel")
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="alternate end-to-end fine-tuning of all three networks")
    sp.add_argument("--checkpoints", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("track", help="run the tracking loop over a sequence")
    sp.add_argument("--sequence", required=True, help="sequence manifest")
    sp.add_argument("--checkpoints", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--dump-boundaries", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_track)

    sp = sub.add_parser("eval", help="NME/CED/AUC/failure rate and optional PSNR/SSIM")
    sp.add_argument("--pred", required=True, help="manifest written by track")
    sp.add_argument("--gt", required=True, help="ground-truth sequence manifest")
    sp.add_argument("--ref", help="sharp reference manifest for PSNR/SSIM")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("selftest", help="gradient, warp/flow and metric checks")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--only", action="append", help="run just this named check (repeatable)")
    sp.set_defaults(func=cmd_selftest)
    return p


def _setup_logging() -> None:
    level = os.environ.get("FAB_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError, TrainingAborted) as exc:
        print(f"fab: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"fab: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except KeyError as exc:
        print(f"fab: error: missing field {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
