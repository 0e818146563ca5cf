"""Motion-blur synthesis by subframe averaging, plus motion and blur intensity indices."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .flow import FlowParams, interpolate_subframes
from .geometry import LandmarkSet, MarkupScheme, inter_ocular_distance
from .io import SequenceManifest, write_sequence

log = logging.getLogger(__name__)

DEFAULT_SUBFRAMES = 20
DEFAULT_WINDOW = 30


@dataclass
class BlurredSample:
    blurred_frame: np.ndarray
    annotation: LandmarkSet | None
    source_indices: tuple[int, int, int]


def synthesize_blur_triplet(f0, f1, f2, ann1: LandmarkSet | None = None, n_sub: int = DEFAULT_SUBFRAMES,
                            params: FlowParams | None = None,
                            source_indices: tuple[int, int, int] = (0, 1, 2)) -> BlurredSample:
    """Average ``n_sub`` flow-interpolated subframes of three consecutive frames.

    The annotation is that of the middle frame, which anchors the subframes.
    """
    subframes = interpolate_subframes(f0, f1, f2, n_sub, params)
    total = np.zeros_like(subframes[0])
    for sub in subframes:  # accumulate in temporal order
        total = total + sub
    blurred = total / len(subframes)
    return BlurredSample(np.clip(blurred, 0.0, 1.0), ann1, tuple(source_indices))


def blur_frames(frames, annotations=None, n_sub: int = DEFAULT_SUBFRAMES,
                params: FlowParams | None = None) -> list[BlurredSample]:
    """Blur every window of three consecutive frames (stride one): n frames -> n - 2 samples."""
    if len(frames) < 3:
        raise ValueError(f"need at least 3 frames to synthesise blur, got {len(frames)}")
    out = []
    for k in range(len(frames) - 2):
        ann = annotations[k + 1] if annotations is not None else None
        out.append(synthesize_blur_triplet(frames[k], frames[k + 1], frames[k + 2], ann, n_sub, params,
                                           (k, k + 1, k + 2)))
    return out


def build_blurred_sequence(manifest: SequenceManifest, out_dir, n_sub: int = DEFAULT_SUBFRAMES,
                           params: FlowParams | None = None) -> SequenceManifest:
    """Disk-to-disk blur synthesis; output frame k carries the annotation of input frame k + 1."""
    if len(manifest) < 3:
        raise ValueError(f"sequence too short for blur synthesis: {len(manifest)} frames")
    frames = manifest.load_frames()
    annotations = manifest.load_annotations() if manifest.annotations else None
    samples = blur_frames(frames, annotations, n_sub, params)
    suffix = Path(manifest.frames[0]).suffix or ".pgm"
    out_anns = [s.annotation for s in samples] if annotations is not None else []
    extra = {"source_indices": [list(s.source_indices) for s in samples], "subframes": n_sub}
    return write_sequence(out_dir, [s.blurred_frame for s in samples], out_anns, manifest.frame_rate,
                          manifest.scheme, suffix, extra)


def eye_center(landmarks: LandmarkSet, indices) -> np.ndarray:
    return landmarks.points[list(indices)].mean(axis=0)


def motion_intensity(annotations: list[LandmarkSet], scheme: MarkupScheme | None = None,
                     window_frames: int = DEFAULT_WINDOW) -> np.ndarray:
    """Accumulated left-eye travel per window, normalised by the window's mean inter-ocular distance.

    Windows are consecutive, non-overlapping blocks of ``window_frames``; a
    trailing block with fewer than two frames is dropped.  Windows whose
    inter-ocular distance is degenerate are reported as NaN.
    """
    if not annotations:
        return np.zeros(0)
    scheme = scheme or annotations[0].scheme
    if window_frames < 2:
        raise ValueError("window_frames must be >= 2")
    values = []
    for start in range(0, len(annotations), window_frames):
        window = annotations[start : start + window_frames]
        if len(window) < 2:
            break
        centers = np.array([eye_center(a, scheme.left_eye) for a in window])
        travel = float(np.linalg.norm(np.diff(centers, axis=0), axis=1).sum())
        try:
            iod = float(np.mean([inter_ocular_distance(a, scheme) for a in window]))
        except ValueError:
            log.warning("skipping motion-intensity window at frame %d: degenerate inter-ocular distance", start)
            values.append(np.nan)
            continue
        values.append(travel / iod)
    return np.array(values)


def blur_intensity(frame, face_box=None) -> float:
    """Negative variance of the Laplacian inside ``face_box`` (x0, y0, x1, y1); higher means blurrier."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 3:
        frame = frame.mean(axis=0)
    h, w = frame.shape
    x0, y0, x1, y1 = face_box if face_box is not None else (0, 0, w, h)
    x0, y0 = max(int(x0), 0), max(int(y0), 0)
    x1, y1 = min(int(x1), w), min(int(y1), h)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"empty face box {face_box}")
    lap = ndimage.laplace(frame, mode="nearest")
    return -float(np.var(lap[y0:y1, x0:x1]))
