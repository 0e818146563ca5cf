"""Turn sequences (frames + annotations, sharp and blurred) into training sets for each stage."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blur import blur_frames
from .flow import FlowParams
from .geometry import LandmarkSet, get_scheme
from .io import SequenceManifest
from .pipeline import (BOUNDARY_SIGMA, DeblurSamples, FinetuneSamples, LandmarkSamples, StructureTriplets,
                       render)

DATASET_INDEX = "dataset.json"


@dataclass
class BlurredSequence:
    """A sharp sequence with its blurred counterpart: blurred frame k pairs with sharp frame k + 1."""

    sharp: list[np.ndarray]
    landmarks: list[LandmarkSet]
    blurred: list[np.ndarray]

    def __post_init__(self):
        if len(self.blurred) != len(self.sharp) - 2:
            raise ValueError(f"{len(self.sharp)} sharp frames need {len(self.sharp) - 2} blurred, got {len(self.blurred)}")

    @property
    def targets(self) -> list[np.ndarray]:
        return self.sharp[1:-1]

    @property
    def target_landmarks(self) -> list[LandmarkSet]:
        return self.landmarks[1:-1]


def make_blurred(frames, landmarks, n_sub: int = 20, params: FlowParams | None = None) -> BlurredSequence:
    samples = blur_frames(frames, landmarks, n_sub, params)
    return BlurredSequence(list(frames), list(landmarks), [s.blurred_frame for s in samples])


def structure_triplets(landmark_sequences, resolution, sigma: float = BOUNDARY_SIGMA) -> StructureTriplets:
    e2, e1, tgt = [], [], []
    for marks in landmark_sequences:
        maps = [render(m, resolution, sigma) for m in marks]
        for t in range(2, len(maps)):
            e2.append(maps[t - 2])
            e1.append(maps[t - 1])
            tgt.append(maps[t])
    if not tgt:
        raise ValueError("no sequence has 3 or more annotated frames")
    return StructureTriplets(np.stack(e2), np.stack(e1), np.stack(tgt))


def _blur_windows(seq: BlurredSequence, resolution, sigma):
    """Yield per-window tuples for blurred frames k >= 2 of one sequence."""
    maps = [render(m, resolution, sigma) for m in seq.target_landmarks]
    for k in range(2, len(seq.blurred)):
        yield (maps[k - 2], maps[k - 1], maps[k], seq.blurred[k - 2], seq.blurred[k - 1], seq.blurred[k],
               seq.targets[k], seq.target_landmarks[k].points)


def deblur_samples(sequences: list[BlurredSequence], resolution, sigma: float = BOUNDARY_SIGMA) -> DeblurSamples:
    rows = [w for s in sequences for w in _blur_windows(s, resolution, sigma)]
    if not rows:
        raise ValueError("no blurred sequence has 3 or more frames")
    cols = [np.stack(c) for c in zip(*rows)]
    return DeblurSamples(cols[2], cols[3], cols[4], cols[5], cols[6], cols[7])


def finetune_samples(sequences: list[BlurredSequence], resolution, sigma: float = BOUNDARY_SIGMA) -> FinetuneSamples:
    rows = [w for s in sequences for w in _blur_windows(s, resolution, sigma)]
    if not rows:
        raise ValueError("no blurred sequence has 3 or more frames")
    return FinetuneSamples(*[np.stack(c) for c in zip(*rows)])


def landmark_samples(frames, landmarks) -> LandmarkSamples:
    frames = list(frames)
    if len(frames) != len(landmarks) or not frames:
        raise ValueError(f"need matching, non-empty frame and landmark lists ({len(frames)} vs {len(landmarks)})")
    scheme = landmarks[0].scheme
    return LandmarkSamples(np.stack(frames), np.stack([m.points for m in landmarks]), scheme)


# -- on-disk datasets ------------------------------------------------------------

def write_dataset_index(root, manifests: list[Path]) -> Path:
    root = Path(root)
    doc = {"sequences": [str(Path(m).relative_to(root)) for m in manifests]}
    path = root / DATASET_INDEX
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def load_dataset(path) -> list[SequenceManifest]:
    """Accept a dataset directory, its index file, or a single sequence manifest."""
    path = Path(path)
    if path.is_dir():
        path = path / DATASET_INDEX if (path / DATASET_INDEX).is_file() else path / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no dataset index or manifest at {path}")
    doc = json.loads(path.read_text())
    if "sequences" in doc:
        return [SequenceManifest.load(path.parent / rel) for rel in doc["sequences"]]
    return [SequenceManifest.load(path)]


def read_sequence(manifest: SequenceManifest) -> tuple[list[np.ndarray], list[LandmarkSet]]:
    frames = manifest.load_frames()
    marks = manifest.load_annotations() if manifest.annotations else []
    for f in frames:
        if f.ndim != 2:
            raise ValueError(f"{manifest.root}: the networks take grayscale frames, got shape {f.shape}")
    if marks and marks[0].scheme.name != get_scheme(manifest.scheme).name:
        raise ValueError(f"{manifest.root}: annotation scheme mismatch")
    return frames, marks
