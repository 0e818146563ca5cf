"""Frames, landmark files and sequence manifests on disk.

Frames are stored as 16-bit binary PGM (grayscale) or PPM (RGB); PNG is
accepted when Pillow is installed.  Landmark files are plain text: a header
line ``"<version>, <n_points>"`` followed by one ``"x y"`` line per point.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import LandmarkSet, MarkupScheme, get_scheme

LANDMARK_FORMAT_VERSION = 1
FRAME_DIGITS = 6


def frame_name(index: int, suffix: str) -> str:
    return f"{index:0{FRAME_DIGITS}d}{suffix}"


# -- images -----------------------------------------------------------------

def _read_netpbm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported netpbm type {magic!r}")
    channels = 3 if magic == b"P6" else 1
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h * channels
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    img = data.astype(np.float64) / maxval
    if channels == 3:
        return img.reshape(h, w, 3).transpose(2, 0, 1)
    return img.reshape(h, w)


def _write_netpbm(path: Path, img: np.ndarray) -> None:
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    q = np.round(img * 65535).astype(">u2")
    if img.ndim == 2:
        magic, (h, w) = b"P5", img.shape
        payload = q
    else:
        magic, (h, w) = b"P6", img.shape[1:]
        payload = q.transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n65535\n" % (w, h))
        fh.write(payload.tobytes())


def read_image(path) -> np.ndarray:
    """Read a frame as float64 in [0, 1]: (H, W) grayscale or (3, H, W) colour."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        return _read_netpbm(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im)
        scale = 65535.0 if arr.dtype == np.uint16 else 255.0
        arr = arr.astype(np.float64) / scale
        return arr if arr.ndim == 2 else arr[..., :3].transpose(2, 0, 1)
    raise ValueError(f"{path}: unsupported image format")


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        _write_netpbm(path, img)
    elif path.suffix.lower() == ".png":
        from PIL import Image

        arr = np.clip(np.asarray(img), 0, 1)
        arr = arr if arr.ndim == 2 else arr.transpose(1, 2, 0)
        Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(path)
    else:
        raise ValueError(f"{path}: unsupported image format")


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 16-bit grid used on disk, so in-memory data matches a write/read round trip."""
    return np.round(np.clip(img, 0.0, 1.0) * 65535) / 65535


# -- landmarks --------------------------------------------------------------

def write_landmarks(path, landmarks: LandmarkSet) -> None:
    lines = [f"{LANDMARK_FORMAT_VERSION}, {len(landmarks)}"]
    lines += [f"{float(x)!r} {float(y)!r}" for x, y in landmarks.points]
    Path(path).write_text("\n".join(lines) + "\n")


def read_landmarks(path, scheme: MarkupScheme | str = "face68") -> LandmarkSet:
    scheme = get_scheme(scheme) if isinstance(scheme, str) else scheme
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty landmark file")
    try:
        version, n = (int(tok) for tok in lines[0].split(","))
    except ValueError as exc:
        raise ValueError(f"{path}: bad header {lines[0]!r}") from exc
    if version != LANDMARK_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported landmark file version {version}")
    if len(lines) - 1 != n:
        raise ValueError(f"{path}: header announces {n} points, found {len(lines) - 1}")
    pts = np.array([[float(t) for t in ln.split()] for ln in lines[1:]])
    return LandmarkSet(pts, scheme)


# -- manifests --------------------------------------------------------------

@dataclass
class SequenceManifest:
    """Ordered frame and annotation paths of one sequence (paths relative to ``root``)."""

    frames: list[str]
    annotations: list[str]
    frame_rate: float = 30.0
    scheme: str = "face68"
    root: Path = field(default_factory=Path)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)
        if self.annotations and len(self.frames) != len(self.annotations):
            raise ValueError(f"manifest lists {len(self.frames)} frames but {len(self.annotations)} annotations")

    def __len__(self) -> int:
        return len(self.frames)

    def frame_path(self, i: int) -> Path:
        return self.root / self.frames[i]

    def annotation_path(self, i: int) -> Path:
        return self.root / self.annotations[i]

    def load_frames(self) -> list[np.ndarray]:
        return [read_image(self.frame_path(i)) for i in range(len(self))]

    def load_annotations(self) -> list[LandmarkSet]:
        scheme = get_scheme(self.scheme)
        return [read_landmarks(self.annotation_path(i), scheme) for i in range(len(self.annotations))]

    def save(self, path) -> Path:
        path = Path(path)
        doc = {"frames": self.frames, "annotations": self.annotations, "frame_rate": self.frame_rate,
               "scheme": self.scheme}
        doc.update(self.extra)
        path.write_text(json.dumps(doc, indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "SequenceManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        known = {"frames", "annotations", "frame_rate", "scheme"}
        return cls(frames=list(doc["frames"]), annotations=list(doc.get("annotations", [])),
                   frame_rate=float(doc.get("frame_rate", 30.0)), scheme=doc.get("scheme", "face68"),
                   root=path.parent, extra={k: v for k, v in doc.items() if k not in known})


def write_sequence(out_dir, frames, annotations, frame_rate: float = 30.0, scheme: str = "face68",
                   suffix: str = ".pgm", extra: dict | None = None) -> SequenceManifest:
    """Write frames and landmarks into ``out_dir`` and return the saved manifest."""
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    (out_dir / "landmarks").mkdir(parents=True, exist_ok=True)
    frame_paths, ann_paths = [], []
    for i, img in enumerate(frames):
        rel = f"frames/{frame_name(i, suffix)}"
        write_image(out_dir / rel, img)
        frame_paths.append(rel)
    for i, ann in enumerate(annotations):
        rel = f"landmarks/{frame_name(i, '.pts')}"
        write_landmarks(out_dir / rel, ann)
        ann_paths.append(rel)
    manifest = SequenceManifest(frame_paths, ann_paths, frame_rate, scheme, out_dir, dict(extra or {}))
    manifest.save(out_dir / "manifest.json")
    return manifest
