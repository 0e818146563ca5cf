"""Landmarks, boundary curves and boundary heatmaps.

Facial structure is represented as a boundary map: every facial component
(contour, brows, eyelids, lips, ...) is fitted with a cubic spline through its
landmarks and rasterised with a Gaussian cross-section.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

SAMPLES_PER_SEGMENT = 10


@dataclass(frozen=True)
class Component:
    name: str
    indices: tuple[int, ...]
    closed: bool = False


@dataclass(frozen=True)
class MarkupScheme:
    """Point count, curve grouping and the landmarks used for normalisation."""

    name: str
    n_points: int
    components: tuple[Component, ...]
    left_eye: tuple[int, ...]
    right_eye: tuple[int, ...]
    outer_eye_corners: tuple[int, int]
    mirror: tuple[int, ...] = field(default=())

    def __post_init__(self):
        for comp in self.components:
            if len(comp.indices) < (3 if comp.closed else 2):
                raise ValueError(f"component {comp.name!r} has too few points")
            if any(not 0 <= i < self.n_points for i in comp.indices):
                raise ValueError(f"component {comp.name!r} indexes outside [0, {self.n_points})")
        a, b = self.outer_eye_corners
        if a == b or not (0 <= a < self.n_points and 0 <= b < self.n_points):
            raise ValueError(f"invalid outer eye corner pair {self.outer_eye_corners}")
        if self.mirror:
            mirror = np.asarray(self.mirror)
            if sorted(self.mirror) != list(range(self.n_points)) or np.any(mirror[mirror] != np.arange(self.n_points)):
                raise ValueError("mirror table must be an involutive permutation")

    @classmethod
    def from_dict(cls, name: str, d: dict) -> "MarkupScheme":
        return cls(
            name=name,
            n_points=int(d["n_points"]),
            components=tuple(Component(c["name"], tuple(c["indices"]), bool(c.get("closed", False)))
                             for c in d["components"]),
            left_eye=tuple(d["left_eye"]),
            right_eye=tuple(d["right_eye"]),
            outer_eye_corners=tuple(d["outer_eye_corners"]),
            mirror=tuple(d.get("mirror", ())),
        )


def load_schemes(path: str | Path | None = None) -> dict[str, MarkupScheme]:
    """Read a versioned scheme file (defaults to the bundled one)."""
    if path is None:
        text = resources.files("fab").joinpath("data/schemes.json").read_text()
    else:
        text = Path(path).read_text()
    doc = json.loads(text)
    if doc.get("version") != 1:
        raise ValueError(f"unsupported scheme file version {doc.get('version')}")
    return {name: MarkupScheme.from_dict(name, d) for name, d in doc["schemes"].items()}


@lru_cache(maxsize=None)
def get_scheme(name: str = "face68") -> MarkupScheme:
    schemes = load_schemes()
    if name not in schemes:
        raise KeyError(f"unknown markup scheme {name!r}; available: {sorted(schemes)}")
    return schemes[name]


@dataclass
class LandmarkSet:
    points: np.ndarray
    scheme: MarkupScheme

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(self.points) != self.scheme.n_points:
            raise ValueError(f"expected {self.scheme.n_points} points for scheme {self.scheme.name!r}, "
                             f"got {len(self.points)}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("landmark coordinates must be finite")

    def __len__(self) -> int:
        return len(self.points)

    def translated(self, dx: float, dy: float) -> "LandmarkSet":
        return LandmarkSet(self.points + np.array([dx, dy]), self.scheme)


@dataclass
class BoundaryMap:
    grid: np.ndarray
    lost: bool = False

    @property
    def resolution(self) -> tuple[int, int]:
        return self.grid.shape


def _collapse_duplicates(points: np.ndarray, closed: bool) -> np.ndarray:
    keep = np.ones(len(points), dtype=bool)
    keep[1:] = np.any(points[1:] != points[:-1], axis=1)
    if closed and len(points) > 1 and np.all(points[-1] == points[0]):
        keep[-1] = False
    if not keep.all():
        log.warning("collapsed %d duplicate adjacent control point(s)", int((~keep).sum()))
    return points[keep]


def interpolate_component(points, closed: bool = False, samples_per_segment: int = SAMPLES_PER_SEGMENT) -> np.ndarray:
    """Densify control points with a cubic spline (natural when open, periodic when closed).

    The spline is parameterised uniformly by control-point index, so it commutes
    with affine maps of the control points. Returns an (M, 2) polyline that
    contains every control point exactly.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if samples_per_segment < 1:
        raise ValueError("samples_per_segment must be >= 1")
    pts = _collapse_duplicates(pts, closed)
    need = 3 if closed else 2
    if len(pts) < need:
        if len(pts) == 1:
            return pts.copy()
        raise ValueError(f"{'closed' if closed else 'open'} curve needs >= {need} distinct points, got {len(pts)}")
    if closed:
        knots = np.vstack([pts, pts[:1]])
        t = np.arange(len(knots), dtype=np.float64)
        spline = CubicSpline(t, knots, bc_type="periodic")
        n_seg = len(pts)
    else:
        t = np.arange(len(pts), dtype=np.float64)
        spline = CubicSpline(t, pts, bc_type="natural")
        n_seg = len(pts) - 1
    fine = np.arange(n_seg * samples_per_segment + (0 if closed else 1)) / samples_per_segment
    out = spline(fine)
    out[::samples_per_segment] = pts[: len(out[::samples_per_segment])]
    return out


def boundary_polylines(landmarks: LandmarkSet, scheme: MarkupScheme | None = None,
                       samples_per_segment: int = SAMPLES_PER_SEGMENT) -> list[np.ndarray]:
    scheme = scheme or landmarks.scheme
    return [interpolate_component(landmarks.points[list(c.indices)], c.closed, samples_per_segment)
            for c in scheme.components]


def render_boundary_map(landmarks: LandmarkSet, scheme: MarkupScheme | None = None,
                        resolution: tuple[int, int] = (128, 128), sigma: float = 1.5,
                        samples_per_segment: int = SAMPLES_PER_SEGMENT) -> BoundaryMap:
    """Rasterise the component curves: value = exp(-d^2 / 2 sigma^2), d = distance to nearest curve sample."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    scheme = scheme or landmarks.scheme
    if scheme.n_points != len(landmarks):
        raise ValueError(f"landmark count {len(landmarks)} does not match scheme {scheme.name!r}")
    h, w = resolution
    pts = landmarks.points
    inside = (pts[:, 0] >= 0) & (pts[:, 0] <= w - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= h - 1)
    if not inside.any():
        return BoundaryMap(np.zeros((h, w)), lost=True)
    samples = np.vstack(boundary_polylines(landmarks, scheme, samples_per_segment))
    gy, gx = np.mgrid[0:h, 0:w]
    pix = np.column_stack([gx.ravel(), gy.ravel()]).astype(np.float64)
    d, _ = cKDTree(samples).query(pix)
    grid = np.exp(-(d * d) / (2.0 * sigma * sigma)).reshape(h, w)
    return BoundaryMap(np.clip(grid, 0.0, 1.0))


def inter_ocular_distance(landmarks: LandmarkSet, scheme: MarkupScheme | None = None) -> float:
    """Distance between the outer eye corners."""
    scheme = scheme or landmarks.scheme
    a, b = scheme.outer_eye_corners
    d = float(np.linalg.norm(landmarks.points[a] - landmarks.points[b]))
    if not d > 0:
        raise ValueError("degenerate annotation: outer eye corners coincide")
    return d


# -- augmentation -----------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    tx: float = 0.0
    ty: float = 0.0
    rotation: float = 0.0  # degrees, counter-clockwise in image coordinates
    flip: bool = False
    zoom: float = 1.0

    def is_identity(self) -> bool:
        return self.tx == 0 and self.ty == 0 and self.rotation == 0 and not self.flip and self.zoom == 1


@dataclass(frozen=True)
class AugmentRanges:
    translation: float = 2.0
    rotation: float = 10.0
    flip_prob: float = 0.5
    zoom: tuple[float, float] = (0.9, 1.1)

    def sample(self, rng: np.random.Generator) -> AugmentParams:
        return AugmentParams(
            tx=float(rng.uniform(-self.translation, self.translation)),
            ty=float(rng.uniform(-self.translation, self.translation)),
            rotation=float(rng.uniform(-self.rotation, self.rotation)),
            flip=bool(rng.random() < self.flip_prob),
            zoom=float(rng.uniform(*self.zoom)),
        )


def _affine(params: AugmentParams, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Matrix/offset mapping input (x, y) to output (x, y), flip applied first."""
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    flip = np.diag([-1.0, 1.0]) if params.flip else np.eye(2)
    th = np.deg2rad(params.rotation)
    rot = np.array([[np.cos(th), np.sin(th)], [-np.sin(th), np.cos(th)]])
    a = params.zoom * rot @ flip
    b = c - a @ c + np.array([params.tx, params.ty])
    return a, b


def augment(frame: np.ndarray, landmarks: LandmarkSet, params: AugmentParams) -> tuple[np.ndarray, LandmarkSet]:
    """Apply one affine map to pixels (bilinear, edge clamped) and to landmark coordinates.

    A horizontal flip also permutes landmark indices through the scheme's mirror table.
    """
    if params.zoom <= 0:
        raise ValueError(f"zoom must be positive, got {params.zoom}")
    if params.is_identity():
        return frame.copy(), LandmarkSet(landmarks.points.copy(), landmarks.scheme)
    frame = np.asarray(frame, dtype=np.float64)
    h, w = frame.shape[-2:]
    a, b = _affine(params, h, w)
    pts = landmarks.points @ a.T + b
    if params.flip:
        if not landmarks.scheme.mirror:
            raise ValueError(f"scheme {landmarks.scheme.name!r} has no mirror table")
        pts = pts[list(landmarks.scheme.mirror)]
    # output (row, col) -> input (row, col): invert the (x, y) map and swap axes
    a_inv = np.linalg.inv(a)
    m = a_inv[::-1, ::-1]
    off = (-a_inv @ b)[::-1]
    if params.flip and params.rotation == 0 and params.zoom == 1 and params.tx == 0 and params.ty == 0:
        out = frame[..., ::-1].copy()
    elif frame.ndim == 2:
        out = ndimage.affine_transform(frame, m, offset=off, order=1, mode="nearest")
    else:
        out = np.stack([ndimage.affine_transform(ch, m, offset=off, order=1, mode="nearest") for ch in frame])
    return out, LandmarkSet(pts, landmarks.scheme)
