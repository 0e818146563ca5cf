"""Procedural "face glyph" video: spline-drawn faces moving along simple trajectories.

Every glyph is drawn from exact 68-point landmarks, so annotations are known
without error and the same geometry code path serves synthetic and real data.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import LandmarkSet, MarkupScheme, boundary_polylines, get_scheme

PROFILES = ("static", "linear", "sinusoidal")


def template68() -> np.ndarray:
    """Mirror-symmetric mean shape in face units (x right, y down, half-width ~0.85)."""
    pts = np.zeros((68, 2))
    k = np.arange(17)
    pts[:17, 0] = -0.85 * np.cos(np.pi * k / 16)
    pts[:17, 1] = -0.1 + 0.95 * np.sin(np.pi * k / 16)
    s = np.linspace(0.0, 1.0, 5)
    pts[17:22, 0] = np.linspace(-0.75, -0.2, 5)
    pts[17:22, 1] = -0.5 - 0.08 * np.sin(np.pi * s)
    pts[22:27, 0] = -pts[21:16:-1, 0]
    pts[22:27, 1] = pts[21:16:-1, 1]
    pts[27:31] = np.column_stack([np.zeros(4), np.linspace(-0.3, 0.1, 4)])
    pts[31:36] = np.column_stack([[-0.18, -0.09, 0.0, 0.09, 0.18], [0.18, 0.21, 0.23, 0.21, 0.18]])
    eye = np.array([[-0.17, 0], [-0.06, -0.07], [0.06, -0.07], [0.17, 0], [0.06, 0.07], [-0.06, 0.07]])
    pts[36:42] = eye + [-0.42, -0.25]
    left = eye.copy()
    left[:, 0] *= -1
    pts[42:48] = left[[3, 2, 1, 0, 5, 4]] + [0.42, -0.25]
    my = 0.48
    pts[48] = [-0.3, my]
    pts[49:54] = np.column_stack([[-0.2, -0.1, 0.0, 0.1, 0.2], my - 0.08 * np.array([0.8, 1.0, 0.85, 1.0, 0.8])])
    pts[54] = [0.3, my]
    pts[55:60] = np.column_stack([[0.2, 0.1, 0.0, -0.1, -0.2], my + 0.1 * np.array([0.8, 1.0, 1.05, 1.0, 0.8])])
    pts[60] = [-0.22, my]
    pts[61:64] = np.column_stack([[-0.1, 0.0, 0.1], np.full(3, my - 0.03)])
    pts[64] = [0.22, my]
    pts[65:68] = np.column_stack([[0.1, 0.0, -0.1], np.full(3, my + 0.03)])
    return pts


@dataclass
class GlyphIdentity:
    """Per-face shape and appearance, fixed over a sequence."""

    shape: np.ndarray
    face_tone: float
    background: float
    gradient: tuple[float, float]
    stroke: float


def sample_identity(rng: np.random.Generator, variation: float = 1.0) -> GlyphIdentity:
    pts = template68()
    v = variation
    eyes = list(range(36, 48))
    for idx, cx in ((range(36, 42), -0.42), (range(42, 48), 0.42)):
        idx = list(idx)
        pts[idx, 0] = cx + (pts[idx, 0] - cx) * (1 + v * rng.uniform(-0.15, 0.15))
    pts[eyes, 1] = -0.25 + (pts[eyes, 1] + 0.25) * (1 + v * rng.uniform(-0.4, 0.4))
    pts[17:27, 1] += v * rng.uniform(-0.06, 0.06)
    mouth = list(range(48, 68))
    pts[mouth, 0] *= 1 + v * rng.uniform(-0.2, 0.2)
    open_ = v * rng.uniform(0.0, 0.08)
    pts[[55, 56, 57, 58, 59, 65, 66, 67], 1] += open_
    pts[:17, 0] *= 1 + v * rng.uniform(-0.08, 0.08)
    pts[27:36, 1] *= 1 + v * rng.uniform(-0.1, 0.1)
    return GlyphIdentity(
        shape=pts,
        face_tone=float(rng.uniform(0.55, 0.8)),
        background=float(rng.uniform(0.1, 0.3)),
        gradient=(float(rng.uniform(-0.1, 0.1)), float(rng.uniform(-0.1, 0.1))),
        stroke=float(rng.uniform(0.3, 0.45)),
    )


def place(shape: np.ndarray, center, scale: float, angle: float = 0.0) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return shape @ rot.T * scale + np.asarray(center, dtype=np.float64)


def _forehead(points: np.ndarray, n: int = 9) -> np.ndarray:
    """Arc closing the face outline above the brows."""
    left, right = points[0], points[16]
    mid = 0.5 * (left + right)
    half = 0.5 * (right - left)
    up = np.array([half[1], -half[0]])
    th = np.linspace(0, np.pi, n)[1:-1]
    return mid + np.outer(np.cos(th), half) + np.outer(np.sin(th), up) * 1.05


def _inside_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    inside = np.zeros(px.shape, dtype=bool)
    x, y = poly[:, 0], poly[:, 1]
    j = len(poly) - 1
    for i in range(len(poly)):
        cond = (y[i] > py) != (y[j] > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (x[j] - x[i]) * (py - y[i]) / (y[j] - y[i]) + x[i]
        inside ^= cond & (px < xint)
        j = i
    return inside


def render_glyph(landmarks: LandmarkSet, identity: GlyphIdentity, resolution=(32, 32),
                 stroke_sigma: float | None = None) -> np.ndarray:
    """Draw the face: background ramp, filled face disc, dark component strokes and pupils."""
    h, w = resolution
    pts = landmarks.points
    iod = np.linalg.norm(pts[36] - pts[45])
    stroke_sigma = stroke_sigma if stroke_sigma is not None else max(0.45, 0.035 * iod)
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    gxn, gyn = identity.gradient
    img = identity.background + gxn * (gx / w - 0.5) + gyn * (gy / h - 0.5)

    outline = np.vstack([pts[:17], _forehead(pts)[::-1]])
    # supersample the face mask for a soft edge
    ss = 4
    sy, sx = np.mgrid[0 : h * ss, 0 : w * ss].astype(np.float64)
    mask = _inside_polygon((sx + 0.5) / ss - 0.5, (sy + 0.5) / ss - 0.5, outline)
    mask = mask.reshape(h, ss, w, ss).mean(axis=(1, 3))
    shade = 1.0 - 0.15 * ((gy - pts[:, 1].mean()) / max(iod, 1.0))
    img = img * (1 - mask) + identity.face_tone * np.clip(shade, 0.8, 1.1) * mask

    samples = np.vstack(boundary_polylines(landmarks) + [pts[[36, 39, 42, 45]]])
    from scipy.spatial import cKDTree

    d, _ = cKDTree(samples).query(np.column_stack([gx.ravel(), gy.ravel()]))
    strokes = np.exp(-(d * d) / (2 * stroke_sigma**2)).reshape(h, w)
    img = img - identity.stroke * strokes

    pupil_r = 0.05 * iod
    for idx in (range(36, 42), range(42, 48)):
        c = pts[list(idx)].mean(axis=0)
        r2 = (gx - c[0]) ** 2 + (gy - c[1]) ** 2
        img = img - 0.25 * np.exp(-r2 / (2 * max(pupil_r, 0.5) ** 2))
    mouth = np.vstack([pts[60:65], pts[65:68]])
    inner = _inside_polygon(gx, gy, mouth)
    img = img - 0.2 * ndimage.gaussian_filter(inner.astype(float), 0.5)
    return np.clip(img, 0.0, 1.0)


def trajectory(profile: str, n_frames: int, speed: float, rng: np.random.Generator,
               amplitude: float = 4.0) -> np.ndarray:
    """Per-frame (dx, dy) offsets in pixels.

    ``linear`` moves at constant ``speed`` px/frame, reflecting between +-amplitude;
    ``sinusoidal`` oscillates with peak speed ``speed``.
    """
    t = np.arange(n_frames, dtype=np.float64)
    if profile == "static" or speed == 0:
        return np.zeros((n_frames, 2))
    theta = rng.uniform(0, 2 * np.pi)
    direction = np.array([np.cos(theta), np.sin(theta)])
    if profile == "linear":
        period = 4 * amplitude
        phase = rng.uniform(0, period)
        s = (speed * t + phase) % period
        pos = np.where(s < 2 * amplitude, s - amplitude, 3 * amplitude - s)
        return np.outer(pos, direction)
    if profile == "sinusoidal":
        omega = speed / amplitude
        phase = rng.uniform(0, 2 * np.pi)
        return np.outer(amplitude * np.sin(omega * t + phase), direction)
    raise ValueError(f"unknown motion profile {profile!r}; expected one of {PROFILES}")


@dataclass
class SyntheticConfig:
    resolution: tuple[int, int] = (32, 32)
    n_frames: int = 12
    profile: str = "linear"
    speed: float = 2.0
    amplitude: float = 4.0
    face_scale: tuple[float, float] = (0.30, 0.36)  # face half-width as a fraction of the crop
    max_rotation: float = 0.15  # radians
    center_jitter: float = 1.5
    variation: float = 1.0
    scheme: str = "face68"
    extra: dict = field(default_factory=dict)


@dataclass
class SyntheticSequence:
    frames: list[np.ndarray]
    landmarks: list[LandmarkSet]
    identity: GlyphIdentity
    offsets: np.ndarray


def generate_sequence(rng: np.random.Generator, config: SyntheticConfig | None = None,
                      quantize: bool = True) -> SyntheticSequence:
    from .io import quantize as q16

    config = config or SyntheticConfig()
    scheme: MarkupScheme = get_scheme(config.scheme)
    h, w = config.resolution
    identity = sample_identity(rng, config.variation)
    scale = rng.uniform(*config.face_scale) * w
    angle = rng.uniform(-config.max_rotation, config.max_rotation)
    center = np.array([(w - 1) / 2, (h - 1) / 2 + 0.05 * h]) + rng.uniform(-1, 1, 2) * config.center_jitter
    offsets = trajectory(config.profile, config.n_frames, config.speed, rng, config.amplitude)
    frames, marks = [], []
    for off in offsets:
        lm = LandmarkSet(place(identity.shape, center + off, scale, angle), scheme)
        img = render_glyph(lm, identity, config.resolution)
        frames.append(q16(img) if quantize else img)
        marks.append(lm)
    return SyntheticSequence(frames, marks, identity, offsets)


def generate_stills(rng: np.random.Generator, n: int, config: SyntheticConfig | None = None):
    """Independent sharp glyph images (a static-image training set)."""
    config = config or SyntheticConfig()
    still = SyntheticConfig(**{**config.__dict__, "n_frames": 1, "profile": "static"})
    frames, marks = [], []
    for _ in range(n):
        seq = generate_sequence(rng, still)
        frames.append(seq.frames[0])
        marks.append(seq.landmarks[0])
    return frames, marks
