"""Dense optical flow (Horn-Schunck, coarse-to-fine) and backward warping.

Flow convention: ``F = estimate_flow(a, b)`` satisfies ``a(p) ~ b(p + F(p))``;
channel 0 is the horizontal (x) displacement, channel 1 the vertical one.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .autodiff.functional import bilinear_warp_array

log = logging.getLogger(__name__)

FLOW_MAGIC = b"FABFLOW1"


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape:
            raise ValueError(f"u/v shape mismatch {self.u.shape} vs {self.v.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def as_array(self) -> np.ndarray:
        return np.stack([self.u, self.v])

    def scaled(self, factor: float) -> "FlowField":
        return FlowField(self.u * factor, self.v * factor)

    @classmethod
    def zeros(cls, shape) -> "FlowField":
        return cls(np.zeros(shape), np.zeros(shape))

    @classmethod
    def constant(cls, shape, u: float, v: float) -> "FlowField":
        return cls(np.full(shape, float(u)), np.full(shape, float(v)))


@dataclass
class FlowParams:
    alpha: float = 10.0
    iterations: int = 100
    pyramid_levels: int = 3
    intensity_scale: float = 255.0  # alpha is expressed for 8-bit intensities
    presmooth: float = 1.0


@dataclass
class FlowDiagnostics:
    """Horn-Schunck energy after every sweep, one list per pyramid level (coarse first)."""

    energies: list[list[float]] = field(default_factory=list)
    levels_used: int = 0


def warp_backward(src, flow: FlowField | np.ndarray) -> np.ndarray:
    """``out(p) = src(p - flow(p))`` by bilinear sampling with clamp-to-edge borders.

    ``src`` is (H, W) or (C, H, W); ``flow`` is a FlowField or a (2, H, W) array.
    """
    src = np.asarray(getattr(src, "grid", src), dtype=np.float64)
    arr = flow.as_array() if isinstance(flow, FlowField) else np.asarray(flow, dtype=np.float64)
    if arr.shape[-2:] != src.shape[-2:]:
        raise ValueError(f"flow extent {arr.shape[-2:]} does not match source extent {src.shape[-2:]}")
    if not np.any(arr):
        return src.copy()
    squeeze = src.ndim == 2
    s4 = src[None, None] if squeeze else src[None]
    out = bilinear_warp_array(s4, arr[None])
    return out[0, 0] if squeeze else out[0]


def _resize(a: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    hc, wc = a.shape
    ys = np.clip((np.arange(h) + 0.5) * hc / h - 0.5, 0, hc - 1)
    xs = np.clip((np.arange(w) + 0.5) * wc / w - 0.5, 0, wc - 1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(a, [yy, xx], order=1, mode="nearest")


def _pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [img]
    for _ in range(levels - 1):
        pyr.append(ndimage.gaussian_filter(pyr[-1], 1.0, mode="nearest")[::2, ::2])
    return pyr


def _neighbour_stats(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum over the existing 4-neighbours and their count."""
    s = np.zeros_like(u)
    n = np.zeros_like(u)
    s[1:, :] += u[:-1, :]
    n[1:, :] += 1
    s[:-1, :] += u[1:, :]
    n[:-1, :] += 1
    s[:, 1:] += u[:, :-1]
    n[:, 1:] += 1
    s[:, :-1] += u[:, 1:]
    n[:, :-1] += 1
    return s, n


def hs_energy(u, v, ix, iy, r0, alpha) -> float:
    """Linearised brightness-constancy residual plus alpha^2 times 4-neighbour smoothness."""
    data = r0 + ix * u + iy * v
    smooth = (np.diff(u, axis=0) ** 2).sum() + (np.diff(u, axis=1) ** 2).sum()
    smooth += (np.diff(v, axis=0) ** 2).sum() + (np.diff(v, axis=1) ** 2).sum()
    return float((data * data).sum() + alpha * alpha * smooth)


def _solve_level(a, b, u0, v0, params: FlowParams, record: list[float] | None):
    bw = warp_backward(b, np.stack([-u0, -v0]))
    gy_a, gx_a = np.gradient(a)
    gy_b, gx_b = np.gradient(bw)
    ix = 0.5 * (gx_a + gx_b)
    iy = 0.5 * (gy_a + gy_b)
    it = bw - a
    # residual is it + ix*(u-u0) + iy*(v-v0) = r0 + ix*u + iy*v
    r0 = it - ix * u0 - iy * v0
    alpha2 = params.alpha ** 2
    u, v = u0.copy(), v0.copy()
    h, w = a.shape
    parity = (np.add.outer(np.arange(h), np.arange(w)) % 2).astype(bool)
    grad2 = ix * ix + iy * iy
    if record is not None:
        record.append(hs_energy(u, v, ix, iy, r0, params.alpha))
    for _ in range(params.iterations):
        for colour in (False, True):
            su, n = _neighbour_stats(u)
            sv, _ = _neighbour_stats(v)
            ubar, vbar = su / n, sv / n
            t = (r0 + ix * ubar + iy * vbar) / (alpha2 * n + grad2)
            mask = parity == colour
            u[mask] = (ubar - ix * t)[mask]
            v[mask] = (vbar - iy * t)[mask]
        if record is not None:
            record.append(hs_energy(u, v, ix, iy, r0, params.alpha))
    return u, v


def estimate_flow(img_a, img_b, params: FlowParams | None = None,
                  diagnostics: FlowDiagnostics | None = None) -> FlowField:
    """Horn-Schunck flow from ``img_a`` to ``img_b`` on a Gaussian pyramid.

    Each level minimises the linearised energy by red-black Gauss-Seidel
    sweeps, so the energy never increases within a level.
    """
    params = params or FlowParams()
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"estimate_flow needs two equal-shape 2-D images, got {a.shape} and {b.shape}")
    levels = max(1, int(params.pyramid_levels))
    while levels > 1 and min(a.shape) < 2 ** levels:
        levels -= 1
    if levels != params.pyramid_levels:
        log.warning("image %s too small for %d pyramid levels, using %d", a.shape, params.pyramid_levels, levels)
    if params.presmooth > 0:
        a = ndimage.gaussian_filter(a, params.presmooth, mode="nearest")
        b = ndimage.gaussian_filter(b, params.presmooth, mode="nearest")
    a = a * params.intensity_scale
    b = b * params.intensity_scale
    pa, pb = _pyramid(a, levels), _pyramid(b, levels)
    u = v = None
    if diagnostics is not None:
        diagnostics.levels_used = levels
    for la, lb in zip(reversed(pa), reversed(pb)):
        if u is None:
            u = np.zeros(la.shape)
            v = np.zeros(la.shape)
        else:
            sy, sx = la.shape[0] / u.shape[0], la.shape[1] / u.shape[1]
            u = _resize(u, la.shape) * sx
            v = _resize(v, la.shape) * sy
        record = [] if diagnostics is not None else None
        u, v = _solve_level(la, lb, u, v, params, record)
        if diagnostics is not None:
            diagnostics.energies.append(record)
    h, w = a.shape
    u = np.clip(np.nan_to_num(u), -w, w)
    v = np.clip(np.nan_to_num(v), -h, h)
    return FlowField(u, v)


def interpolate_subframes(f0, f1, f2, n_sub: int = 20, params: FlowParams | None = None) -> list[np.ndarray]:
    """Subframes between ``f0`` and ``f2`` made by warping the middle frame ``f1`` outward.

    Half of the subframes follow the flow toward ``f0`` and half toward ``f2``,
    at fractions k / (n_sub/2 + 1); they are returned in temporal order.
    """
    f0, f1, f2 = (np.asarray(f, dtype=np.float64) for f in (f0, f1, f2))
    if not (f0.shape == f1.shape == f2.shape):
        raise ValueError("subframe interpolation needs three equal-shape frames")
    if n_sub < 2 or n_sub % 2:
        raise ValueError(f"n_sub must be a positive even number, got {n_sub}")
    half = n_sub // 2
    to_prev = estimate_flow(f1, f0, params)
    to_next = estimate_flow(f1, f2, params)
    fractions = np.arange(1, half + 1) / (half + 1)
    before = [warp_backward(f1, to_prev.scaled(t)) for t in fractions[::-1]]
    after = [warp_backward(f1, to_next.scaled(t)) for t in fractions]
    return before + after


def write_flow(path, flow: FlowField) -> None:
    """Binary dump: magic, H, W (uint32 LE), then row-major float64 u, then v."""
    h, w = flow.shape
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(flow.u, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(flow.v, dtype="<f8").tobytes())


def read_flow(path) -> FlowField:
    raw = Path(path).read_bytes()
    if raw[:8] != FLOW_MAGIC:
        raise ValueError(f"{path}: not a flow dump")
    h, w = struct.unpack("<II", raw[8:16])
    n = h * w * 8
    if len(raw) != 16 + 2 * n:
        raise ValueError(f"{path}: truncated flow dump")
    u = np.frombuffer(raw[16 : 16 + n], dtype="<f8").reshape(h, w)
    v = np.frombuffer(raw[16 + n :], dtype="<f8").reshape(h, w)
    return FlowField(u.astype(np.float64), v.astype(np.float64))
