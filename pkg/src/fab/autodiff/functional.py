"""Differentiable layer functions on NCHW tensors."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix with columns ordered (kh, kw, c); going through NHWC keeps the copy in channel runs."""
    n, c = xp.shape[:2]
    nhwc = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    win = sliding_window_view(nhwc, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)


def _flat_kernel(weight: np.ndarray) -> np.ndarray:
    return weight.transpose(0, 2, 3, 1).reshape(weight.shape[0], -1)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, ``x`` is (N, C, H, W) and ``weight`` is (O, C, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be NCHW, got {x.ndim} dimensions")
    if weight.ndim != 4:
        raise ValueError(f"conv2d: weight must be (O, C, kh, kw), got {weight.ndim} dimensions")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d: channel dimension (dim 1) mismatch, input has {c}, weight expects {ci}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ValueError(f"conv2d: bias must have shape ({o},), got {bias.shape}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad) if padding else x.data
    w2 = _flat_kernel(weight.data)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = (cols @ w2.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ _im2col(xp, kh, kw, stride, ho, wo)).reshape(o, kh, kw, c).transpose(0, 3, 1, 2) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1 and padding <= kh - 1 and padding <= kw - 1:
                # full correlation of the output gradient with the flipped kernel
                ph, pw = kh - 1 - padding, kw - 1 - padding
                gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
                wf = _flat_kernel(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gx = (_im2col(gp, kh, kw, 1, h, w) @ wf.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
            else:
                gcols = np.ascontiguousarray((g2 @ w2).reshape(n, ho, wo, kh, kw, c).transpose(3, 4, 0, 5, 1, 2))
                gxp = np.zeros(xp.shape, dtype=xp.dtype)
                hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + hs : stride, j : j + ws : stride] += gcols[i, j]
                gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "conv2d")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: feature dimension mismatch, input has {x.shape[-1]}, weight expects {weight.shape[1]}")
    out = x @ weight.transpose(1, 0)
    return out + bias if bias is not None else out


def avg_pool2d(x, kernel: int = 2) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ValueError(f"avg_pool2d: spatial extent {h}x{w} not divisible by {kernel}")
    k = kernel
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return Tensor._make(out, (x,), backward, "avg_pool2d")


def upsample2x(x) -> Tensor:
    """Nearest-neighbour upsampling by two along both spatial axes."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"upsample2x: input must be NCHW, got {x.ndim} dimensions")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._make(out, (x,), backward, "upsample2x")


def global_avg_pool(x) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    return as_tensor(x).mean(axis=(2, 3))


def _normalize(x: Tensor, axes, mu, var, eps, weight, bias, op):
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    shape = (1, -1, 1, 1)
    gamma = weight.data.reshape(shape) if weight is not None else 1.0
    out = xhat * gamma + (bias.data.reshape(shape) if bias is not None else 0.0)

    def backward(g):
        gxhat = g * gamma
        gx = None
        if x.requires_grad:
            m1 = gxhat.mean(axis=axes, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
            gx = inv * (gxhat - m1 - xhat * m2)
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=(0, 2, 3)))
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = [x] + [p for p in (weight, bias) if p is not None]
    return Tensor._make(out, parents, backward, op)


def instance_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalise each (sample, channel) plane to zero mean and unit variance."""
    x = as_tensor(x)
    axes = (2, 3)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    return _normalize(x, axes, mu, var, eps, weight, bias, "instance_norm")


def batch_norm(x, weight, bias, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalisation over (N, H, W); running statistics are updated in place when training."""
    x = as_tensor(x)
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        count = x.data.size // x.shape[1]
        unbiased = var.reshape(-1) * count / max(count - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
        return _normalize(x, axes, mu, var, eps, weight, bias, "batch_norm")
    # eval mode is a fixed affine map
    inv = 1.0 / np.sqrt(running_var + eps)
    scale = weight * Tensor(inv) if weight is not None else Tensor(inv)
    shift = -Tensor(running_mean) * scale
    if bias is not None:
        shift = shift + bias
    return x * scale.reshape(1, -1, 1, 1) + shift.reshape(1, -1, 1, 1)


def _bilinear_setup(h: int, w: int, flow: np.ndarray):
    """Sampling coordinates ``p - flow(p)`` clamped to the image, plus corner indices and weights."""
    gy, gx = np.mgrid[0:h, 0:w].astype(flow.dtype)
    x = gx - flow[:, 0]
    y = gy - flow[:, 1]
    xc = np.clip(x, 0.0, w - 1)
    yc = np.clip(y, 0.0, h - 1)
    inside_x = (x > 0.0) & (x < w - 1)
    inside_y = (y > 0.0) & (y < h - 1)
    x0 = np.minimum(np.floor(xc), max(w - 2, 0)).astype(np.intp)
    y0 = np.minimum(np.floor(yc), max(h - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = xc - x0
    wy = yc - y0
    return x0, x1, y0, y1, wx, wy, inside_x, inside_y


def bilinear_warp_array(src: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Plain-array backward warp: ``out(p) = src(p - flow(p))`` with edge clamping.

    ``src`` is (N, C, H, W) and ``flow`` is (N, 2, H, W) holding (u, v) in pixels.
    """
    return _warp_forward(src, flow)[0]


def _warp_forward(src, flow):
    n, c, h, w = src.shape
    x0, x1, y0, y1, wx, wy, ix, iy = _bilinear_setup(h, w, flow)
    bidx = np.arange(n)[:, None, None]
    # gather corners: shape (N, C, H, W)
    s00 = src[bidx, :, y0, x0].transpose(0, 3, 1, 2)
    s01 = src[bidx, :, y0, x1].transpose(0, 3, 1, 2)
    s10 = src[bidx, :, y1, x0].transpose(0, 3, 1, 2)
    s11 = src[bidx, :, y1, x1].transpose(0, 3, 1, 2)
    wx_, wy_ = wx[:, None], wy[:, None]
    out = (1 - wy_) * ((1 - wx_) * s00 + wx_ * s01) + wy_ * ((1 - wx_) * s10 + wx_ * s11)
    cache = (x0, x1, y0, y1, wx, wy, ix, iy, s00, s01, s10, s11)
    return out, cache


def warp(src, flow) -> Tensor:
    """Differentiable bilinear backward warp, see :func:`bilinear_warp_array`."""
    src, flow = as_tensor(src), as_tensor(flow)
    if src.ndim != 4 or flow.ndim != 4 or flow.shape[1] != 2:
        raise ValueError(f"warp: expected src (N,C,H,W) and flow (N,2,H,W), got {src.shape} and {flow.shape}")
    if src.shape[0] != flow.shape[0] or src.shape[2:] != flow.shape[2:]:
        raise ValueError(f"warp: flow extent {flow.shape} does not match source {src.shape}")
    n, c, h, w = src.shape
    out, (x0, x1, y0, y1, wx, wy, ix, iy, s00, s01, s10, s11) = _warp_forward(src.data, flow.data)

    def backward(g):
        gsrc = gflow = None
        if src.requires_grad:
            hw = h * w
            base = (np.arange(n)[:, None] * c + np.arange(c)[None, :]) * hw  # (N, C)
            acc = np.zeros(n * c * hw, dtype=g.dtype)
            wxe, wye = wx[:, None], wy[:, None]
            for yy, xx, wt in ((y0, x0, (1 - wye) * (1 - wxe)), (y0, x1, (1 - wye) * wxe),
                               (y1, x0, wye * (1 - wxe)), (y1, x1, wye * wxe)):
                idx = base[:, :, None, None] + (yy * w + xx)[:, None]
                acc += np.bincount(idx.ravel(), weights=(g * wt).ravel(), minlength=acc.size)
            gsrc = acc.reshape(n, c, h, w)
        if flow.requires_grad:
            wxe, wye = wx[:, None], wy[:, None]
            dx = (1 - wye) * (s01 - s00) + wye * (s11 - s10)
            dy = (1 - wxe) * (s10 - s00) + wxe * (s11 - s01)
            gu = -(g * dx).sum(axis=1) * ix
            gv = -(g * dy).sum(axis=1) * iy
            gflow = np.stack([gu, gv], axis=1)
        return gsrc, gflow

    return Tensor._make(out, (src, flow), backward, "warp")


def mse_loss(pred, target) -> Tensor:
    """Mean of squared differences."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        gp = g * 2.0 * diff / n
        return gp, -gp

    return Tensor._make(np.asarray((diff * diff).sum() / n), (pred, target), backward, "mse_loss")


def l1_loss(pred, target, normalizer: float | None = None) -> Tensor:
    """Sum of absolute differences divided by ``normalizer`` (default: element count)."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = float(diff.size if normalizer is None else normalizer)
    sign = np.sign(diff)

    def backward(g):
        gp = g * sign / n
        return gp, -gp

    return Tensor._make(np.asarray(np.abs(diff).sum() / n), (pred, target), backward, "l1_loss")
