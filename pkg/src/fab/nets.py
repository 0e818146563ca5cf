"""Structure predictor, structure-aware deblurring network and landmark detector."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import functional as F
from .autodiff.nn import BatchNorm2d, Conv2d, InstanceNorm2d, Linear, Module, ResidualBlock
from .autodiff.tensor import Tensor, as_tensor, clip, concat, softmax
from .flow import FlowField
from .geometry import BoundaryMap, LandmarkSet, MarkupScheme


# -- structure predictor ------------------------------------------------------

class Hourglass(Module):
    """Recursive hourglass: a full-resolution branch plus a pooled branch, summed after upsampling."""

    def __init__(self, depth: int, width: int, rng: np.random.Generator, norm: str = "instance"):
        self.depth = depth
        self.up1 = ResidualBlock(width, width, norm=norm, rng=rng)
        self.low1 = ResidualBlock(width, width, norm=norm, rng=rng)
        if depth > 1:
            self.low2 = Hourglass(depth - 1, width, rng, norm)
        else:
            self.low2 = ResidualBlock(width, width, norm=norm, rng=rng)
        self.low3 = ResidualBlock(width, width, norm=norm, rng=rng)

    def forward(self, x):
        up = self.up1(x)
        low = self.low3(self.low2(self.low1(F.avg_pool2d(x, 2))))
        return up + F.upsample2x(low)


def count_residual_blocks(module: Module) -> int:
    return sum(isinstance(m, ResidualBlock) for m in module.modules())


@dataclass
class PredictorConfig:
    width: int = 32
    depth: int = 2
    flow_scale: float = 1.0
    seed: int = 0


class StructurePredictor(Module):
    """Hourglass H predicting per-frame flow between two boundary maps, and warping block W.

    A depth-2 hourglass plus one entry block uses eight residual blocks.
    """

    def __init__(self, config: PredictorConfig | None = None):
        self.config = config or PredictorConfig()
        c = self.config
        rng = np.random.default_rng(c.seed)
        self.stem = Conv2d(2, c.width, 3, rng=rng)
        self.entry = ResidualBlock(c.width, c.width, norm="instance", rng=rng)
        self.hourglass = Hourglass(c.depth, c.width, rng)
        self.head_norm = InstanceNorm2d(c.width)
        self.head = Conv2d(c.width, 2, 3, rng=rng, zero_init=True)

    @property
    def min_divisor(self) -> int:
        return 2 ** self.config.depth

    def forward(self, e_prev2, e_prev1) -> Tensor:
        """(N,1,H,W) x 2 -> flow (N,2,H,W) in pixels per frame."""
        e_prev2, e_prev1 = as_tensor(e_prev2), as_tensor(e_prev1)
        if e_prev2.shape != e_prev1.shape:
            raise ValueError(f"boundary maps differ in shape: {e_prev2.shape} vs {e_prev1.shape}")
        h, w = e_prev1.shape[-2:]
        if h % self.min_divisor or w % self.min_divisor:
            raise ValueError(f"resolution {h}x{w} must be divisible by {self.min_divisor}")
        x = self.stem(concat([e_prev2, e_prev1], axis=1))
        x = self.hourglass(self.entry(x))
        flow = self.head(self.head_norm(x).relu())
        return flow * self.config.flow_scale if self.config.flow_scale != 1.0 else flow

    def manifest(self) -> dict:
        return {"kind": "structure_predictor", **asdict(self.config)}


def warp_structure(e_prev2, e_prev1, flow) -> Tensor:
    """W: average of E_{t-1} warped by F and E_{t-2} warped by 2F (constant-velocity extrapolation)."""
    e_prev2, e_prev1, flow = as_tensor(e_prev2), as_tensor(e_prev1), as_tensor(flow)
    out = (F.warp(e_prev1, flow) + F.warp(e_prev2, flow * 2.0)) * 0.5
    return clip(out, 0.0, 1.0)


def _as_batch(x) -> Tensor:
    """Accept a BoundaryMap / (H,W) / (N,1,H,W) and return an (N,1,H,W) tensor."""
    if isinstance(x, Tensor):
        return x if x.ndim == 4 else x.reshape(1, 1, *x.shape[-2:])
    arr = np.asarray(getattr(x, "grid", x), dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    return Tensor(arr)


def predict_structure(e_prev2, e_prev1, model: StructurePredictor):
    """Return ``(flow, E_t)``; plain inputs give ``(FlowField, BoundaryMap)``, tensors stay tensors."""
    tensor_mode = isinstance(e_prev1, Tensor)
    a, b = _as_batch(e_prev2), _as_batch(e_prev1)
    if a.shape != b.shape:
        raise ValueError(f"boundary map resolution mismatch: {a.shape[-2:]} vs {b.shape[-2:]}")
    flow = model(a, b)
    e_t = warp_structure(a, b, flow)
    if tensor_mode:
        return flow, e_t
    return FlowField(flow.data[0, 0], flow.data[0, 1]), BoundaryMap(e_t.data[0, 0].copy())


def structure_loss(e_t, e_gt) -> Tensor:
    """Mean squared error between predicted and target boundary maps."""
    return F.mse_loss(_as_batch(e_t) if not isinstance(e_t, Tensor) else e_t,
                      _as_batch(e_gt) if not isinstance(e_gt, Tensor) else e_gt)


# -- deblurring network ---------------------------------------------------------

class TemporalBlend(Module):
    """Per-pixel, per-channel convex combination of three feature stacks (1x1 conv + softmax)."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.channels = channels
        self.logits = Conv2d(3 * channels, 3 * channels, 1, padding=0, rng=rng)
        self.logits.weight.data *= 0.1

    def weights(self, feats) -> Tensor:
        n, c, h, w = feats[0].shape
        z = self.logits(concat(list(feats), axis=1)).reshape(n, 3, c, h, w)
        return softmax(z, axis=1)

    def forward(self, feats, weights: Tensor | None = None):
        return blend_with_weights(feats, weights if weights is not None else self.weights(feats))


def blend_with_weights(feats, weights: Tensor) -> Tensor:
    n, c, h, w = feats[0].shape
    stacked = concat([f.reshape(n, 1, c, h, w) for f in feats], axis=1)
    return (stacked * weights).sum(axis=1)


def temporal_blend(features, model: TemporalBlend) -> Tensor:
    feats = [as_tensor(f) for f in features]
    if len(feats) != 3 or any(f.shape != feats[0].shape for f in feats):
        raise ValueError("temporal_blend needs three equal-shape feature stacks")
    return model(feats)


@dataclass
class DeblurConfig:
    width: int = 32
    use_structure: bool = True
    seed: int = 0


class DeblurNet(Module):
    """Encoder (2 convs + 4 residual blocks) shared over the three frames, temporal blending,
    and a mirrored decoder predicting the residual added to the newest frame."""

    def __init__(self, config: DeblurConfig | None = None):
        self.config = config or DeblurConfig()
        c = self.config
        rng = np.random.default_rng(c.seed)
        w = c.width
        self.enc_conv1 = Conv2d(2, w, 3, rng=rng)
        self.enc_conv2 = Conv2d(w, 2 * w, 3, stride=2, rng=rng)
        self.enc_blocks = [ResidualBlock(2 * w, 2 * w, norm="instance", rng=rng) for _ in range(4)]
        self.blend = TemporalBlend(2 * w, rng)
        self.dec_blocks = [ResidualBlock(2 * w, 2 * w, norm="instance", rng=rng) for _ in range(4)]
        self.dec_conv1 = Conv2d(2 * w, w, 3, rng=rng)
        self.dec_conv2 = Conv2d(w, 1, 3, rng=rng, zero_init=True)

    def forward(self, e_t, i_prev2, i_prev1, i_t) -> Tensor:
        e_t, frames = as_tensor(e_t), [as_tensor(i) for i in (i_prev2, i_prev1, i_t)]
        shape = frames[2].shape
        if any(f.shape != shape for f in frames) or e_t.shape != shape:
            raise ValueError(f"deblur inputs must share one extent, got {[f.shape for f in frames]} and {e_t.shape}")
        if shape[-1] % 2 or shape[-2] % 2:
            raise ValueError(f"frame extent {shape[-2:]} must be even")
        n = shape[0]
        if not self.config.use_structure:
            e_t = Tensor(np.zeros(shape))
        # the three frames share the encoder: stack them along the batch axis
        x = concat([concat([e_t, f], axis=1) for f in frames], axis=0)
        full = self.enc_conv1(x).relu()
        h = self.enc_conv2(full)
        for block in self.enc_blocks:
            h = block(h)
        feats = [h[k * n : (k + 1) * n] for k in range(3)]
        h = self.blend(feats)
        for block in self.dec_blocks:
            h = block(h)
        h = self.dec_conv1(F.upsample2x(h).relu()) + full[2 * n : 3 * n]
        residual = self.dec_conv2(h.relu())
        return clip(frames[2] + residual, 0.0, 1.0)

    def manifest(self) -> dict:
        return {"kind": "deblur", **asdict(self.config)}


def deblur(e_t, i_prev2, i_prev1, i_t, model: DeblurNet):
    """S_t = D(E_t, I_{t-2}, I_{t-1}, I_t); plain arrays in, plain array out."""
    tensor_mode = isinstance(i_t, Tensor)
    args = [_as_batch(x) for x in (e_t, i_prev2, i_prev1, i_t)]
    if len({a.shape for a in args}) != 1:
        raise ValueError(f"deblur resolution mismatch: {[a.shape[-2:] for a in args]}")
    out = model(*args)
    return out if tensor_mode else out.data[0, 0].copy()


# -- landmark detector ------------------------------------------------------------

@dataclass
class DetectorConfig:
    n_points: int = 68
    width: int = 8
    resolution: tuple[int, int] = (32, 32)
    blocks_per_stage: int = 2
    stages: int = 4
    head: str = "flatten"
    seed: int = 0


class LandmarkDetector(Module):
    """Reduced pre-activation ResNet-18: four stages of two residual blocks, batch normalisation,
    and a linear head regressing 2 * n_points coordinates normalised to the crop."""

    def __init__(self, config: DetectorConfig | None = None, mean_shape: np.ndarray | None = None):
        self.config = config or DetectorConfig()
        c = self.config
        rng = np.random.default_rng(c.seed)
        self.stem = Conv2d(1, c.width, 3, rng=rng)
        blocks = []
        ch = c.width
        for s in range(c.stages):
            out_ch = c.width * 2**s
            for b in range(c.blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(ResidualBlock(ch, out_ch, stride=stride, norm="batch", rng=rng))
                ch = out_ch
        self.blocks = blocks
        self.final_norm = BatchNorm2d(ch)
        h, w = c.resolution
        div = 2 ** (c.stages - 1)
        if h % div or w % div:
            raise ValueError(f"detector resolution {c.resolution} must be divisible by {div}")
        feat = ch if c.head == "gap" else ch * (h // div) * (w // div)
        self.fc = Linear(feat, 2 * c.n_points, rng=rng, scale=0.1)
        if mean_shape is not None:
            self.fc.bias.data[:] = np.asarray(mean_shape, dtype=np.float64).reshape(-1)
        else:
            self.fc.bias.data[:] = 0.5

    def forward(self, x) -> Tensor:
        """(N,1,H,W) frames -> (N, n_points, 2) coordinates normalised by the crop size."""
        x = as_tensor(x)
        if tuple(x.shape[-2:]) != tuple(self.config.resolution):
            raise ValueError(f"detector expects {self.config.resolution} input, got {x.shape[-2:]}")
        h = self.stem(x)
        for block in self.blocks:
            h = block(h)
        h = self.final_norm(h).relu()
        h = F.global_avg_pool(h) if self.config.head == "gap" else h.reshape(h.shape[0], -1)
        return self.fc(h).reshape(x.shape[0], self.config.n_points, 2)

    def to_pixels(self, coords):
        """Normalised (x, y) -> pixel units of the crop."""
        h, w = self.config.resolution
        return coords * np.array([w, h], dtype=np.float64)

    def manifest(self) -> dict:
        d = asdict(self.config)
        d["resolution"] = list(d["resolution"])
        return {"kind": "detector", **d}


def detect_landmarks(frame, model: LandmarkDetector, scheme: MarkupScheme):
    """Run the detector; arrays give a LandmarkSet in pixel units, tensors give (N, n_points, 2) pixels."""
    if isinstance(frame, Tensor):
        return model.to_pixels(model(_as_batch(frame)))
    out = model(_as_batch(frame))
    pts = model.to_pixels(out).data[0]
    return LandmarkSet(pts, scheme)


def alignment_loss(l_t, l_gt, n_points: int | None = None) -> Tensor:
    """Sum of absolute coordinate errors divided by the landmark count (and batch size)."""
    if isinstance(l_t, LandmarkSet) or isinstance(l_gt, LandmarkSet):
        if isinstance(l_t, LandmarkSet) and isinstance(l_gt, LandmarkSet) and l_t.scheme != l_gt.scheme:
            raise ValueError(f"scheme mismatch: {l_t.scheme.name} vs {l_gt.scheme.name}")
        l_t = l_t.points if isinstance(l_t, LandmarkSet) else l_t
        l_gt = l_gt.points if isinstance(l_gt, LandmarkSet) else l_gt
    l_t, l_gt = as_tensor(l_t), as_tensor(l_gt)
    if l_t.shape != l_gt.shape:
        raise ValueError(f"landmark shape mismatch {l_t.shape} vs {l_gt.shape}")
    if n_points is None:
        n_points = l_t.size // 2
    return F.l1_loss(l_t, l_gt, normalizer=n_points)


def reconstruction_loss(s_t, s_gt) -> Tensor:
    return F.mse_loss(s_t, s_gt)


MODEL_KINDS = {"structure_predictor": (StructurePredictor, PredictorConfig),
               "deblur": (DeblurNet, DeblurConfig),
               "detector": (LandmarkDetector, DetectorConfig)}


def build_from_manifest(manifest: dict) -> Module:
    kind = manifest.get("kind")
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r} in manifest")
    cls, cfg_cls = MODEL_KINDS[kind]
    fields = {k: v for k, v in manifest.items() if k != "kind"}
    if "resolution" in fields:
        fields["resolution"] = tuple(fields["resolution"])
    try:
        cfg = cfg_cls(**fields)
    except TypeError as exc:
        raise ValueError(f"manifest field mismatch for {kind}: {exc}") from exc
    return cls(cfg)


def save_model(path, model: Module):
    from .autodiff.checkpoint import save_checkpoint

    return save_checkpoint(path, model.state_dict(), model.manifest())


def load_model(path, kind: str | None = None) -> Module:
    """Rebuild a network from a self-describing checkpoint."""
    from .autodiff.checkpoint import load_checkpoint

    state, manifest = load_checkpoint(path)
    if kind is not None and manifest.get("kind") != kind:
        raise ValueError(f"{path}: manifest field 'kind' is {manifest.get('kind')!r}, expected {kind!r}")
    model = build_from_manifest(manifest)
    model.load_state_dict(state)
    return model
