"""Parameter containers and the layers used by the FAB networks."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor


class Module:
    """Base class: parameters are Tensor attributes, buffers are ndarray attributes."""

    training: bool = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, np.ndarray):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, target in list(params.items()) + [(k, v) for k, v in buffers.items()]:
            arr = target.data if isinstance(target, Tensor) else target
            value = np.asarray(state[name])
            if value.shape != arr.shape:
                raise ValueError(f"{name}: shape {value.shape} does not match model shape {arr.shape}")
            arr[...] = value

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place."""
        for m in self.modules():
            for name, value in vars(m).items():
                if isinstance(value, Tensor) and value.requires_grad:
                    value.data = value.data.astype(dtype)
                    value.grad = None
                elif isinstance(value, np.ndarray):
                    setattr(m, name, value.astype(dtype))
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 padding: int | None = None, bias: bool = True, rng: np.random.Generator | None = None,
                 zero_init: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        shape = (out_ch, in_ch, kernel, kernel)
        if zero_init:
            self.weight = Tensor(np.zeros(shape), requires_grad=True)
        else:
            self.weight = he_normal(rng, shape, in_ch * kernel * kernel)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None,
                 scale: float = 1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(scale * rng.normal(0.0, np.sqrt(1.0 / in_features), (out_features, in_features)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class InstanceNorm2d(Module):
    def __init__(self, channels: int):
        self.weight = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)

    def forward(self, x):
        return F.instance_norm(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1):
        self.weight = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum

    def forward(self, x):
        return F.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum)


def make_norm(kind: str | None, channels: int) -> Module | None:
    if kind == "instance":
        return InstanceNorm2d(channels)
    if kind == "batch":
        return BatchNorm2d(channels)
    if kind in (None, "none"):
        return None
    raise ValueError(f"unknown normalization {kind!r}")


class ResidualBlock(Module):
    """Pre-activation residual unit: (norm -> relu -> conv) x 2 plus a skip path.

    The skip is the identity when shapes agree and a 1x1 (strided) projection otherwise.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, norm: str | None = "instance",
                 rng: np.random.Generator | None = None, zero_init: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.norm1 = make_norm(norm, in_ch)
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, rng=rng)
        self.norm2 = make_norm(norm, out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, rng=rng, zero_init=zero_init)
        if in_ch != out_ch or stride != 1:
            self.proj = Conv2d(in_ch, out_ch, 1, stride, padding=0, bias=False, rng=rng)
        else:
            self.proj = None

    def skip(self, x):
        return self.proj(x) if self.proj is not None else x

    def forward(self, x):
        h = self.norm1(x) if self.norm1 is not None else x
        h = self.conv1(h.relu())
        h = self.norm2(h) if self.norm2 is not None else h
        h = self.conv2(h.relu())
        return h + self.skip(x)


def residual_block(x, block: ResidualBlock):
    """Functional alias: apply ``block`` to ``x``."""
    return block(x)
