"""Detector building blocks: Conv+BN+SiLU, Bottleneck, C3, SPPF.

A tiny Module system (attribute-scanned, insertion-ordered) provides
parameter discovery, train/eval mode, and named state for checkpoints.
"""

from __future__ import annotations

import numpy as np

from . import nnops, tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


def _uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base class with attribute-scanned children and parameters."""

    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    # -- discovery ----------------------------------------------------------
    def _items(self):
        for name, val in self.__dict__.items():
            if name == "training":
                continue
            yield name, val

    def named_children(self):
        for name, val in self._items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, val in self._items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
        for name, child in self.named_children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name in getattr(self, "_buffer_names", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.named_children():
            yield from child.named_buffers(prefix + name + ".")

    def state_tensors(self) -> dict[str, np.ndarray]:
        """All named state (parameters then buffers) as plain arrays."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update({name: b for name, b in self.named_buffers()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = {name: p for name, p in self.named_parameters()}
        bufs = dict(self.named_buffers())
        for name, arr in state.items():
            if name in own:
                tgt = own[name]
                if tuple(tgt.shape) != tuple(arr.shape):
                    raise DimensionError(
                        f"state {name!r}: shape {arr.shape} != expected {tgt.shape}")
                tgt.data[...] = arr
            elif name in bufs:
                bufs[name][...] = arr
            else:
                raise KeyError(f"unknown state tensor {name!r}")
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state is missing tensors: {sorted(missing)}")

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self.named_children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-3, momentum: float = 0.03,
                 dtype=np.float64):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    def forward(self, x):
        return nnops.batchnorm2d(x, self.gamma, self.beta, self.running_mean,
                                 self.running_var, training=self.training,
                                 momentum=self.momentum, eps=self.eps)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float64):
        super().__init__()
        self.weight = Tensor(_uniform_init(rng, (d_out, d_in), d_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """Raw convolution (optional bias, no norm, no activation)."""

    def __init__(self, c1: int, c2: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, bias: bool = True,
                 dtype=np.float64):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        fan_in = c1 * k * k
        self.weight = Tensor(_uniform_init(rng, (c2, c1, k, k), fan_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c2, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x):
        return nnops.conv2d(x, self.weight, self.bias,
                            stride=self.stride, padding=self.padding)


class ConvBNAct(Module):
    """Conv (no bias) -> BatchNorm -> SiLU, the standard detector conv unit."""

    def __init__(self, c1: int, c2: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, dtype=np.float64):
        super().__init__()
        self.conv = Conv2d(c1, c2, k, rng, stride=stride, padding=padding,
                           bias=False, dtype=dtype)
        self.bn = BatchNorm2d(c2, dtype=dtype)

    def forward(self, x):
        return T.silu(self.bn(self.conv(x)))


class Bottleneck(Module):
    """1x1 squeeze to C/2, 3x3 expand back to C, optional residual add."""

    def __init__(self, channels: int, rng: np.random.Generator,
                 shortcut: bool = True, dtype=np.float64):
        super().__init__()
        hidden = max(1, channels // 2)
        self.cv1 = ConvBNAct(channels, hidden, 1, rng, dtype=dtype)
        self.cv2 = ConvBNAct(hidden, channels, 3, rng, dtype=dtype)
        self.shortcut = shortcut

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return x + y if self.shortcut else y


class C3(Module):
    """CSP-style block: two 1x1 branches, bottleneck stack, concat, 1x1 merge."""

    def __init__(self, c1: int, c2: int, n: int, rng: np.random.Generator,
                 shortcut: bool = True, dtype=np.float64):
        super().__init__()
        if n < 1:
            raise ConfigError(f"C3 needs repeats >= 1, got {n}")
        hidden = max(1, c2 // 2)
        self.cv1 = ConvBNAct(c1, hidden, 1, rng, dtype=dtype)
        self.cv2 = ConvBNAct(c1, hidden, 1, rng, dtype=dtype)
        self.m = [Bottleneck(hidden, rng, shortcut=shortcut, dtype=dtype)
                  for _ in range(n)]
        self.cv3 = ConvBNAct(2 * hidden, c2, 1, rng, dtype=dtype)

    def forward(self, x):
        y = self.cv1(x)
        for blk in self.m:
            y = blk(y)
        return self.cv3(T.concat_channels(y, self.cv2(x)))


class SPPF(Module):
    """Spatial pyramid pooling (fast): three chained same-padding max pools."""

    def __init__(self, c1: int, c2: int, rng: np.random.Generator,
                 pool_k: int = 5, dtype=np.float64):
        super().__init__()
        if pool_k % 2 == 0:
            raise ConfigError(f"SPPF pool kernel must be odd, got {pool_k}")
        hidden = max(1, c1 // 2)
        self.cv1 = ConvBNAct(c1, hidden, 1, rng, dtype=dtype)
        self.cv2 = ConvBNAct(4 * hidden, c2, 1, rng, dtype=dtype)
        self.pool_k = pool_k

    def forward(self, x):
        y0 = self.cv1(x)
        pad = self.pool_k // 2
        y1 = nnops.pool2d(y0, "max", self.pool_k, 1, pad)
        y2 = nnops.pool2d(y1, "max", self.pool_k, 1, pad)
        y3 = nnops.pool2d(y2, "max", self.pool_k, 1, pad)
        return self.cv2(T.concat_channels(y0, y1, y2, y3))
