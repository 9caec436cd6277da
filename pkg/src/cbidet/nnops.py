"""Convolution, pooling and batch-norm primitives on top of the tensor core.

Spatial ops accept [C,H,W] or [N,C,H,W]; unbatched inputs are treated as a
batch of one and returned unbatched. All convolutions are square-kernel,
correlation-style (no kernel flip), float row-major.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, PreconditionError
from .tensor import Tensor, _as_tensor, make_op

__all__ = [
    "conv2d", "pool2d", "global_pool_spatial", "global_pool_channel",
    "batchnorm2d", "conv_out_size",
]


def conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _check_window(h, w, k, stride, padding):
    if k < 1 or stride < 1 or padding < 0:
        raise PreconditionError(
            f"need k >= 1, stride >= 1, padding >= 0; got k={k} stride={stride} padding={padding}")
    if h + 2 * padding < k:
        raise DimensionError(
            f"axis -2: H={h} with padding {padding} is smaller than kernel {k}")
    if w + 2 * padding < k:
        raise DimensionError(
            f"axis -1: W={w} with padding {padding} is smaller than kernel {k}")


def _batched(x: Tensor):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"expected 3 or 4 dims [*,C,H,W], got shape {x.shape}")


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    col = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            col[:, :, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
    return col


def _col2im(dcol: np.ndarray, xp_shape, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    dxp = np.zeros(xp_shape, dtype=dcol.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcol[:, :, i, j]
    return dxp


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution: x[*,C_in,H,W] * weight[C_out,C_in,k,k] (+ bias[C_out])."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    xd, squeeze = _batched(x)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"weight must be [C_out,C_in,k,k], got {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    n, c, h, w = xd.shape
    if c != c_in:
        raise DimensionError(
            f"axis -3: input has {c} channels but weight expects {c_in}")
    _check_window(h, w, k, stride, padding)
    ho = conv_out_size(h, k, stride, padding)
    wo = conv_out_size(w, k, stride, padding)

    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    col = _im2col(xp, k, stride, ho, wo).reshape(n, c_in * k * k, ho * wo)
    w2 = weight.data.reshape(c_out, -1)
    out = np.matmul(w2, col)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"bias must be ({c_out},), got {bias.shape}")
        out = out + bias.data[:, None]
    out = out.reshape(n, c_out, ho, wo)
    xp_shape = xp.shape

    def bwd(g):
        if g.ndim == 3:
            g = g[None]
        g2 = g.reshape(n, c_out, ho * wo)
        # col is rebuilt lazily only if it was dropped; here we keep it closed over
        gw = np.matmul(g2, col.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        dcol = np.matmul(w2.T, g2).reshape(n, c_in, k, k, ho, wo)
        dxp = _col2im(dcol, xp_shape, k, stride, ho, wo)
        if padding:
            dx = dxp[:, :, padding:padding + h, padding:padding + w]
        else:
            dx = dxp
        if squeeze:
            dx = dx[0]
        if bias is None:
            return dx, gw
        return dx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out[0] if squeeze else out, inputs, bwd)


def pool2d(x, kind: str, k: int, stride: int, padding: int = 0) -> Tensor:
    """Windowed max/avg pooling per channel.

    Max pooling pads with -inf and routes the gradient to the first maximum
    in row-major window order; avg pooling pads with zeros and always divides
    by k*k.
    """
    if kind not in ("max", "avg"):
        raise PreconditionError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    x = _as_tensor(x)
    xd, squeeze = _batched(x)
    n, c, h, w = xd.shape
    _check_window(h, w, k, stride, padding)
    ho = conv_out_size(h, k, stride, padding)
    wo = conv_out_size(w, k, stride, padding)

    fill = -np.inf if kind == "max" else 0.0
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=fill)
    else:
        xp = xd
    col = _im2col(xp, k, stride, ho, wo).reshape(n, c, k * k, ho, wo)
    xp_shape = xp.shape

    if kind == "max":
        arg = col.argmax(axis=2)
        out = np.take_along_axis(col, arg[:, :, None], axis=2)[:, :, 0]
    else:
        out = col.sum(axis=2) / (k * k)

    def bwd(g):
        if g.ndim == 3:
            g = g[None]
        if kind == "max":
            dcol = np.zeros((n, c, k * k, ho, wo), dtype=g.dtype)
            np.put_along_axis(dcol, arg[:, :, None], g[:, :, None], axis=2)
        else:
            dcol = np.broadcast_to(g[:, :, None] / (k * k),
                                   (n, c, k * k, ho, wo)).copy()
        dxp = _col2im(dcol.reshape(n, c, k, k, ho, wo), xp_shape, k, stride, ho, wo)
        if padding:
            dx = dxp[:, :, padding:padding + h, padding:padding + w]
        else:
            dx = dxp
        return (dx[0] if squeeze else dx,)

    return make_op(out[0] if squeeze else out, (x,), bwd)


def global_pool_spatial(x, kind: str) -> Tensor:
    """Reduce H and W to 1x1 per channel (max routes to first occurrence)."""
    x = _as_tensor(x)
    if x.ndim < 3:
        raise DimensionError(f"expected [*,C,H,W], got shape {x.shape}")
    d = x.data
    lead = d.shape[:-2]
    h, w = d.shape[-2:]
    flat = d.reshape(lead + (h * w,))
    if kind == "avg":
        out = flat.mean(axis=-1)

        def bwd(g):
            g = g.reshape(lead + (1, 1))
            return (np.broadcast_to(g / (h * w), d.shape).copy(),)
    elif kind == "max":
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

        def bwd(g):
            dflat = np.zeros_like(flat)
            np.put_along_axis(dflat, arg[..., None],
                              g.reshape(lead + (1,)), axis=-1)
            return (dflat.reshape(d.shape),)
    else:
        raise PreconditionError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    return make_op(out.reshape(lead + (1, 1)), (x,), bwd)


def global_pool_channel(x, kind: str) -> Tensor:
    """Reduce the channel axis to size 1, keeping H and W."""
    x = _as_tensor(x)
    if x.ndim < 3:
        raise DimensionError(f"expected [*,C,H,W], got shape {x.shape}")
    d = x.data
    ax = d.ndim - 3
    if kind == "avg":
        out = d.mean(axis=ax, keepdims=True)
        c = d.shape[ax]

        def bwd(g):
            return (np.broadcast_to(g / c, d.shape).copy(),)
    elif kind == "max":
        arg = d.argmax(axis=ax)
        out = np.take_along_axis(d, np.expand_dims(arg, ax), axis=ax)

        def bwd(g):
            dd = np.zeros_like(d)
            np.put_along_axis(dd, np.expand_dims(arg, ax), g, axis=ax)
            return (dd,)
    else:
        raise PreconditionError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    return make_op(out, (x,), bwd)


def batchnorm2d(x, gamma, beta, running_mean, running_var,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over (N,H,W) per channel.

    Train mode normalizes by batch statistics (biased variance) and updates
    the running buffers in place (unbiased variance, torch convention).
    Eval mode normalizes by the running buffers.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects [N,C,H,W], got shape {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"axis -3: gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    xd = x.data
    axes = (0, 2, 3)
    m = n * h * w

    if training:
        if m < 2:
            raise PreconditionError(
                "batchnorm train mode needs at least 2 elements per channel over (N,H,W)")
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mean
        running_var *= (1.0 - momentum)
        running_var += momentum * var * (m / (m - 1))
    else:
        mean = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[:, None, None]) * inv_std[:, None, None]
    out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def bwd(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        scale = (gamma.data * inv_std)[:, None, None]
        if training:
            gm = g.mean(axis=axes)[:, None, None]
            gxm = (g * xhat).mean(axis=axes)[:, None, None]
            gx = scale * (g - gm - xhat * gxm)
        else:
            gx = scale * g
        return gx, ggamma, gbeta

    return make_op(out, (x, gamma, beta), bwd)
