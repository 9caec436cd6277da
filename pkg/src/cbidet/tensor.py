"""Dense float tensors with reverse-mode autodiff on a dynamically recorded tape.

Every numeric value in the package flows through :class:`Tensor`. Operations
record nodes on a thread-local :class:`GradTape` while grad mode is enabled;
``backward(loss)`` replays the recorded nodes in reverse order and accumulates
gradients into every ``requires_grad`` leaf reachable from ``loss``.

Tensors default to float64. A float32 path exists for speed (pass float32
arrays in); verification always runs in float64.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .errors import DimensionError, TapeError

__all__ = [
    "Tensor", "GradTape", "no_grad", "reset_tape", "backward",
    "tensor", "add", "sub", "mul", "div", "neg", "pow_", "exp", "log",
    "sqrt", "atan", "sigmoid", "silu", "relu", "maximum", "minimum", "clip",
    "sum_", "mean_", "reshape", "concat", "concat_channels", "split_channels",
    "matmul", "linear", "bce_with_logits", "log_softmax",
    "upsample_nearest_2x", "detach",
]


class _Node:
    """One recorded op: inputs, the produced tensor, and its backward rule."""

    __slots__ = ("inputs", "out", "backward_fn")

    def __init__(self, inputs, out, backward_fn):
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class GradTape:
    """Ordered record of op nodes for one thread of execution."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.used_roots: set[int] = set()

    def __len__(self):
        return len(self.nodes)


_state = threading.local()


def _tls():
    if not hasattr(_state, "tape"):
        _state.tape = GradTape()
        _state.grad_enabled = True
    return _state


def active_tape() -> GradTape:
    return _tls().tape


def reset_tape() -> None:
    """Drop all recorded nodes; allows a fresh backward pass."""
    _tls().tape = GradTape()


@contextmanager
def no_grad():
    """Disable tape recording inside the block (eval-mode forward)."""
    s = _tls()
    prev = s.grad_enabled
    s.grad_enabled = False
    try:
        yield
    finally:
        s.grad_enabled = prev


class Tensor:
    """N-dimensional float array with optional recorded gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_creator")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._creator = None

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_(self, p)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def detach(self):
        return detach(self)

    def backward(self):
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._creator is not None


def make_op(data: np.ndarray, inputs, backward_fn) -> Tensor:
    """Wrap an op result; record a tape node when grad mode is on.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    input, aligned with ``inputs``.
    """
    out = Tensor(data)
    s = _tls()
    if s.grad_enabled and any(_tracked(t) for t in inputs):
        node = _Node(tuple(inputs), out, backward_fn)
        s.tape.nodes.append(node)
        out._creator = node
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    ``loss`` must be a scalar produced by recorded ops on the current tape.
    Calling backward twice on the same loss without ``reset_tape`` raises.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._creator
    if node is None:
        raise TapeError("loss is detached from the tape (no recorded ops)")
    tape = active_tape()
    if id(loss) in tape.used_roots:
        raise TapeError("backward already ran for this loss; reset_tape() first")
    tape.used_roots.add(id(loss))

    grads: dict[int, np.ndarray] = {id(node): np.ones_like(loss.data)}
    # Reverse recording order is a valid topological order for a dynamic tape.
    for n in reversed(tape.nodes):
        g = grads.pop(id(n), None)
        if g is None:
            continue
        in_grads = n.backward_fn(g)
        for t, gi in zip(n.inputs, in_grads):
            if gi is None:
                continue
            if t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gi
            elif t._creator is not None:
                key = id(t._creator)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------

def _check_broadcast(sa, sb):
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        for i in range(1, max(len(sa), len(sb)) + 1):
            da = sa[-i] if i <= len(sa) else 1
            db = sb[-i] if i <= len(sb) else 1
            if da != db and da != 1 and db != 1:
                raise DimensionError(
                    f"axis {-i}: sizes {da} and {db} are not broadcastable "
                    f"(shapes {sa} vs {sb})"
                ) from None
        raise DimensionError(f"shapes {sa} and {sb} are not broadcastable") from None


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` by summing broadcast axes."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / binary ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)

    def bwd(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_op(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)

    def bwd(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_op(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bwd(g):
        return unbroadcast(g * bd, a.shape), unbroadcast(g * ad, b.shape)

    return make_op(ad * bd, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bwd(g):
        return (unbroadcast(g / bd, a.shape),
                unbroadcast(-g * ad / (bd * bd), b.shape))

    return make_op(ad / bd, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,))


def pow_(a, p: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = _as_tensor(a)
    ad = a.data

    def bwd(g):
        return (g * p * ad ** (p - 1),)

    return make_op(ad ** p, (a,), bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,))


def atan(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return make_op(np.arctan(ad), (a,), lambda g: (g / (1.0 + ad * ad),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Stable in both tails.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    return make_op(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    s = _sigmoid(ad)

    def bwd(g):
        return (g * (s + ad * s * (1.0 - s)),)

    return make_op(ad * s, (a,), bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return make_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    take_a = a.data >= b.data

    def bwd(g):
        return (unbroadcast(g * take_a, a.shape),
                unbroadcast(g * ~take_a, b.shape))

    return make_op(np.where(take_a, a.data, b.data), (a, b), bwd)


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient routes to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    take_a = a.data <= b.data

    def bwd(g):
        return (unbroadcast(g * take_a, a.shape),
                unbroadcast(g * ~take_a, b.shape))

    return make_op(np.where(take_a, a.data, b.data), (a, b), bwd)


def clip(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return make_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions / shape ops
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, shape).copy(),)

    return make_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= shape[ax]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / n, shape).copy(),)

    return make_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def _getitem(a: Tensor, idx) -> Tensor:
    fancy = isinstance(idx, (np.ndarray, list)) or (
        isinstance(idx, tuple) and any(isinstance(i, (np.ndarray, list)) for i in idx)
    )
    shape = a.shape

    def bwd(g):
        dx = np.zeros(shape, dtype=a.data.dtype)
        if fancy:
            np.add.at(dx, idx, g)
        else:
            dx[idx] += g
        return (dx,)

    out = a.data[idx]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    elif fancy:
        pass  # advanced indexing already copies
    else:
        out = out.copy()  # never alias input storage
    return make_op(out, (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return make_op(np.concatenate([t.data for t in tensors], axis=axis),
                   tuple(tensors), bwd)


def concat_channels(*tensors) -> Tensor:
    """Concatenate feature maps along the channel axis (axis -3)."""
    ndim = tensors[0].ndim if isinstance(tensors[0], Tensor) else np.ndim(tensors[0])
    for t in tensors:
        if t.ndim != ndim:
            raise DimensionError("concat_channels inputs must share rank")
    return concat(list(tensors), axis=ndim - 3)


def split_channels(a, sizes) -> list[Tensor]:
    """Inverse of concat_channels at the given channel sizes."""
    a = _as_tensor(a)
    axis = a.ndim - 3
    if sum(sizes) != a.shape[axis]:
        raise DimensionError(
            f"axis {axis}: split sizes {sizes} do not sum to {a.shape[axis]}")
    out = []
    start = 0
    for s in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + s)
        out.append(a[tuple(sl)])
        start += s
    return out


def upsample_nearest_2x(a) -> Tensor:
    """Double H and W by replication (nearest neighbor)."""
    a = _as_tensor(a)
    d = a.data
    out = d.repeat(2, axis=-2).repeat(2, axis=-1)
    h, w = d.shape[-2], d.shape[-1]

    def bwd(g):
        g = g.reshape(g.shape[:-2] + (h, 2, w, 2))
        return (g.sum(axis=(-3, -1)),)

    return make_op(out, (a,), bwd)


def detach(a) -> Tensor:
    """Return a tensor sharing data but cut from the tape."""
    a = _as_tensor(a)
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner dimension mismatch: {a.shape[-1]} vs {b.shape[0]}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return make_op(ad @ bd, (a, b), bwd)


def linear(x, weight, bias=None) -> Tensor:
    """Affine map on the last axis: x[..., D_in] @ W.T + b with W[D_out, D_in]."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    d_in = x.shape[-1]
    if weight.ndim != 2 or weight.shape[1] != d_in:
        raise DimensionError(
            f"linear weight must be (D_out, {d_in}), got {weight.shape}")
    xd = x.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, d_in)
    out = x2 @ weight.data.T
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(
                f"linear bias must be ({weight.shape[0]},), got {bias.shape}")
        out = out + bias.data
    wd = weight.data

    def bwd(g):
        g2 = g.reshape(-1, wd.shape[0])
        gx = (g2 @ wd).reshape(xd.shape)
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out.reshape(lead + (wd.shape[0],)), inputs, bwd)


# ---------------------------------------------------------------------------
# fused losses
# ---------------------------------------------------------------------------

def bce_with_logits(logits, target) -> Tensor:
    """Elementwise binary cross-entropy on raw logits (numerically stable).

    ``target`` is treated as a constant; no gradient flows to it.
    """
    logits = _as_tensor(logits)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    _check_broadcast(logits.shape, t.shape)
    x = logits.data
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid(x)

    def bwd(g):
        return (g * (s - t),)

    return make_op(out, (logits,), bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    xm = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(xm).sum(axis=axis, keepdims=True))
    out = xm - lse
    soft = np.exp(out)

    def bwd(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (a,), bwd)
