"""Dense tensors with reverse-mode automatic differentiation.

The graph is define-by-run: differentiable ops executed while a Tape is
active append a backward closure to the tape, and ``backward`` replays the
closures in exact reverse execution order. Tensors are treated as immutable
once produced (ops always allocate fresh output buffers and never write to
their inputs). Parameters own mutable value/grad buffers that optimizers
update in place between tape recordings.

Shapes are only as general as the model needs: matrices, stacks of matrices
with identical leading axes, and last-axis broadcasting of vectors/scalars.
"""

from __future__ import annotations

import logging
import math

import numpy as np

from .errors import DegenerateBatchError, TapeError

_log = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32


class Tensor:
    """Immutable dense array of floats, optionally tracked on the active tape."""

    __slots__ = ("data", "node")

    def __init__(self, data, dtype=None, node=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.node = node

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


class Parameter:
    """Learnable array with an accumulated gradient buffer.

    ``decay`` marks affine weight matrices eligible for decoupled weight
    decay; gains, biases and scale scalars keep it off.
    """

    __slots__ = ("name", "value", "grad", "trainable", "decay")

    def __init__(self, value, name="", trainable=True, decay=False):
        self.value = np.array(value, dtype=np.asarray(value).dtype, copy=True)
        self.grad = np.zeros_like(self.value)
        self.name = name
        self.trainable = trainable
        self.decay = decay

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class _Node:
    """Gradient slot for one tensor tracked on a tape."""

    __slots__ = ("grad",)

    def __init__(self):
        self.grad = None


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    A tape can be consumed by ``backward`` exactly once; re-running requires
    re-recording the forward pass.
    """

    def __init__(self):
        self._records = []  # (output node, ((input node, vjp), ...))
        self._param_nodes = {}  # id(Parameter) -> (Parameter, node)
        self._spent = False

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        assert popped is self
        return False

    def _node_for(self, param: Parameter) -> _Node:
        entry = self._param_nodes.get(id(param))
        if entry is None:
            entry = (param, _Node())
            self._param_nodes[id(param)] = entry
        return entry[1]

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(param) into every trainable parameter used."""
        if self._spent:
            raise TapeError("backward already ran on this tape; re-record the forward pass")
        if loss.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        self._spent = True
        if loss.node is not None:
            loss.node.grad = np.ones_like(loss.data)
            for out_node, pulls in reversed(self._records):
                g = out_node.grad
                if g is None:
                    continue
                for in_node, vjp in pulls:
                    piece = vjp(g)
                    if in_node.grad is None:
                        in_node.grad = piece
                    else:
                        in_node.grad = in_node.grad + piece
                out_node.grad = None
        for param, node in self._param_nodes.values():
            if node.grad is not None:
                param.grad += node.grad.reshape(param.value.shape)


def backward(loss: Tensor, tape: Tape):
    tape.backward(loss)


def _active_tape():
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _wrap(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        tape = _active_tape()
        node = tape._node_for(x) if (tape is not None and x.trainable) else None
        return Tensor(x.value, node=node)
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _emit(out_data, pulls):
    """Build the output tensor, recording vjps for tracked inputs."""
    tape = _active_tape()
    node = None
    if tape is not None:
        tracked = tuple((t.node, vjp) for t, vjp in pulls if t.node is not None)
        if tracked:
            node = _Node()
            tape._records.append((node, tracked))
    return Tensor(out_data, node=node)


def _sum_to(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient down to a broadcast operand's shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product. Supports 2-D operands, a stacked left operand against
    a 2-D right operand, and stacks with identical leading axes."""
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul needs matrices, got shapes {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {ad.shape} @ {bd.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"matmul leading axes disagree: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def pull_a(g):
        return g @ np.swapaxes(bd, -1, -2)

    if bd.ndim == 2 and ad.ndim > 2:
        def pull_b(g):
            k = ad.shape[-1]
            return ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
    else:
        def pull_b(g):
            return np.swapaxes(ad, -1, -2) @ g

    return _emit(out, [(a, pull_a), (b, pull_b)])


def add(a, b) -> Tensor:
    """Elementwise sum; the right operand may be a last-axis vector or scalar."""
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    out = a.data + b.data
    a_shape, b_shape = a.data.shape, b.data.shape
    return _emit(out, [
        (a, lambda g: _sum_to(g, a_shape)),
        (b, lambda g: _sum_to(g, b_shape)),
    ])


def mul(a, b) -> Tensor:
    """Elementwise product; either operand may broadcast from a vector/scalar."""
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    ad, bd = a.data, b.data
    out = ad * bd
    return _emit(out, [
        (a, lambda g: _sum_to(g * bd, ad.shape)),
        (b, lambda g: _sum_to(g * ad, bd.shape)),
    ])


def neg(x) -> Tensor:
    x = _wrap(x)
    return _emit(-x.data, [(x, lambda g: -g)])


# ---------------------------------------------------------------------------
# activations and pointwise maps


def relu(x) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0), [(x, lambda g: g * mask)])


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit(out, [(x, lambda g: g * out * (1.0 - out))])


def log(x) -> Tensor:
    x = _wrap(x)
    if np.any(x.data <= 0):
        raise ValueError("log requires strictly positive inputs")
    xd = x.data
    return _emit(np.log(xd), [(x, lambda g: g / xd)])


def pow_const(x, exponent: float) -> Tensor:
    """x**c for a fixed exponent; inputs must be nonnegative for fractional c."""
    x = _wrap(x)
    xd = x.data
    c = float(exponent)
    if c == 0.0:
        out = np.ones_like(xd)
        return _emit(out, [(x, lambda g: np.zeros_like(g))])
    out = xd ** c
    return _emit(out, [(x, lambda g: g * c * xd ** (c - 1.0))])


def clamp(x, lo=None, hi=None) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input was inside."""
    x = _wrap(x)
    xd = x.data
    out = np.clip(xd, lo, hi)
    inside = np.ones_like(xd, dtype=bool)
    if lo is not None:
        inside &= xd > lo
    if hi is not None:
        inside &= xd < hi
    return _emit(out, [(x, lambda g: g * inside)])


def dropout(x, p: float, mode: str, rng) -> Tensor:
    """Inverted dropout: train mode zeroes with probability p and rescales
    survivors by 1/(1-p); eval mode is the identity. ``rng`` is an integer
    seed or a numpy Generator, so masks are reproducible."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    x = _wrap(x)
    if mode == "eval" or p == 0.0:
        return x
    if mode != "train":
        raise ValueError(f"unknown dropout mode {mode!r}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = rng.random(x.shape) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    factor = keep * scale
    return _emit(x.data * factor, [(x, lambda g: g * factor)])


# ---------------------------------------------------------------------------
# normalizations


def softmax_last(x, scale=1.0) -> Tensor:
    """Softmax over the last axis of x / scale, computed in shifted form.

    ``scale`` may be a positive float or a positive scalar Tensor/Parameter
    (gradient flows into it in the latter case).
    """
    x = _wrap(x)
    scale_t = scale if isinstance(scale, (Tensor, Parameter)) else None
    if scale_t is not None:
        scale_t = _wrap(scale_t, x.dtype)
        if scale_t.size != 1:
            raise ValueError("softmax scale must be a scalar")
        s = float(scale_t.data.reshape(-1)[0])
    else:
        s = float(scale)
    if not s > 0:
        raise ValueError(f"softmax scale must be positive, got {s}")
    u = x.data / s
    u = u - u.max(axis=-1, keepdims=True)
    e = np.exp(u)
    out = e / e.sum(axis=-1, keepdims=True)

    def pull_u(g):
        return out * (g - (g * out).sum(axis=-1, keepdims=True))

    pulls = [(x, lambda g: pull_u(g) / s)]
    if scale_t is not None:
        xd = x.data
        pulls.append((scale_t, lambda g: np.asarray(
            [-(pull_u(g) * xd).sum() / (s * s)], dtype=xd.dtype).reshape(scale_t.shape)))
    return _emit(out, pulls)


def layer_norm(x, gain, bias, eps=1e-5) -> Tensor:
    """Normalize each last-axis row to zero mean and unit variance, then
    apply the learned affine."""
    x = _wrap(x)
    gain_t, bias_t = _wrap(gain, x.dtype), _wrap(bias, x.dtype)
    xd = x.data
    if xd.shape[-1] < 2:
        raise ValueError("layer_norm needs at least two features per row")
    mean = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    out = xhat * gain_t.data + bias_t.data
    gd = gain_t.data
    n = xd.shape[-1]

    def pull_x(g):
        gh = g * gd
        return inv * (gh - gh.mean(axis=-1, keepdims=True)
                      - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)

    return _emit(out, [
        (x, pull_x),
        (gain_t, lambda g: _sum_to(g * xhat, gain_t.shape)),
        (bias_t, lambda g: _sum_to(g, bias_t.shape)),
    ])


class BatchNormState:
    """Running statistics for one batch-norm site."""

    __slots__ = ("running_mean", "running_var")

    def __init__(self, dim, dtype=DEFAULT_DTYPE):
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)

    def copy(self):
        out = BatchNormState(self.running_mean.shape[0], self.running_mean.dtype)
        out.running_mean = self.running_mean.copy()
        out.running_var = self.running_var.copy()
        return out


def batch_norm(x, gain, bias, state: BatchNormState, mode: str,
               momentum=0.1, eps=1e-5) -> Tensor:
    """Normalize each feature over every leading axis (all rows of the
    batch, sequences flattened). Train mode uses batch statistics and folds
    them into the running state; eval mode normalizes with the stored
    statistics, so it is a pure per-row function."""
    x = _wrap(x)
    gain_t, bias_t = _wrap(gain, x.dtype), _wrap(bias, x.dtype)
    xd = x.data
    if xd.ndim < 2:
        raise ValueError("batch_norm expects rows of features")
    gd, bd = gain_t.data, bias_t.data

    if mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var.astype(xd.dtype) + eps)
        xhat = (xd - state.running_mean.astype(xd.dtype)) * inv
        out = xhat * gd + bd
        return _emit(out, [
            (x, lambda g: g * (gd * inv)),
            (gain_t, lambda g: _sum_to(g * xhat, gain_t.shape)),
            (bias_t, lambda g: _sum_to(g, bias_t.shape)),
        ])
    if mode != "train":
        raise ValueError(f"unknown batch_norm mode {mode!r}")

    axes = tuple(range(xd.ndim - 1))
    n = int(np.prod(xd.shape[:-1]))
    if n < 2:
        raise DegenerateBatchError(f"batch_norm in train mode needs >= 2 rows, got {n}")
    mean = xd.mean(axis=axes, keepdims=True)
    var = xd.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    out = xhat * gd + bd

    state.running_mean = ((1 - momentum) * state.running_mean
                          + momentum * mean.reshape(-1).astype(state.running_mean.dtype))
    state.running_var = ((1 - momentum) * state.running_var
                         + momentum * var.reshape(-1).astype(state.running_var.dtype))

    def pull_x(g):
        gh = g * gd
        return inv * (gh - gh.mean(axis=axes, keepdims=True)
                      - xhat * (gh * xhat).mean(axis=axes, keepdims=True))

    return _emit(out, [
        (x, pull_x),
        (gain_t, lambda g: _sum_to(g * xhat, gain_t.shape)),
        (bias_t, lambda g: _sum_to(g, bias_t.shape)),
    ])


def l2_normalize(x) -> Tensor:
    """Scale each last-axis row to unit L2 norm. Rows with norm below 1e-12
    come back as zeros (logged, since downstream similarity treats them as
    matching nothing)."""
    x = _wrap(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    degenerate = norm < 1e-12
    n_deg = int(degenerate.sum())
    if n_deg:
        _log.warning("l2_normalize: %d zero-norm row(s) returned as zeros", n_deg)
    safe = np.where(degenerate, 1.0, norm)
    out = np.where(degenerate, 0.0, xd / safe)

    def pull(g):
        gx = (g - out * (g * out).sum(axis=-1, keepdims=True)) / safe
        return np.where(degenerate, 0.0, gx)

    return _emit(out, [(x, pull)])


# ---------------------------------------------------------------------------
# shape plumbing


def concat_last(parts) -> Tensor:
    return _concat(parts, axis=-1)


def concat_rows(parts) -> Tensor:
    return _concat(parts, axis=-2)


def _concat(parts, axis) -> Tensor:
    parts = [_wrap(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)
    pulls = []
    for i, p in enumerate(parts):
        lo, hi = offsets[i], offsets[i + 1]

        def pull(g, lo=lo, hi=hi):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        pulls.append((p, pull))
    return _emit(out, pulls)


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    old = x.data.shape
    return _emit(x.data.reshape(shape), [(x, lambda g: g.reshape(old))])


def swapaxes(x, a: int, b: int) -> Tensor:
    x = _wrap(x)
    return _emit(np.swapaxes(x.data, a, b),
                 [(x, lambda g: np.swapaxes(g, a, b))])


def take_rows(x, start: int, stop: int) -> Tensor:
    """Slice [start:stop] along the row axis (second-to-last)."""
    x = _wrap(x)
    xd = x.data
    out = xd[..., start:stop, :]

    def pull(g):
        full = np.zeros_like(xd)
        full[..., start:stop, :] = g
        return full

    return _emit(out, [(x, pull)])


def sum_all(x) -> Tensor:
    x = _wrap(x)
    shape = x.data.shape
    return _emit(np.asarray(x.data.sum()),
                 [(x, lambda g: np.broadcast_to(g, shape).copy())])


def mean_all(x) -> Tensor:
    x = _wrap(x)
    shape = x.data.shape
    inv = 1.0 / x.data.size
    return _emit(np.asarray(x.data.mean()),
                 [(x, lambda g: np.broadcast_to(g * inv, shape).astype(x.dtype))])


# ---------------------------------------------------------------------------
# initializers


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape, dtype=DEFAULT_DTYPE):
    """Scaled-uniform init, bound 1/sqrt(fan_in)."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
