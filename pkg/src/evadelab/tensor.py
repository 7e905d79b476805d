"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations are plain functions. When any input belongs to a :class:`Tape`,
the application is appended to that tape together with a closure computing
the vector-Jacobian product, and :meth:`Tape.backward` walks the records in
reverse. Inputs without a tape are treated as constants.

Images and activations use N x H x W x C layout throughout.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError, UsageError

PROB_FLOOR = 1e-12


def _frozen(array):
    arr = np.asarray(array, dtype=np.float64)
    if arr.flags.writeable:
        arr = arr.view()
        arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable array plus an optional tape identity."""

    __slots__ = ("data", "tape", "id")

    def __init__(self, data, tape=None, id=None):
        self.data = _frozen(data)
        self.tape = tape
        self.id = id

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return np.array(self.data)

    def __repr__(self):
        tracked = f", id={self.id}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tracked})"


@dataclass(frozen=True)
class Record:
    kind: str
    input_ids: tuple
    output_id: int
    vjp: Callable


class GradientSet(dict):
    """Map from variable id to gradient array; indexable by Tensor too."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.id
        return super().__getitem__(key)


class Tape:
    """Ordered log of primitive applications (a computation record)."""

    def __init__(self):
        self.records = []
        self._variables = {}
        self._next = 0

    def _new_id(self):
        self._next += 1
        return self._next

    def variable(self, data):
        t = Tensor(data, self, self._new_id())
        self._variables[t.id] = t
        return t

    def emit(self, kind, inputs, out, vjp):
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"non-finite values produced by {kind}")
        tracked = [t for t in inputs if t.tape is self]
        if not tracked:
            return Tensor(out)
        t = Tensor(out, self, self._new_id())
        ids = tuple(x.id if x.tape is self else None for x in inputs)
        self.records.append(Record(kind, ids, t.id, vjp))
        return t

    def backward(self, loss, wrt=None):
        """Gradients of scalar ``loss`` w.r.t. ``wrt`` (default: every variable)."""
        if loss.tape is not self:
            raise UsageError("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {loss.id: np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(rec.output_id, None)
            if g is None:
                continue
            needs = tuple(i is not None for i in rec.input_ids)
            for i, gi in zip(rec.input_ids, rec.vjp(g, needs)):
                if i is None or gi is None:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        wanted = self._variables.values() if wrt is None else wrt
        out = GradientSet()
        for v in wanted:
            g = grads.get(v.id)
            out[v.id] = np.zeros_like(v.data) if g is None else np.asarray(g, dtype=np.float64)
        return out


def _tape_of(*tensors):
    for t in tensors:
        if t.tape is not None:
            return t.tape
    return None


def _apply(kind, inputs, out, vjp):
    tape = _tape_of(*inputs)
    if tape is None:
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"non-finite values produced by {kind}")
        return Tensor(out)
    return tape.emit(kind, inputs, out, vjp)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise and reductions ------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ParameterError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _apply("add", (a, b), a.data + b.data, lambda g, needs: (g, g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ParameterError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _apply("mul", (a, b), ad * bd, lambda g, needs: (g * bd, g * ad))


def scale(a, factor):
    a = as_tensor(a)
    factor = float(factor)
    return _apply("scale", (a,), a.data * factor, lambda g, needs: (g * factor,))


def sum_all(a):
    a = as_tensor(a)
    shape = a.shape
    return _apply("sum_all", (a,), np.asarray(a.data.sum()), lambda g, needs: (np.full(shape, float(g)),))


def weighted_sum(a, weights):
    """Scalar ``sum(a * weights)`` with constant ``weights``."""
    a = as_tensor(a)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != a.shape:
        raise ParameterError(f"weighted_sum: weights {w.shape} vs input {a.shape}")
    return _apply("weighted_sum", (a,), np.asarray(np.sum(a.data * w)), lambda g, needs: (float(g) * w,))


def relu(a):
    a = as_tensor(a)
    return _apply("relu", (a,), np.maximum(a.data, 0.0), lambda g, needs: (g * (a.data > 0),))


def flatten(a):
    a = as_tensor(a)
    shape = a.shape
    return _apply("flatten", (a,), a.data.reshape(shape[0], -1), lambda g, needs: (g.reshape(shape),))


def softmax(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ParameterError(f"softmax expects a B x K logit matrix, got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g, needs):
        return (p * (g - np.sum(g * p, axis=1, keepdims=True)),)

    return _apply("softmax", (a,), p, vjp)


def log_softmax(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ParameterError(f"log_softmax expects a B x K logit matrix, got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def vjp(g, needs):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _apply("log_softmax", (a,), out, vjp)


def cross_entropy_loss(probs, labels, reduction="mean"):
    """Mean (or summed) ``-log probs[b, label_b]`` with the probability floor applied."""
    probs = as_tensor(probs)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    B, K = probs.shape
    if labels.shape[0] != B:
        raise ParameterError(f"{labels.shape[0]} labels for a batch of {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ParameterError(f"label out of range [0, {K})")
    rows = np.arange(B)
    picked = probs.data[rows, labels]
    clamped = np.maximum(picked, PROB_FLOOR)
    norm = B if reduction == "mean" else 1
    value = -np.log(clamped).sum() / norm

    def vjp(g, needs):
        grad = np.zeros((B, K))
        grad[rows, labels] = np.where(picked > PROB_FLOOR, -1.0 / clamped, 0.0) * (float(g) / norm)
        return (grad,)

    return _apply("cross_entropy", (probs,), np.asarray(value), vjp)


# -- layers --------------------------------------------------------------------


def dense(x, weights, bias):
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if x.data.ndim != 2 or weights.data.ndim != 2 or bias.data.ndim != 1:
        raise ParameterError("dense expects input B x n, weights n x m, bias m")
    if x.shape[1] != weights.shape[0] or weights.shape[1] != bias.shape[0]:
        raise ParameterError(f"dense shape mismatch: {x.shape} . {weights.shape} + {bias.shape}")
    xd, wd = x.data, weights.data
    out = xd @ wd + bias.data

    def vjp(g, needs):
        dx = g @ wd.T if needs[0] else None
        dw = xd.T @ g if needs[1] else None
        db = g.sum(axis=0) if needs[2] else None
        return dx, dw, db

    return _apply("dense", (x, weights, bias), out, vjp)


def _im2col(xp, k):
    # rows: (b, i, j); columns ordered (di, dj, c) to match k x k x C x F kernels
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # B, Ho, Wo, C, k, k
    B, Ho, Wo, C = win.shape[:4]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, k * k * C), (B, Ho, Wo)


def conv2d(x, kernels, bias, padding="valid"):
    """Stride-1 cross-correlation of a B x H x W x C input with k x k x C x F kernels."""
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ParameterError("conv2d expects input B x H x W x C and kernels k x k x C x F")
    k, k2, C, F = kernels.shape
    if k != k2 or k % 2 == 0:
        raise ParameterError(f"conv2d needs square odd kernels, got {k}x{k2}")
    if x.shape[3] != C or bias.shape != (F,):
        raise ParameterError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}, bias {bias.shape}")
    if padding not in ("valid", "same"):
        raise ParameterError(f"unknown padding {padding!r}")
    p = k // 2 if padding == "same" else 0
    B, H, W, _ = x.shape
    if k > H + 2 * p or k > W + 2 * p:
        raise ParameterError(f"kernel {k}x{k} larger than padded input {H + 2 * p}x{W + 2 * p}")
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    cols, (_, Ho, Wo) = _im2col(xp, k)
    kmat = kernels.data.reshape(k * k * C, F)
    out = (cols @ kmat + bias.data).reshape(B, Ho, Wo, F)

    def vjp(g, needs):
        g2 = g.reshape(-1, F)
        dk = (cols.T @ g2).reshape(k, k, C, F) if needs[1] else None
        db = g2.sum(axis=0) if needs[2] else None
        if not needs[0]:
            return None, dk, db
        dcols = (g2 @ kmat.T).reshape(B, Ho, Wo, k, k, C)
        dxp = np.zeros(xp.shape)
        for di in range(k):
            for dj in range(k):
                dxp[:, di:di + Ho, dj:dj + Wo, :] += dcols[:, :, :, di, dj, :]
        dx = dxp[:, p:p + H, p:p + W, :] if p else dxp
        return dx, dk, db

    return _apply("conv2d", (x, kernels, bias), out, vjp)


def maxpool2x2(x):
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ParameterError("maxpool2x2 expects B x H x W x C")
    B, H, W, C = x.shape
    H2, W2 = H // 2, W // 2
    if H2 == 0 or W2 == 0:
        raise ParameterError(f"input {H}x{W} too small for 2x2 pooling")
    # the four window positions in (di, dj) order; ties route to the first maximal one
    corners = [x.data[:, di:2 * H2:2, dj:2 * W2:2, :] for di in (0, 1) for dj in (0, 1)]
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))

    def vjp(g, needs):
        dx = np.zeros((B, H, W, C))
        free = np.ones(out.shape, dtype=bool)
        for (di, dj), c in zip(((0, 0), (0, 1), (1, 0), (1, 1)), corners):
            hit = free & (c == out)
            dx[:, di:2 * H2:2, dj:2 * W2:2, :] = np.where(hit, g, 0.0)
            free &= ~hit
        return (dx,)

    return _apply("maxpool2x2", (x,), out, vjp)


# -- verification helper ---------------------------------------------------------


def finite_difference(fn, arrays, h=1e-3):
    """Central differences of scalar ``fn(*arrays)`` with respect to every array."""
    grads = []
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*arrays)
            flat[i] = orig - h
            fm = fn(*arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads
