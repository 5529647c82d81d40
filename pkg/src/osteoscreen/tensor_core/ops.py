"""Differentiable numeric primitives.

Every op checks its output for NaN/Inf and raises :class:`NumericError`
rather than letting non-finite values propagate. Shapes must match exactly;
the only broadcasting supported is a bias vector over rows (``affine``,
``conv2d``) and per-row scaling in ``scale``.
"""

from __future__ import annotations

import threading
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, InputError, NumericError
from .tensor import Node, Tensor, active_tape, backward_rule


_kinks = threading.local()


class kink_recorder:
    """Collect the switching pattern (ReLU masks, max-pool argmaxes) of a forward pass.

    Two evaluations with equal patterns lie on the same smooth piece of the
    network function, which is what central differences need.
    """

    def __enter__(self):
        self.pattern: list[np.ndarray] = []
        self._prev = getattr(_kinks, "active", None)
        _kinks.active = self.pattern
        return self.pattern

    def __exit__(self, *exc):
        _kinks.active = self._prev
        return False


def _note_kink(arr: np.ndarray) -> None:
    rec = getattr(_kinks, "active", None)
    if rec is not None:
        rec.append(arr)


def _emit(op: str, inputs: tuple[Tensor, ...], data: np.ndarray, **saved) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, **saved)
    return out


# ---------------------------------------------------------------- convolution


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, NCHW layout."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    k, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d: kernel has {kc} input channels, input has {c}")
    if bias.shape != (k,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({k},)")
    if stride < 1 or padding < 0:
        raise InputError("conv2d: stride must be >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride)
    wmat = kernel.data.reshape(k, -1)
    out = cols @ wmat.T + bias.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, k).transpose(0, 3, 1, 2))
    return _emit("conv2d", (x, kernel, bias), out, cols=cols, stride=stride, padding=padding, padded=xp.shape)


@backward_rule("conv2d")
def _conv2d_backward(g: np.ndarray, node: Node):
    x, kernel, _ = node.inputs
    cols = node.saved["cols"]
    stride, padding = node.saved["stride"], node.saved["padding"]
    k, c, kh, kw = kernel.shape
    n, _, oh, ow = g.shape
    gm = g.transpose(0, 2, 3, 1).reshape(-1, k)
    dkernel = (gm.T @ cols).reshape(kernel.shape)
    dbias = gm.sum(axis=0)
    dx = None
    if x.requires_grad:
        dcols = (gm @ kernel.data.reshape(k, -1)).reshape(n, oh, ow, c, kh, kw)
        dxp = np.zeros(node.saved["padded"], dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        h, w = x.shape[2:]
        dx = dxp[:, :, padding:padding + h, padding:padding + w]
    return dx, dkernel, dbias


# ---------------------------------------------------------------- pooling


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Max over ``window``x``window`` tiles; ties resolve to the first maximum in row-major order."""
    stride = window if stride is None else stride
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d expects NCHW input, got {x.shape}")
    h, w = x.shape[2:]
    if window < 1 or stride < 1:
        raise InputError("maxpool2d: window and stride must be positive")
    if window > h or window > w:
        raise DimensionError(f"maxpool2d: window {window} larger than spatial size {h}x{w}")
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    flat = win.reshape(n, c, oh, ow, window * window)
    arg = flat.argmax(axis=-1)
    _note_kink(arg)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return _emit("maxpool2d", (x,), np.ascontiguousarray(out), arg=arg, window=window, stride=stride)


@backward_rule("maxpool2d")
def _maxpool2d_backward(g: np.ndarray, node: Node):
    (x,) = node.inputs
    arg, window, stride = node.saved["arg"], node.saved["window"], node.saved["stride"]
    n, c, oh, ow = g.shape
    rows = np.arange(oh)[:, None] * stride + arg // window
    cols = np.arange(ow)[None, :] * stride + arg % window
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    dx = np.zeros(x.shape, dtype=g.dtype)
    np.add.at(dx, (np.broadcast_to(ni, g.shape), np.broadcast_to(ci, g.shape), rows, cols), g)
    return (dx,)


# ---------------------------------------------------------------- elementwise


def relu(x: Tensor) -> Tensor:
    _note_kink(x.data > 0)
    return _emit("relu", (x,), np.maximum(x.data, 0))


@backward_rule("relu")
def _relu_backward(g, node):
    return (g * (node.inputs[0].data > 0),)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit("add", (a, b), a.data + b.data)


@backward_rule("add")
def _add_backward(g, node):
    return g, g


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _emit("mul", (a, b), a.data * b.data)


@backward_rule("mul")
def _mul_backward(g, node):
    a, b = node.inputs
    return g * b.data, g * a.data


def scale(a: Tensor, s) -> Tensor:
    """Multiply ``a`` by a scalar, or each row of ``a`` by its entry of an ``[N, 1]`` column.

    When ``s`` is a tensor the gradient also flows into it.
    """
    if isinstance(s, Tensor):
        if s.size == 1:
            s_view = s.data.reshape(())
        elif a.data.ndim >= 1 and s.shape == (a.shape[0], 1):
            s_view = s.data.reshape((a.shape[0],) + (1,) * (a.data.ndim - 1))
        else:
            raise DimensionError(f"scale: factor shape {s.shape} incompatible with {a.shape}")
        return _emit("scale_t", (a, s), a.data * s_view.astype(a.dtype, copy=False))
    return _emit("scale", (a,), a.data * a.dtype.type(s), s=s)


@backward_rule("scale")
def _scale_backward(g, node):
    return (g * g.dtype.type(node.saved["s"]),)


@backward_rule("scale_t")
def _scale_t_backward(g, node):
    a, s = node.inputs
    if s.size == 1:
        return g * s.data.reshape(()), np.sum(g * a.data).reshape(s.shape)
    s_view = s.data.reshape((a.shape[0],) + (1,) * (a.data.ndim - 1))
    ds = (g * a.data).reshape(a.shape[0], -1).sum(axis=1).reshape(s.shape)
    return g * s_view, ds


def sum(x: Tensor) -> Tensor:  # noqa: A001
    return _emit("sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype))


@backward_rule("sum")
def _sum_backward(g, node):
    return (np.full(node.inputs[0].shape, g.reshape(()), dtype=g.dtype),)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _emit("reshape", (x,), x.data.reshape(tuple(shape)))


@backward_rule("reshape")
def _reshape_backward(g, node):
    return (g.reshape(node.inputs[0].shape),)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (columns by default); every other dimension must agree."""
    parts = list(parts)
    if not parts:
        raise InputError("concat of an empty list")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.data.ndim != len(ref) or any(d != r for i, (d, r) in enumerate(zip(p.shape, ref)) if i != axis):
            raise DimensionError(f"concat: shape {p.shape} incompatible with {ref} along axis {axis}")
    sizes = [p.shape[axis] for p in parts]
    return _emit("concat", tuple(parts), np.concatenate([p.data for p in parts], axis=axis), sizes=sizes, axis=axis)


@backward_rule("concat")
def _concat_backward(g, node):
    offsets = np.cumsum(node.saved["sizes"])[:-1]
    return tuple(np.split(g, offsets, axis=node.saved["axis"]))


def slice_along(x: Tensor, start: int, stop: int, axis: int = 1) -> Tensor:
    if not 0 <= start < stop <= x.shape[axis]:
        raise DimensionError(f"slice [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    return _emit("slice", (x,), np.ascontiguousarray(x.data[tuple(idx)]), index=tuple(idx))


@backward_rule("slice")
def _slice_backward(g, node):
    (x,) = node.inputs
    dx = np.zeros(x.shape, dtype=g.dtype)
    dx[node.saved["index"]] = g
    return (dx,)


# ---------------------------------------------------------------- dense layers


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape ``[N, D]`` and ``weight`` of shape ``[D, M]``."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(f"affine expects 2-D operands, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"affine: inner dimensions {x.shape[1]} and {weight.shape[0]} differ")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"affine: bias shape {bias.shape} != ({weight.shape[1]},)")
    return _emit("affine", (x, weight, bias), x.data @ weight.data + bias.data)


@backward_rule("affine")
def _affine_backward(g, node):
    x, weight, _ = node.inputs
    dx = g @ weight.data.T if x.requires_grad else None
    return dx, x.data.T @ g, g.sum(axis=0)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax of an ``[N, K]`` tensor (max-subtracted)."""
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"softmax expects [N, K>=1], got {x.shape}")
    y = _softmax_rows(x.data)
    return _emit("softmax", (x,), y, y=y)


@backward_rule("softmax")
def _softmax_backward(g, node):
    y = node.saved["y"]
    return (y * (g - np.sum(g * y, axis=1, keepdims=True)),)


def cross_entropy(logits: Tensor, labels, class_weights=None) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    With ``class_weights`` the mean is weighted per sample by the weight of its
    true class and normalised by the total weight.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects [N, K] logits, got {logits.shape}")
    n, k = logits.shape
    if labels.shape[0] != n:
        raise DimensionError(f"cross_entropy: {labels.shape[0]} labels for {n} rows")
    if np.any(labels < 0) or np.any(labels >= k):
        raise InputError(f"cross_entropy: labels must lie in [0, {k})")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    nll = logsum - shifted[np.arange(n), labels]
    if class_weights is None:
        w = np.ones(n, dtype=z.dtype)
    else:
        w = np.asarray(class_weights, dtype=z.dtype)[labels]
    total = w.sum()
    loss = np.asarray((w * nll).sum() / total, dtype=z.dtype)
    return _emit("cross_entropy", (logits,), loss, labels=labels, weights=w / total)


@backward_rule("cross_entropy")
def _cross_entropy_backward(g, node):
    (logits,) = node.inputs
    labels, w = node.saved["labels"], node.saved["weights"]
    p = _softmax_rows(logits.data)
    p[np.arange(labels.shape[0]), labels] -= 1
    return (p * w[:, None] * g.reshape(()),)
