"""Minimal numpy-backed tensor with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a closure computing
the parent gradients from the output gradient. ``Tensor.backward`` replays the
recorded graph in reverse topological order, accumulating gradients into the
leaves that require them. Only first-order derivatives are supported.
"""

from __future__ import annotations

import contextlib
import hashlib
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_BRANCH_LOG = None

CHECKPOINT_MAGIC = b"MFRW"
CHECKPOINT_VERSION_F32 = 1
CHECKPOINT_VERSION_F64 = 2


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class CheckpointFormatError(ValueError):
    pass


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class BranchLog:
    """Digest of the piecewise branches taken by a forward pass.

    Ops with kinks or jumps (ReLU signs, bilinear cells, in-bounds tests)
    feed their branch choices in. Two passes with equal digests lie on the
    same smooth piece of the function.
    """

    def __init__(self):
        self._hash = hashlib.sha1()
        self.events = 0

    def add(self, *arrays) -> None:
        for a in arrays:
            self._hash.update(np.ascontiguousarray(a).tobytes())
        self.events += 1

    def digest(self) -> str:
        return self._hash.hexdigest()


@contextlib.contextmanager
def record_branches():
    global _BRANCH_LOG
    previous = _BRANCH_LOG
    _BRANCH_LOG = BranchLog()
    try:
        yield _BRANCH_LOG
    finally:
        _BRANCH_LOG = previous


def log_branch(*arrays) -> None:
    if _BRANCH_LOG is not None:
        _BRANCH_LOG.add(*arrays)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -------------------------------------------------------------- autodiff
    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -------------------------------------------------------------- operators
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """A trainable leaf tensor; ``grad`` always has the value's shape."""

    __slots__ = ("trainable",)

    def __init__(self, data, trainable: bool = True, dtype=None, name: str | None = None):
        super().__init__(np.array(data, dtype=dtype or _DEFAULT_DTYPE), requires_grad=trainable, name=name)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))
    order.reverse()
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is None:
        dtype = _DEFAULT_DTYPE
    return Tensor(arr.astype(dtype, copy=False))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    log_branch(out > 0)

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0).astype(out.dtype),)

    return _result(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    log_branch(positive)
    # np.maximum keeps NaN, so corrupted inputs reach the loss check.
    out = np.maximum(x.data, 0).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * positive,))


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


def scale_grad(x: Tensor, factor: float) -> Tensor:
    """Identity in the forward pass; multiplies the incoming gradient by ``factor``."""
    return _result(x.data, (x,), lambda g: (g * factor,))


def where(condition, a, b) -> Tensor:
    a, b = _pair(a, b)
    cond = np.asarray(condition, dtype=bool)
    log_branch(cond)
    out = np.where(cond, a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.where(cond, g, 0).astype(g.dtype), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(cond, 0, g).astype(g.dtype), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


# ----------------------------------------------------------------- reductions
def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axes, keepdims), 1.0 / count)


def l2_norm(x: Tensor, axis: int) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as zero."""
    axis = axis % x.ndim
    out = np.sqrt((x.data * x.data).sum(axis=axis))
    log_branch(out > 0)

    def backward(g):
        n = np.expand_dims(out, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, x.data / safe, 0.0).astype(x.dtype) * np.expand_dims(g, axis),)

    return _result(out, (x,), backward)


def softmax(x: Tensor, axes, mask: np.ndarray | None = None) -> Tensor:
    """Softmax normalised jointly over ``axes``.

    ``mask`` (broadcastable boolean) removes entries from the normalisation
    mass; masked entries come out as exactly zero.
    """
    axes = _norm_axes(axes, x.ndim)
    if not axes:
        raise ValueError("softmax needs at least one axis")
    logits = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        logits = np.where(mask, logits, -np.inf)
    shifted = logits - logits.max(axis=axes, keepdims=True)
    e = np.exp(shifted)
    out = (e / e.sum(axis=axes, keepdims=True)).astype(x.dtype)

    def backward(g):
        inner = (g * out).sum(axis=axes, keepdims=True)
        return (out * (g - inner),)

    return _result(out, (x,), backward)


# -------------------------------------------------------------------- shaping
def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return _result(out, (x,), lambda g: (g.transpose(inverse),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError(
                f"concat on axis {axis}: incompatible shapes {[tt.shape for tt in tensors]}"
            )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        parts = []
        for k in range(len(tensors)):
            sl = [slice(None)] * ndim
            sl[axis] = slice(bounds[k], bounds[k + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _result(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concat(expanded, axis=axis)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


# ------------------------------------------------------------------- spatial
def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """[B, C, Hp, Wp] -> [B, Ho, Wo, C*kh*kw] patch matrix."""
    B, C = xp.shape[:2]
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = windows[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(B, Ho, Wo, C * kh * kw)


def _conv_raw(xp: np.ndarray, w: np.ndarray, stride: int, Ho: int, Wo: int):
    O, C, kh, kw = w.shape
    cols = _im2col(xp, kh, kw, stride, Ho, Wo)
    out = cols @ w.reshape(O, C * kh * kw).T
    return out, cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x`` is [C,H,W] or [B,C,H,W]; ``weight`` is [O,C,kh,kw]."""
    unbatched = x.ndim == 3
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects [B,C,H,W] input and [O,C,kh,kw] kernel, got {x.shape}, {weight.shape}")
    B, C, H, W = x.shape
    O, Ck, kh, kw = weight.shape
    if Ck != C:
        raise ShapeError(f"conv2d: input has {C} channels but kernel expects {Ck}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {O} output channels")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} with padding {padding} exceeds input {H}x{W}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    out, cols = _conv_raw(xp, weight.data, stride, Ho, Wo)  # out: [B, Ho, Wo, O]
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gw = gb = gx = None
        g_nhwc = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, O)
        if weight.requires_grad:
            gw = (g_nhwc.T @ cols.reshape(-1, C * kh * kw)).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g_nhwc.sum(axis=0)
        if x.requires_grad:
            if stride == 1 and kh - 1 - padding >= 0 and kw - 1 - padding >= 0:
                # Input gradient is the full correlation with the flipped kernel.
                ph, pw = kh - 1 - padding, kw - 1 - padding
                gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
                wf = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gxo, _ = _conv_raw(gp, wf, 1, H, W)
                gx = np.ascontiguousarray(gxo.transpose(0, 3, 1, 2))
            else:
                dcols = (g_nhwc @ weight.data.reshape(O, C * kh * kw)).reshape(B, Ho, Wo, C, kh, kw)
                dcols = np.ascontiguousarray(dcols.transpose(4, 5, 0, 3, 1, 2))
                gxp = np.zeros(xp.shape, dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += dcols[i, j]
                gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    result = _result(out, parents, backward)
    if unbatched:
        result = reshape(result, result.shape[1:])
    return result


def pad2d(x: Tensor, pad: int) -> Tensor:
    """Zero-pad the two trailing axes by ``pad`` on every side."""
    if pad == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(x.data, widths)
    return _result(out, (x,), lambda g: (g[..., pad:-pad, pad:-pad],))


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 mean pooling over the two trailing axes."""
    if x.ndim < 2:
        raise ShapeError("avg_pool2 needs at least two axes")
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2: trailing dims {H}x{W} must both be even")
    lead = x.shape[:-2]
    out = x.data.reshape(lead + (H // 2, 2, W // 2, 2)).mean(axis=(-3, -1))

    def backward(g):
        g4 = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1)
        return (g4 * 0.25,)

    return _result(out.astype(x.dtype), (x,), backward)


def gather_bilinear(maps: Tensor, coords: Tensor) -> tuple[Tensor, np.ndarray]:
    """Bilinearly sample each of N maps at its own K sub-pixel points.

    ``maps`` is [N, C, h, w]; ``coords`` is [N, K, 2] holding (x, y) in pixels.
    Returns values [N, C, K] and a boolean in-bounds array [N, K]. A point is
    in bounds when at least one in-range grid cell carries positive weight,
    i.e. -1 < x < w and -1 < y < h. Out-of-range neighbours read as zero and
    out-of-bounds points return exactly 0.
    """
    N, C, h, w = maps.shape
    if coords.ndim != 3 or coords.shape[0] != N or coords.shape[2] != 2:
        raise ShapeError(f"gather_bilinear: coords {coords.shape} do not match maps {maps.shape}")
    K = coords.shape[1]
    cx = coords.data[..., 0]
    cy = coords.data[..., 1]
    inb = (cx > -1) & (cx < w) & (cy > -1) & (cy < h)

    x0 = np.floor(cx)
    y0 = np.floor(cy)
    log_branch(inb, x0, y0)
    fx = (cx - x0).astype(maps.dtype)
    fy = (cy - y0).astype(maps.dtype)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    n_idx = np.arange(N)[:, None]

    flat = maps.data.reshape(N, C, h * w)
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi = x0 + dx
        yi = y0 + dy
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & inb
        lin = np.where(ok, yi * w + xi, 0)
        vals = flat[n_idx, :, lin]  # [N, K, C]
        vals = np.where(ok[..., None], vals, 0)
        corners.append((dy, dx, ok, lin, vals))

    out = np.zeros((N, K, C), dtype=maps.dtype)
    for (dy, dx, ok, lin, vals), wgt in zip(corners, _corner_weights(fx, fy)):
        out += wgt[..., None] * vals
    out = np.where(inb[..., None], out, 0).astype(maps.dtype)
    values = np.ascontiguousarray(out.transpose(0, 2, 1))

    def backward(g):
        gk = g.transpose(0, 2, 1)  # [N, K, C]
        gmaps = gcoords = None
        if maps.requires_grad:
            acc = np.zeros(N * C * h * w, dtype=maps.dtype)
            base = (np.arange(N)[:, None, None] * C + np.arange(C)[None, None, :]) * (h * w)  # [N,1,C]
            for (dy, dx, ok, lin, vals), wgt in zip(corners, _corner_weights(fx, fy)):
                contrib = np.where(ok[..., None], gk * wgt[..., None], 0)
                idx = base + lin[..., None]
                acc += np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=acc.size).astype(maps.dtype)
            gmaps = acc.reshape(N, C, h, w)
        if coords.requires_grad:
            v = {(dy, dx): vals for dy, dx, ok, lin, vals in corners}
            dvdx = (1 - fy)[..., None] * (v[(0, 1)] - v[(0, 0)]) + fy[..., None] * (v[(1, 1)] - v[(1, 0)])
            dvdy = (1 - fx)[..., None] * (v[(1, 0)] - v[(0, 0)]) + fx[..., None] * (v[(1, 1)] - v[(0, 1)])
            gx = np.where(inb, (gk * dvdx).sum(axis=-1), 0)
            gy = np.where(inb, (gk * dvdy).sum(axis=-1), 0)
            gcoords = np.stack([gx, gy], axis=-1).astype(coords.dtype)
        return gmaps, gcoords

    return _result(values, (maps, coords), backward), inb


def _corner_weights(fx, fy):
    return ((1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx)


def bilinear_sample(grid: Tensor, coords) -> tuple[Tensor, np.ndarray]:
    """Sample a [C,H,W] map at a list of (x, y) pixel coordinates.

    Returns values [C, n] and a boolean in-bounds flag per coordinate.
    """
    coords = as_tensor(coords, dtype=grid.dtype)
    if coords.ndim == 1:
        coords = reshape(coords, (1, 2))
    C, H, W = grid.shape
    values, inb = gather_bilinear(reshape(grid, (1, C, H, W)), reshape(coords, (1,) + coords.shape))
    return reshape(values, values.shape[1:]), inb[0]


# -------------------------------------------------------------- verification
def finite_diff_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    coords: dict[int, Iterable[int]] | None = None,
) -> float:
    """Compare analytic gradients of scalar ``fn(*inputs)`` with central differences.

    ``coords`` optionally maps an input position to the flat indices to probe;
    by default every element of every input that requires grad is probed.
    Returns the maximum relative error, with denominator max(|a|, |b|, 1e-8).
    """
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    if out.size != 1:
        raise ShapeError("finite_diff_check needs a scalar-valued function")
    out.backward()

    worst = 0.0
    for pos, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        probe = range(flat.size) if coords is None or pos not in coords else coords[pos]
        for k in probe:
            original = flat[k]
            with no_grad():
                flat[k] = original + eps
                f_plus = float(fn(*inputs).data)
                flat[k] = original - eps
                f_minus = float(fn(*inputs).data)
            flat[k] = original
            numeric = (f_plus - f_minus) / (2 * eps)
            a = float(analytic.reshape(-1)[k])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- checkpoint
def save_checkpoint(path, params: dict[str, np.ndarray | Tensor], precision: int = 32) -> None:
    """Write named arrays as ``MFRW`` + version, then (name, rank, dims, raw LE floats) entries."""
    if precision not in (32, 64):
        raise ValueError("precision must be 32 or 64")
    version = CHECKPOINT_VERSION_F32 if precision == 32 else CHECKPOINT_VERSION_F64
    dtype = "<f4" if precision == 32 else "<f8"
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", version))
        for name, value in params.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: missing MFRW header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version == CHECKPOINT_VERSION_F32:
        dtype, width = np.dtype("<f4"), 4
    elif version == CHECKPOINT_VERSION_F64:
        dtype, width = np.dtype("<f8"), 8
    else:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            end = pos + count * width
            if end > len(blob):
                raise CheckpointFormatError(f"{path}: truncated entry {name!r}")
            out[name] = np.frombuffer(blob[pos:end], dtype=dtype).reshape(dims).copy()
            pos = end
    except struct.error as exc:
        raise CheckpointFormatError(f"{path}: truncated checkpoint") from exc
    return out
