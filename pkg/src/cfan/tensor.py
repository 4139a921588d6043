"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`; when any input requires a
gradient the result records its parents and an adjoint rule. Binary
elementwise ops never broadcast. Ops that accept feature maps take
``(C, H, W)`` or a batched ``(N, C, H, W)`` layout.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

_FLOAT_TYPES = (np.float32, np.float64)
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """A real array plus the bookkeeping needed for backpropagation.

    ``grad`` holds the accumulated adjoint for leaves that require a gradient
    and the most recent adjoint for interior nodes.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_rule", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype)
        if arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_rule: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def record(data: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    """Wrap an op result, attaching ``rule`` if any parent needs a gradient.

    ``rule(g)`` receives the output adjoint and returns one adjoint (or
    ``None``) per parent, in order.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_rule = rule
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_rule = None
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Populate gradients of every leaf reachable from the scalar ``root``.

    Leaf gradients accumulate across calls until zeroed.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    adjoints: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological_order(root)):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        if node.backward_rule is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node.parents, node.backward_rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adjoints:
                adjoints[key] = adjoints[key] + pg
            else:
                adjoints[key] = pg


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return record(a.data * a.dtype.type(c), (a,), lambda g: (g * a.dtype.type(c),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form never overflows
    s = 0.5 * (1 + np.tanh(0.5 * a.data))
    return record(s, (a,), lambda g: (g * s * (1 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return record(t, (a,), lambda g: (g * (1 - t * t),))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a: Tensor, b: Tensor | float | None = None) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, sigmoid, tanh, scale."""
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind in _BINARY:
        return _BINARY[kind](a, b)
    if kind == "scale":
        return scale(a, float(b))
    raise ValueError(f"unknown elementwise op {kind!r}")


# -- reductions and reshapes -------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    return record(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                  lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def bias_add(x: Tensor, b: Tensor, axis: int) -> Tensor:
    """Add a vector along one named axis of ``x``; the only broadcast on offer."""
    axis = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise ShapeError(f"bias_add: bias {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    others = tuple(i for i in range(x.ndim) if i != axis)
    return record(x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=others)))


# -- linear algebra and convolution -----------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate ``x`` with kernels ``k`` of shape ``(C_out, C_in, kh, kw)``."""
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or k.ndim != 4:
        raise ShapeError(f"conv2d: expected (N,)C,H,W input and 4-d kernel, got {x.shape}, {k.shape}")
    X = x.data if batched else x.data[None]
    n, c, h, w = X.shape
    c_out, c_in, kh, kw = k.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    span_h, span_w = h + 2 * pad - kh, w + 2 * pad - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(f"conv2d: non-integral output size for input {h}x{w}, "
                         f"kernel {kh}x{kw}, stride {stride}, pad {pad}")
    ho, wo = span_h // stride + 1, span_w // stride + 1
    K = k.data

    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        k2 = K[:, :, 0, 0]
        x3 = X.reshape(n, c, h * w)
        out = np.matmul(k2, x3).reshape(n, c_out, h, w)

        def rule(g):
            G = g if batched else g[None]
            g3 = G.reshape(n, c_out, h * w)
            gx = np.matmul(k2.T, g3).reshape(X.shape) if x.requires_grad else None
            gk = np.matmul(g3, x3.transpose(0, 2, 1)).sum(axis=0)[:, :, None, None]
            return _conv_grads(gx, gk, G, batched, bias)
    else:
        Xp = np.pad(X, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else X
        cols = np.empty((n, c, kh, kw, ho, wo), dtype=X.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = Xp[:, :, i:i + stride * (ho - 1) + 1:stride,
                                      j:j + stride * (wo - 1) + 1:stride]
        cols = cols.reshape(n, c * kh * kw, ho * wo)
        k2 = K.reshape(c_out, -1)
        out = np.matmul(k2, cols).reshape(n, c_out, ho, wo)

        def rule(g):
            G = g if batched else g[None]
            g3 = G.reshape(n, c_out, ho * wo)
            gk = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(K.shape)
            if not x.requires_grad:
                return _conv_grads(None, gk, G, batched, bias)
            dcols = np.matmul(k2.T, g3).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros_like(Xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                        j:j + stride * (wo - 1) + 1:stride] += dcols[:, :, i, j]
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
            return _conv_grads(gx, gk, G, batched, bias)

    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)
    if not batched:
        out = out[0]
    parents = (x, k) if bias is None else (x, k, bias)
    return record(out, parents, rule)


def _conv_grads(gx, gk, G, batched, bias):
    if gx is not None and not batched:
        gx = gx[0]
    if bias is None:
        return gx, gk
    return gx, gk, G.sum(axis=(0, 2, 3))


# -- pooling, normalization, resampling --------------------------------------


def pool2d(kind: str, x: Tensor, window: int | None = None) -> Tensor:
    """Max or average pooling over non-overlapping windows.

    ``window=None`` collapses the whole spatial extent (global pooling), so a
    ``(..., C, H, W)`` input becomes ``(..., C)``.
    """
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pooling kind {kind!r}")
    if window is None:
        if kind != "avg":
            raise ValueError("global pooling is average-only")
        return global_avg_pool(x)
    *lead, h, w = x.shape
    if window < 1 or h % window or w % window:
        raise ShapeError(f"pool2d: window {window} does not divide spatial size {h}x{w}")
    ho, wo = h // window, w // window
    xr = x.data.reshape(*lead, ho, window, wo, window)
    if kind == "avg":
        area = window * window

        def avg_rule(g):
            gx = np.broadcast_to((g / area)[..., :, None, :, None], xr.shape)
            return (gx.reshape(x.shape).astype(x.dtype),)

        return record(xr.mean(axis=(-3, -1)).astype(x.dtype), (x,), avg_rule)

    # scan window offsets in row-major order; strict '>' keeps the first maximum
    offsets = [(i, j) for i in range(window) for j in range(window)]
    out = x.data[..., 0::window, 0::window].copy()
    arg = np.zeros(out.shape, dtype=np.int16)
    for k, (i, j) in enumerate(offsets[1:], start=1):
        cand = x.data[..., i::window, j::window]
        better = cand > out
        np.copyto(out, cand, where=better)
        arg[better] = k

    def max_rule(g):
        gx = np.zeros_like(x.data)
        for k, (i, j) in enumerate(offsets):
            gx[..., i::window, j::window] = np.where(arg == k, g, 0)
        return (gx,)

    return record(out, (x,), max_rule)


def global_avg_pool(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    out = x.data.mean(axis=(-2, -1)).astype(x.dtype)
    return record(out, (x,), lambda g: (np.broadcast_to(g[..., None, None] / (h * w), x.shape).copy(),))


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the channel vector at every spatial position."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[-3]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layernorm: gain/bias {gain.shape}/{bias.shape} vs {c} channels")
    mu = x.data.mean(axis=-3, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-3, keepdims=True) + eps)
    y = centered * inv
    gv = gain.data[:, None, None]
    out = (y * gv + bias.data[:, None, None]).astype(x.dtype)
    reduce_axes = tuple(i for i in range(x.ndim) if i != x.ndim - 3)

    def rule(g):
        dy = g * gv
        gx = inv * (dy - dy.mean(axis=-3, keepdims=True) - y * (dy * y).mean(axis=-3, keepdims=True))
        return gx.astype(x.dtype), (g * y).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return record(out, (x, gain, bias), rule)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return record(x.data, (x,), lambda g: (g,))
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    *lead, h, w = x.shape

    def rule(g):
        return (g.reshape(*lead, h, factor, w, factor).sum(axis=(-3, -1)),)

    return record(out, (x,), rule)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    return concat([a, b])


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Stack feature maps along the channel axis (``-3``), in order."""
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or p.shape[:-3] != ref[:-3] or p.shape[-2:] != ref[-2:]:
            raise ShapeError(f"concat: spatial/batch mismatch {ref} vs {p.shape}")
    sizes = [p.shape[-3] for p in parts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=-3)

    def rule(g):
        return tuple(g[..., bounds[i]:bounds[i + 1], :, :] for i in range(len(parts)))

    return record(out, tuple(parts), rule)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    def rule(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop, :, :] = g
        return (gx,)

    return record(x.data[..., start:stop, :, :].copy(), (x,), rule)


# -- loss --------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under a softmax."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (N, C) logits, got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} rows")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray(np.mean(lse - z[rows, labels]), dtype=logits.dtype)

    def rule(g):
        probs = np.exp(z - lse[:, None])
        probs[rows, labels] -= 1
        return ((g * probs / n).astype(logits.dtype),)

    return record(loss, (logits,), rule)
