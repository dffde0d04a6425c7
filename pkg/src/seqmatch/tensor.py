"""Dense tensors with reverse-mode automatic differentiation.

Everything is numpy underneath: a Tensor wraps one row-major array
(channels-last for image-like data) and remembers how it was produced, so a
scalar loss can push gradients back through the graph. Two dtypes are
supported: float32 for training and float64 for gradient verification.

Broadcasting is deliberately strict. Elementwise binary ops accept equal
shapes, a rank-0 operand, or a plain Python number; any other shape pairing
raises ShapeError. Axis broadcasting must go through the explicit
``expand`` op, so every replication is visible at the call site.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "softmax",
    "clamp",
    "maximum",
    "matmul",
    "conv2d",
    "max_pool2d",
    "expand",
    "stack",
    "dropout_mask",
    "zero_grad",
    "finite_diff_check",
    "save_tensor",
    "load_tensor",
    "STNS_MAGIC",
]

_F32 = np.dtype(np.float32)
_F64 = np.dtype(np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes or dtypes do not satisfy an op's contract."""


def _as_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt not in (_F32, _F64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    return dt


class Tensor:
    """One node of a dynamically built computation graph.

    ``data`` is a numpy array and is treated as immutable once the tensor
    participates in a graph; the only sanctioned in-place writers are the
    optimizer and the finite-difference checker, which both own the leaves
    they perturb. ``grad`` is populated by :meth:`backward` and accumulates
    across calls until cleared with :func:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(_as_dtype(dtype), copy=False)
        elif arr.dtype not in (_F32, _F64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- graph walk ----------------------------------------------------------

    def backward(self) -> None:
        """Run reverse-mode accumulation from this scalar node to the leaves."""
        if self.data.ndim != 0:
            raise ValueError(
                f"backward() needs a scalar loss node, got shape {self.shape}"
            )
        if not self.requires_grad:
            return
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            _check_elementwise(self, other, "add")
            out = _result(self.data + other.data, (self, other))
            if out.requires_grad:
                def backward():
                    _accum(self, _fit(out.grad, self.data))
                    _accum(other, _fit(out.grad, other.data))
                out._backward = backward
            return out
        return self._shift(float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            _check_elementwise(self, other, "sub")
            out = _result(self.data - other.data, (self, other))
            if out.requires_grad:
                def backward():
                    _accum(self, _fit(out.grad, self.data))
                    _accum(other, _fit(-out.grad, other.data))
                out._backward = backward
            return out
        return self._shift(-float(other))

    def __rsub__(self, other):
        out = _result(float(other) - self.data, (self,))
        if out.requires_grad:
            def backward():
                _accum(self, -out.grad)
            out._backward = backward
        return out

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _check_elementwise(self, other, "mul")
            out = _result(self.data * other.data, (self, other))
            if out.requires_grad:
                def backward():
                    _accum(self, _fit(other.data * out.grad, self.data))
                    _accum(other, _fit(self.data * out.grad, other.data))
                out._backward = backward
            return out
        c = float(other)
        out = _result(self.data * c, (self,))
        if out.requires_grad:
            def backward():
                _accum(self, out.grad * c)
            out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("Tensor/Tensor division is not provided; use explicit ops")
        return self * (1.0 / float(other))

    def __neg__(self):
        return self * -1.0

    def _shift(self, c: float) -> "Tensor":
        out = _result(self.data + c, (self,))
        if out.requires_grad:
            def backward():
                _accum(self, out.grad)
            out._backward = backward
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out = _result(self.data.reshape(shape), (self,))
        if out.requires_grad:
            def backward():
                _accum(self, out.grad.reshape(old))
            out._backward = backward
        return out

    def flatten(self) -> "Tensor":
        return self.reshape(-1)

    def __getitem__(self, idx) -> "Tensor":
        _check_basic_index(idx)
        out = _result(np.asarray(self.data[idx]), (self,))
        if out.requires_grad:
            def backward():
                g = np.zeros_like(self.data)
                g[idx] = out.grad
                _accum(self, g)
            out._backward = backward
        return out

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = _norm_axes(axis, self.data.ndim)
        data = self.data.sum(axis=axes, keepdims=keepdims)
        out = _result(np.asarray(data), (self,))
        if out.requires_grad:
            def backward():
                g = out.grad
                if axes is not None and not keepdims:
                    g = np.expand_dims(g, axes)
                _accum(self, np.broadcast_to(g, self.data.shape))
            out._backward = backward
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = _norm_axes(axis, self.data.ndim)
        if axes is None:
            n = self.data.size
        else:
            n = 1
            for a in axes:
                n *= self.data.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


# -- graph plumbing ----------------------------------------------------------


def _result(data: np.ndarray, inputs: tuple) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out._prev = (
        tuple(t for t in inputs if t.requires_grad) if out.requires_grad else ()
    )
    out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _fit(g: np.ndarray, target: np.ndarray) -> np.ndarray:
    # Shapes either match exactly or the target is rank 0 (the one
    # permitted scalar pairing); reduce accordingly.
    if g.shape == target.shape:
        return g
    return np.asarray(g.sum(dtype=g.dtype))


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative postorder: graphs from long sequences overflow the
    # recursion limit, so no recursion here. Each node enters the order
    # exactly once.
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
        for parent in node._prev:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ShapeError(
            f"{op}: mixed dtypes {a.data.dtype} and {b.data.dtype}; cast explicitly"
        )
    if a.shape == b.shape or a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise ShapeError(
        f"{op}: operand shapes {a.shape} and {b.shape} must match exactly "
        "(rank-0 scalars are the only exception)"
    )


def _check_basic_index(idx) -> None:
    items = idx if isinstance(idx, tuple) else (idx,)
    for it in items:
        if not isinstance(it, (int, np.integer, slice)):
            raise TypeError(
                f"only basic int/slice indexing is differentiable, got {type(it).__name__}"
            )


def _norm_axes(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- pointwise nonlinearities ------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    with np.errstate(over="ignore"):
        y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-d)), np.exp(d) / (1.0 + np.exp(d)))
    y = y.astype(d.dtype, copy=False)
    out = _result(y, (x,))
    if out.requires_grad:
        def backward():
            _accum(x, out.grad * (y * (1.0 - y)))
        out._backward = backward
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = _result(y, (x,))
    if out.requires_grad:
        def backward():
            _accum(x, out.grad * (1.0 - y * y))
        out._backward = backward
    return out


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = _result(y, (x,))
    if out.requires_grad:
        def backward():
            _accum(x, out.grad * y)
        out._backward = backward
    return out


def log(x: Tensor) -> Tensor:
    out = _result(np.log(x.data), (x,))
    if out.requires_grad:
        def backward():
            _accum(x, out.grad / x.data)
        out._backward = backward
    return out


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values into [lo, hi]; the gradient is zero where clipping bit."""
    y = np.clip(x.data, lo, hi)
    out = _result(y, (x,))
    if out.requires_grad:
        inside = (x.data >= lo) & (x.data <= hi)
        def backward():
            _accum(x, out.grad * inside)
        out._backward = backward
    return out


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise maximum; on ties the gradient goes to the first operand."""
    _check_elementwise(a, b, "maximum")
    take_a = a.data >= b.data
    out = _result(np.where(take_a, a.data, b.data), (a, b))
    if out.requires_grad:
        def backward():
            _accum(a, _fit(out.grad * take_a, a.data))
            _accum(b, _fit(out.grad * ~take_a, b.data))
        out._backward = backward
    return out


def softmax(logits: Tensor) -> Tensor:
    """Numerically stable softmax over a rank-1 tensor."""
    if logits.data.ndim != 1:
        raise ShapeError(f"softmax expects a rank-1 tensor, got shape {logits.shape}")
    z = logits.data - logits.data.max()
    e = np.exp(z)
    s = e / e.sum()
    out = _result(s, (logits,))
    if out.requires_grad:
        def backward():
            g = out.grad
            _accum(logits, s * (g - np.dot(g, s)))
        out._backward = backward
    return out


# -- structural ops ----------------------------------------------------------


def expand(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis of size n by repetition: the one sanctioned broadcast."""
    data = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    out = _result(data, (x,))
    if out.requires_grad:
        def backward():
            _accum(x, out.grad.sum(axis=axis))
        out._backward = backward
    return out


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    if not tensors:
        raise ValueError("stack needs at least one tensor")
    first = tensors[0]
    for t in tensors[1:]:
        if t.shape != first.shape or t.data.dtype != first.data.dtype:
            raise ShapeError(
                f"stack: mismatched member {t.shape}/{t.data.dtype} vs "
                f"{first.shape}/{first.data.dtype}"
            )
    out = _result(np.stack([t.data for t in tensors]), tuple(tensors))
    if out.requires_grad:
        def backward():
            for i, t in enumerate(tensors):
                _accum(t, out.grad[i])
        out._backward = backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over rank-1/rank-2 operands (vector @ vector is a dot)."""
    if not isinstance(b, Tensor):
        raise TypeError("matmul expects two Tensors")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(
            f"matmul: mixed dtypes {a.data.dtype} and {b.data.dtype}; cast explicitly"
        )
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError(f"matmul supports rank 1/2 only, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents disagree, {a.shape} @ {b.shape}")
    vec_a = a.data.ndim == 1
    vec_b = b.data.ndim == 1
    a2 = a.data[None, :] if vec_a else a.data
    b2 = b.data[:, None] if vec_b else b.data
    y = a2 @ b2
    if vec_a and vec_b:
        data = np.asarray(y[0, 0])
    elif vec_a:
        data = y[0]
    elif vec_b:
        data = y[:, 0]
    else:
        data = y
    out = _result(data, (a, b))
    if out.requires_grad:
        m, n = a2.shape[0], b2.shape[1]
        def backward():
            g2 = out.grad.reshape(m, n)
            if a.requires_grad:
                ga = g2 @ b2.T
                _accum(a, ga[0] if vec_a else ga)
            if b.requires_grad:
                gb = a2.T @ g2
                _accum(b, gb[:, 0] if vec_b else gb)
        out._backward = backward
    return out


def conv2d(x: Tensor, kernel: Tensor, padding: str = "same", stride: int = 1) -> Tensor:
    """Channels-last 2-D convolution (cross-correlation, the usual convention).

    x is [H, W, Cin] or [N, H, W, Cin]; kernel is [k1, k2, Cin, Cout].
    'same' zero-pads so the spatial extent becomes ceil(size / stride);
    'valid' applies the kernel only at fully covered positions.
    """
    if x.data.dtype != kernel.data.dtype:
        raise ShapeError(
            f"conv2d: mixed dtypes {x.data.dtype} and {kernel.data.dtype}"
        )
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be [k1, k2, Cin, Cout], got {kernel.shape}")
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be rank 3 or 4, got {x.shape}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")
    k1, k2, kcin, cout = kernel.shape
    h, w, cin = x.shape[-3:]
    if cin != kcin:
        raise ShapeError(
            f"conv2d: input {x.shape} and kernel {kernel.shape} disagree on the channel axis"
        )
    if padding == "same":
        ho = -(-h // stride)
        wo = -(-w // stride)
        pad_h = max((ho - 1) * stride + k1 - h, 0)
        pad_w = max((wo - 1) * stride + k2 - w, 0)
    elif padding == "valid":
        if k1 > h or k2 > w:
            raise ShapeError(f"conv2d: kernel {kernel.shape} does not fit valid input {x.shape}")
        pad_h = pad_w = 0
        ho = (h - k1) // stride + 1
        wo = (w - k2) // stride + 1
    else:
        raise ValueError(f"conv2d: unknown padding mode {padding!r}")
    pt, pl = pad_h // 2, pad_w // 2
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    n = xd.shape[0]
    if pad_h or pad_w:
        xp = np.zeros((n, h + pad_h, w + pad_w, cin), dtype=xd.dtype)
        xp[:, pt:pt + h, pl:pl + w, :] = xd
    else:
        xp = xd
    kd = kernel.data
    # One GEMM over gathered patches. With a 1x1 kernel the patch matrix
    # is the input itself, so this runs the exact same product as a dense
    # layer would — downstream equivalence checks lean on that.
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k1, k2), axis=(1, 2))
    cols = np.ascontiguousarray(
        windows[:, ::stride, ::stride].transpose(0, 1, 2, 4, 5, 3)
    ).reshape(n * ho * wo, k1 * k2 * cin)
    kflat = kd.reshape(k1 * k2 * cin, cout)
    out_data = (cols @ kflat).reshape(n, ho, wo, cout)
    out = _result(out_data if batched else out_data[0], (x, kernel))
    if out.requires_grad:
        hp, wp = h + pad_h, w + pad_w
        def backward():
            g = out.grad if batched else out.grad[None]
            gflat = g.reshape(-1, cout)
            if kernel.requires_grad:
                _accum(kernel, (cols.T @ gflat).reshape(k1, k2, cin, cout))
            if x.requires_grad:
                gcols = (gflat @ kflat.T).reshape(n, ho, wo, k1, k2, cin)
                gxp = np.zeros((n, hp, wp, cin), dtype=xd.dtype)
                for u in range(k1):
                    for v in range(k2):
                        gxp[:, u:u + stride * ho:stride,
                            v:v + stride * wo:stride, :] += gcols[:, :, :, u, v, :]
                gx = gxp[:, pt:pt + h, pl:pl + w, :] if pad_h or pad_w else gxp
                _accum(x, gx if batched else gx[0])
        out._backward = backward
    return out


def max_pool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping spatial max pooling over channels-last input.

    Trailing rows/columns that do not fill a complete window are dropped.
    window=1 is the identity.
    """
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"max_pool2d: input must be rank 3 or 4, got {x.shape}")
    if window < 1:
        raise ValueError(f"max_pool2d: window must be positive, got {window}")
    if window == 1:
        return x
    h, w, c = x.shape[-3:]
    ho, wo = h // window, w // window
    if ho == 0 or wo == 0:
        raise ShapeError(f"max_pool2d: window {window} exceeds input {x.shape}")
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    n = xd.shape[0]
    xc = xd[:, : ho * window, : wo * window, :]
    r = (
        xc.reshape(n, ho, window, wo, window, c)
        .swapaxes(2, 3)
        .reshape(n, ho, wo, window * window, c)
    )
    idx = r.argmax(axis=3)
    out_arr = np.take_along_axis(r, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    out = _result(out_arr if batched else out_arr[0], (x,))
    if out.requires_grad:
        def backward():
            g = out.grad if batched else out.grad[None]
            gr = np.zeros_like(r)
            np.put_along_axis(gr, idx[:, :, :, None, :], g[:, :, :, None, :], axis=3)
            gx = (
                gr.reshape(n, ho, wo, window, window, c)
                .swapaxes(2, 3)
                .reshape(n, ho * window, wo * window, c)
            )
            full = np.zeros_like(xd)
            full[:, : ho * window, : wo * window, :] = gx
            _accum(x, full if batched else full[0])
        out._backward = backward
    return out


def dropout_mask(shape, drop_rate: float, rng: np.random.Generator, dtype) -> Tensor:
    """Inverted-dropout mask: zero with probability drop_rate, else 1/(1-drop_rate)."""
    if not 0.0 <= drop_rate < 1.0:
        raise ValueError(f"drop_rate must lie in [0, 1), got {drop_rate}")
    keep = 1.0 - drop_rate
    m = (rng.random(shape) < keep).astype(_as_dtype(dtype)) * (1.0 / keep)
    return Tensor(m.astype(_as_dtype(dtype), copy=False))


# -- gradient verification ---------------------------------------------------


def finite_diff_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float | None = None,
) -> dict[str, float]:
    """Compare reverse-mode gradients of f() against central differences.

    f must rebuild its graph from the current leaf values on every call.
    Each parameter block gets one relative error:
    ||g_ad - g_fd|| / max(||g_ad|| + ||g_fd||, tiny), computed over the
    whole block so near-zero single coordinates do not drown the signal.
    Non-finite losses abort with the offending parameter named.
    """
    if not params:
        raise ValueError("finite_diff_check needs at least one parameter")
    if eps is None:
        dt = next(iter(params.values())).data.dtype
        eps = 1e-4 if dt == _F64 else 1e-2
    zero_grad(params.values())
    loss = f()
    if loss.data.ndim != 0:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data):
        raise FloatingPointError("loss is not finite at the evaluation point")
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    errors: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        fd = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(
                    f"non-finite loss while perturbing {name}[{i}]"
                )
            fd[i] = (fp - fm) / (2.0 * eps)
        diff = np.linalg.norm(analytic[name].reshape(-1).astype(np.float64) - fd)
        denom = np.linalg.norm(analytic[name].reshape(-1)) + np.linalg.norm(fd)
        errors[name] = 0.0 if diff < 1e-10 else float(diff / max(denom, 1e-12))
    return errors


# -- on-disk tensor format ---------------------------------------------------

STNS_MAGIC = b"STNS1"


def save_tensor(path, array: np.ndarray) -> None:
    """Write one array: 5-byte magic, u8 rank, u32-LE extents, f32-LE payload."""
    # np.ascontiguousarray would silently promote rank 0 to rank 1
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim > 255:
        raise ValueError(f"rank {arr.ndim} exceeds the format's u8 rank field")
    with open(path, "wb") as fh:
        fh.write(STNS_MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    """Read one array written by :func:`save_tensor`; returns float32."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != STNS_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:5]!r}, expected {STNS_MAGIC!r}")
    if len(blob) < 6:
        raise ValueError(f"{path}: truncated header")
    rank = blob[5]
    head = 6 + 4 * rank
    if len(blob) < head:
        raise ValueError(f"{path}: truncated extent list")
    shape = struct.unpack(f"<{rank}I", blob[6:head])
    count = 1
    for s in shape:
        count *= s
    payload = blob[head:]
    if len(payload) != 4 * count:
        raise ValueError(
            f"{path}: payload holds {len(payload)} bytes, extents {shape} need {4 * count}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
