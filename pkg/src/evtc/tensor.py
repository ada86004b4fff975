"""Dense tensors with reverse-mode automatic differentiation.

Data lives in contiguous row-major numpy buffers (float32 for training,
float64 for verification). Every differentiable op links its output to its
inputs; ``backward`` replays the recorded operations in reverse topological
order and then consumes the tape. Elementwise broadcasting is restricted to
exact-shape or scalar operands; ops with a richer internal contract (conv
bias, linear bias, layer_norm gain) own their broadcasting explicitly.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ContractError, DimensionError

_SUPPORTED_DTYPES = (np.float32, np.float64)

# tanh approximation of gelu; the constants are part of the op contract so
# that results are reproducible across implementations.
GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
GELU_C1 = 0.044715

LAYER_NORM_EPS = 1e-5

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional array with optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps", "_released")

    def __init__(self, data, dtype=None, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _SUPPORTED_DTYPES:
            arr = arr.astype(np.float32)
        if arr.dtype not in _SUPPORTED_DTYPES:
            raise ContractError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        # asarray(order="C") keeps 0-d shapes (ascontiguousarray would promote to 1-d)
        self.data = arr if arr.flags["C_CONTIGUOUS"] else np.asarray(arr, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = None
        self._vjps = None
        self._released = False

    # ------------------------------------------------------------------
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

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def is_leaf(self):
        return self._parents is None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # ------------------------------------------------------------------
    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g


class Tape:
    """Ordered record of the differentiable ops reachable from one output.

    ``nodes`` is a topological order: every operation's inputs appear before
    the operation itself. The backward pass walks it once, in reverse.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        nodes = []
        seen = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._parents is not None:
                for p in reversed(node._parents):
                    if id(p) not in seen:
                        stack.append((p, False))
        return cls(nodes)


def _record(out: Tensor, parents, vjps):
    """Attach graph edges to an op output (only if grad mode is on)."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
    return out


def backward(loss: Tensor):
    """Populate ``grad`` on every requires_grad leaf below ``loss``.

    Consumes the tape: the graph is released afterwards and a second
    backward through the same output raises.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise ContractError("tape already consumed by a previous backward")
    tape = Tape.from_output(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._parents is None or node.grad is None:
            continue
        g = node.grad
        for parent, vjp in zip(node._parents, node._vjps):
            if parent.requires_grad and vjp is not None:
                parent._accumulate(vjp(g))
    for node in tape.nodes:
        if node._parents is not None:
            node._parents = None
            node._vjps = None
            node._released = True
            node.grad = None  # free intermediate grads; leaves keep theirs


# ----------------------------------------------------------------------
# helpers

def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_same_dtype(a: Tensor, b: Tensor):
    if a.dtype != b.dtype:
        raise ContractError(f"dtype mismatch: {a.dtype} vs {b.dtype}")


def _binary_shapes(a: Tensor, b: Tensor):
    """Exact-shape or scalar operands only; returns the output shape."""
    if a.shape == b.shape:
        return a.shape
    if a.size == 1:
        return b.shape
    if b.size == 1:
        return a.shape
    raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


def _unbroadcast(g, shape):
    """Reduce a gradient back to a scalar operand's shape."""
    if g.shape == tuple(shape):
        return g
    return g.sum().reshape(shape)


# ----------------------------------------------------------------------
# elementwise ops

def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)
    _check_same_dtype(a, b)
    _binary_shapes(a, b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), (lambda g: _unbroadcast(g, a.shape),
                                 lambda g: _unbroadcast(g, b.shape)))


def sub(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)
    _check_same_dtype(a, b)
    _binary_shapes(a, b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), (lambda g: _unbroadcast(g, a.shape),
                                 lambda g: _unbroadcast(-g, b.shape)))


def mul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)
    _check_same_dtype(a, b)
    _binary_shapes(a, b)
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), (lambda g: _unbroadcast(g * b.data, a.shape),
                                 lambda g: _unbroadcast(g * a.data, b.shape)))


def scale(x: Tensor, c) -> Tensor:
    c = float(c)
    out = Tensor(x.data * x.dtype.type(c))
    return _record(out, (x,), (lambda g: g * c,))


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    return _record(out, (x,), (lambda g: g * (x.data > 0),))


def gelu(x: Tensor) -> Tensor:
    d = x.data
    inner = GELU_C0 * (d + GELU_C1 * d ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * d * (1.0 + t))

    def vjp(g):
        dinner = GELU_C0 * (1.0 + 3.0 * GELU_C1 * d ** 2)
        return g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t ** 2) * dinner)

    return _record(out, (x,), (vjp,))


# ----------------------------------------------------------------------
# reductions / shape ops

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _axis_tuple(axis, x.ndim)
    out = Tensor(x.data.sum(axis=axes, keepdims=keepdims))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return np.broadcast_to(g, x.shape).copy()

    return _record(out, (x,), (vjp,))


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _axis_tuple(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    out = Tensor(x.data.mean(axis=axes, keepdims=keepdims))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return np.broadcast_to(g, x.shape).copy() / count

    return _record(out, (x,), (vjp,))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} (size {x.size}) to {shape}")
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), (lambda g: g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for ndim {x.ndim}")
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    return _record(out, (x,), (lambda g: np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors, axis=-1) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * tensors[0].ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: np.ascontiguousarray(g[sl])

    return _record(out, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    """Block-replicate the last two axes by an integer factor."""
    if x.ndim < 2:
        raise DimensionError("nearest_upsample needs at least 2 dimensions")
    factor = int(factor)
    if factor < 1:
        raise DimensionError(f"upsample factor must be >= 1, got {factor}")
    out = Tensor(x.data.repeat(factor, axis=-2).repeat(factor, axis=-1))
    lead = x.shape[:-2]
    h, w = x.shape[-2:]

    def vjp(g):
        return g.reshape(*lead, h, factor, w, factor).sum(axis=(-3, -1))

    return _record(out, (x,), (vjp,))


# ----------------------------------------------------------------------
# matmul / linear / conv

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"leading (batch) dims must match exactly: {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def vjp_a(g):
        return np.matmul(g, np.swapaxes(b.data, -1, -2))

    def vjp_b(g):
        return np.matmul(np.swapaxes(a.data, -1, -2), g)

    return _record(out, (a, b), (vjp_a, vjp_b))


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[..., din] @ w[din, dout] (+ bias[dout])."""
    _check_same_dtype(x, w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: {x.shape} x {w.shape}")
    out_data = np.matmul(x.data, w.data)
    if bias is not None:
        if bias.shape != (w.shape[1],):
            raise DimensionError(f"linear bias shape {bias.shape} != ({w.shape[1]},)")
        out_data = out_data + bias.data
    out = Tensor(out_data)

    def vjp_x(g):
        return np.matmul(g, w.data.T)

    def vjp_w(g):
        return np.matmul(x.data.reshape(-1, w.shape[0]).T, g.reshape(-1, w.shape[1]))

    def vjp_b(g):
        return g.reshape(-1, w.shape[1]).sum(axis=0)

    parents = (x, w) if bias is None else (x, w, bias)
    vjps = (vjp_x, vjp_w) if bias is None else (vjp_x, vjp_w, vjp_b)
    return _record(out, parents, vjps)


def _conv_out_size(size, k, stride, padding):
    span = size + 2 * padding - k
    if span < 0:
        raise DimensionError(f"kernel size {k} exceeds padded input {size + 2 * padding}")
    if span % stride != 0:
        raise DimensionError(
            f"non-integer output size: (size={size} + 2*pad={padding} - k={k}) not divisible by stride={stride}")
    return span // stride + 1


def _im2col(xp, kh, kw, stride, hout, wout):
    n, cin = xp.shape[:2]
    cols = np.empty((n, cin, kh, kw, hout, wout), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * hout:stride, j:j + stride * wout:stride]
    return cols.reshape(n, cin * kh * kw, hout * wout)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation convolution on NCHW input with OIHW kernels."""
    _check_same_dtype(x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise DimensionError(f"input channels {cin} != kernel channels {cin_w}")
    hout = _conv_out_size(h, kh, stride, padding)
    wout = _conv_out_size(wd, kw, stride, padding)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, hout, wout)          # (N, Cin*kh*kw, L)
    w2 = w.data.reshape(cout, -1)
    out_data = np.matmul(w2, cols).reshape(n, cout, hout, wout)
    if bias is not None:
        if bias.shape != (cout,):
            raise DimensionError(f"conv bias shape {bias.shape} != ({cout},)")
        out_data = out_data + bias.data[:, None, None]
    out = Tensor(out_data)

    def vjp_x(g):
        g2 = g.reshape(n, cout, hout * wout)
        gcols = np.matmul(w2.T, g2)                          # (N, Cin*kh*kw, L)
        gcols = gcols.reshape(n, cin, kh, kw, hout, wout)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * hout:stride, j:j + stride * wout:stride] += gcols[:, :, i, j]
        if padding:
            return gxp[:, :, padding:padding + h, padding:padding + wd]
        return gxp

    def vjp_w(g):
        g2 = g.reshape(n, cout, hout * wout)
        return np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)

    def vjp_b(g):
        return g.sum(axis=(0, 2, 3))

    parents = (x, w) if bias is None else (x, w, bias)
    vjps = (vjp_x, vjp_w) if bias is None else (vjp_x, vjp_w, vjp_b)
    return _record(out, parents, vjps)


# ----------------------------------------------------------------------
# normalization / softmax

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = axis % x.ndim
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def vjp(g):
        return s * (g - (g * s).sum(axis=axis, keepdims=True))

    return _record(out, (x,), (vjp,))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = axis % x.ndim
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    out = Tensor(y)

    def vjp(g):
        return g - np.exp(y) * g.sum(axis=axis, keepdims=True)

    return _record(out, (x,), (vjp,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply learned gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    lead_axes = tuple(range(x.ndim - 1))

    def vjp_x(g):
        gxhat = g * gain.data
        return inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                      - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))

    def vjp_gain(g):
        return (g * xhat).sum(axis=lead_axes)

    def vjp_bias(g):
        return g.sum(axis=lead_axes)

    return _record(out, (x, gain, bias), (vjp_x, vjp_gain, vjp_bias))


# ----------------------------------------------------------------------
# verification harness

def finite_diff_check(f, x: np.ndarray, eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    Returns max over coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
    ``f`` maps a Tensor to a scalar Tensor; ``x`` must be float64.
    """
    x = np.ascontiguousarray(x)
    if x.dtype != np.float64:
        raise ContractError("finite_diff_check requires float64 input")
    xt = Tensor(x.copy(), requires_grad=True)
    loss = f(xt)
    backward(loss)
    g_ad = xt.grad.copy()

    g_fd = np.zeros_like(x)
    flat = x.reshape(-1)
    fd_flat = g_fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            hi = f(Tensor(x.copy())).item()
        flat[i] = orig - eps
        with no_grad():
            lo = f(Tensor(x.copy())).item()
        flat[i] = orig
        fd_flat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    return float((np.abs(g_ad - g_fd) / denom).max())


def assert_finite(x: Tensor, context: str = "tensor"):
    if not np.isfinite(x.data).all():
        from .errors import NumericalError
        raise NumericalError(f"non-finite values in {context}")


def zeros(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)
