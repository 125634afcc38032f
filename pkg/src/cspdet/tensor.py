"""Dense tensor engine with reverse-mode differentiation.

Tensors wrap a numpy array (float64 by default so finite-difference checks
have headroom; float32 is accepted for speed) and record a tape of parent
links plus a backward closure whenever gradient tracking is enabled.
``Tensor.backward`` replays the tape in reverse topological order, visiting
each node exactly once and accumulating gradients additively across fan-out.

Only the operators the detector needs are provided: convolution, batch
normalization, the activation family, pooling / resizing / concatenation /
stride-2 slicing, and the elementwise + reduction + gather primitives the
loss is assembled from.  There is no implicit broadcasting: binary ops take
same-shaped tensors or python scalars.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError

DTYPE = np.float64

_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def conv_out_extent(h: int, f: int, s: int, p: int, dilation: int = 1) -> int:
    """Output extent of a windowed op: floor((h + 2p - f_eff)/s) + 1."""
    f_eff = dilation * (f - 1) + 1
    return (h + 2 * p - f_eff) // s + 1


class Tensor:
    """N-dimensional array with an optional gradient buffer.

    4-D data uses (batch, channel, height, width) layout.  Instances are
    treated as immutable once produced by an operator; parameters are the
    only tensors mutated (by the optimizer, between passes).
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- inspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"

    # -- tape ------------------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def backward(self, seed: np.ndarray | None = None):
        """Accumulate gradients of ``self`` w.r.t. every tape ancestor.

        ``seed`` defaults to ones (the usual choice is a scalar loss).
        """
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, int]] = [(self, 0)]
        while stack:
            node, i = stack.pop()
            if i == 0:
                if id(node) in visited:
                    continue
                visited.add(id(node))
            if i < len(node._parents):
                stack.append((node, i + 1))
                stack.append((node._parents[i], 0))
            else:
                topo.append(node)

        if seed is None:
            seed = np.ones_like(self.data)
        self.grad = _accum(self.grad, np.asarray(seed, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def _accum(buf: np.ndarray | None, g: np.ndarray) -> np.ndarray:
    if buf is None:
        return g.copy()
    buf += g
    return buf


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str) -> Tensor:
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, op=op)
    if req:
        out._parents = parents
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, requires_grad: bool = True) -> Tensor:
    t = Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad, op="param")
    return t


# ---------------------------------------------------------------------------
# elementwise binary ops (same shape or python scalar; no broadcasting)
# ---------------------------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ "
                             "(no implicit broadcasting)")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        out = _result(a.data + float(b), (a,), "add_s")
        if out.requires_grad:
            out._backward = lambda g: _bw_copy(a, g)
        return out
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_same_shape(a, b, "add")
    out = _result(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a.grad = _accum(a.grad, g)
            if b.requires_grad:
                b.grad = _accum(b.grad, g)
        out._backward = _bw
    return out


def _bw_copy(a: Tensor, g: np.ndarray):
    if a.requires_grad:
        a.grad = _accum(a.grad, g)


def sub(a, b) -> Tensor:
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        out = _result(float(a) - b.data, (b,), "rsub_s")
        if out.requires_grad:
            out._backward = lambda g: _bw_copy_neg(b, g)
        return out
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    a = as_tensor(a)
    _check_same_shape(a, b, "sub")
    out = _result(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a.grad = _accum(a.grad, g)
            if b.requires_grad:
                b.grad = _accum(b.grad, -g)
        out._backward = _bw
    return out


def _bw_copy_neg(a: Tensor, g: np.ndarray):
    if a.requires_grad:
        a.grad = _accum(a.grad, -g)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        k = float(b)
        out = _result(a.data * k, (a,), "mul_s")
        if out.requires_grad:
            out._backward = lambda g: _bw_copy(a, g * k)
        return out
    if not isinstance(a, Tensor):
        return mul(b, a)
    _check_same_shape(a, b, "mul")
    out = _result(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        ad, bd = a.data, b.data
        def _bw(g):
            if a.requires_grad:
                a.grad = _accum(a.grad, g * bd)
            if b.requires_grad:
                b.grad = _accum(b.grad, g * ad)
        out._backward = _bw
    return out


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    a = as_tensor(a)
    _check_same_shape(a, b, "div")
    out = _result(a.data / b.data, (a, b), "div")
    if out.requires_grad:
        ad, bd = a.data, b.data
        def _bw(g):
            if a.requires_grad:
                a.grad = _accum(a.grad, g / bd)
            if b.requires_grad:
                b.grad = _accum(b.grad, -g * ad / (bd * bd))
        out._backward = _bw
    return out


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; on ties the gradient routes to the first argument."""
    _check_same_shape(a, b, "minimum")
    take_a = a.data <= b.data
    out = _result(np.where(take_a, a.data, b.data), (a, b), "minimum")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a.grad = _accum(a.grad, np.where(take_a, g, 0.0))
            if b.requires_grad:
                b.grad = _accum(b.grad, np.where(take_a, 0.0, g))
        out._backward = _bw
    return out


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first argument."""
    _check_same_shape(a, b, "maximum")
    take_a = a.data >= b.data
    out = _result(np.where(take_a, a.data, b.data), (a, b), "maximum")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a.grad = _accum(a.grad, np.where(take_a, g, 0.0))
            if b.requires_grad:
                b.grad = _accum(b.grad, np.where(take_a, 0.0, g))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------


def _unary(a: Tensor, fwd: np.ndarray, dlocal: np.ndarray, op: str) -> Tensor:
    out = _result(fwd, (a,), op)
    if out.requires_grad:
        out._backward = lambda g: _bw_copy(a, g * dlocal)
    return out


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _unary(a, e, e, "exp")


def log(a: Tensor) -> Tensor:
    return _unary(a, np.log(a.data), 1.0 / a.data, "log")


def sqrt(a: Tensor) -> Tensor:
    r = np.sqrt(a.data)
    return _unary(a, r, 0.5 / r, "sqrt")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) without overflow: max(x, 0) + log1p(e^-|x|)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _unary(a, s, s * (1.0 - s), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    return _unary(a, _softplus(a.data), _sigmoid(a.data), "softplus")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _unary(a, t, 1.0 - t * t, "tanh")


def relu(a: Tensor) -> Tensor:
    return _unary(a, np.maximum(a.data, 0.0), (a.data > 0).astype(a.data.dtype), "relu")


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    d = np.where(a.data >= 0, 1.0, slope)
    return _unary(a, np.where(a.data >= 0, a.data, slope * a.data), d, "leaky_relu")


def mish(a: Tensor) -> Tensor:
    """x * tanh(softplus(x)); smooth everywhere."""
    x = a.data
    sp = _softplus(x)
    t = np.tanh(sp)
    s = _sigmoid(x)
    return _unary(a, x * t, t + x * s * (1.0 - t * t), "mish")


_ACTIVATIONS = {
    "mish": lambda t, slope: mish(t),
    "leaky_relu": lambda t, slope: leaky_relu(t, slope),
    "relu": lambda t, slope: relu(t),
    "sigmoid": lambda t, slope: sigmoid(t),
    "none": lambda t, slope: t,
}


def activation(a: Tensor, kind: str, slope: float = 0.1) -> Tensor:
    """Apply one of {mish, leaky_relu, relu, sigmoid, none} elementwise."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation kind {kind!r}; "
                          f"choose from {sorted(_ACTIVATIONS)}") from None
    return fn(a, slope)


# ---------------------------------------------------------------------------
# reductions and gathers
# ---------------------------------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    out = _result(np.asarray(a.data.sum()), (a,), "sum")
    if out.requires_grad:
        out._backward = lambda g: _bw_copy(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype))
    return out


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = _result(np.asarray(a.data.mean()), (a,), "mean")
    if out.requires_grad:
        out._backward = lambda g: _bw_copy(a, np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype))
    return out


def take(a: Tensor, flat_index: np.ndarray) -> Tensor:
    """Gather elements by raveled index; duplicates accumulate on backward."""
    idx = np.asarray(flat_index, dtype=np.intp)
    out = _result(a.data.reshape(-1)[idx], (a,), "take")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                buf = np.zeros_like(a.data)
                np.add.at(buf.reshape(-1), idx, g)
                a.grad = _accum(a.grad, buf)
        out._backward = _bw
    return out


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis``; all other extents must agree."""
    if not tensors:
        raise DimensionError("concat: empty input list")
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(ref) or any(s[d] != ref[d] for d in range(len(ref)) if d != axis):
            raise DimensionError(f"concat: extent mismatch off axis {axis}: "
                                 f"{ref} vs {s}")
    out = _result(np.concatenate([t.data for t in tensors], axis=axis),
                  tuple(tensors), "concat")
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def _bw(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    t.grad = _accum(t.grad, g[tuple(sl)])
        out._backward = _bw
    return out


def channel_slice(a: Tensor, lo: int, hi: int) -> Tensor:
    """Contiguous channel range of an NCHW tensor."""
    c = a.data.shape[1]
    if not (0 <= lo < hi <= c):
        raise DimensionError(f"channel_slice [{lo}:{hi}] out of range for {c} channels")
    out = _result(np.ascontiguousarray(a.data[:, lo:hi]), (a,), "channel_slice")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                buf = np.zeros_like(a.data)
                buf[:, lo:hi] = g
                a.grad = _accum(a.grad, buf)
        out._backward = _bw
    return out


def stride2_slice(a: Tensor, row_offset: int, col_offset: int) -> Tensor:
    """Every-second-pixel spatial slice of an NCHW tensor."""
    if row_offset not in (0, 1) or col_offset not in (0, 1):
        raise ConfigError(f"stride2_slice offsets must be 0 or 1, "
                          f"got ({row_offset}, {col_offset})")
    out = _result(np.ascontiguousarray(a.data[:, :, row_offset::2, col_offset::2]),
                  (a,), "stride2_slice")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                buf = np.zeros_like(a.data)
                buf[:, :, row_offset::2, col_offset::2] = g
                a.grad = _accum(a.grad, buf)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int,
            dilation: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    oh = conv_out_extent(h, kh, stride, padding, dilation)
    ow = conv_out_extent(w, kw, stride, padding, dilation)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        ii = i * dilation
        for j in range(kw):
            jj = j * dilation
            cols[:, :, i, j] = x[:, :, ii:ii + stride * oh:stride,
                                 jj:jj + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(gcols: np.ndarray, xshape: tuple[int, ...], kh: int, kw: int,
            stride: int, padding: int, dilation: int, oh: int, ow: int) -> np.ndarray:
    n, c, h, w = xshape
    buf = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    g = gcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        ii = i * dilation
        for j in range(kw):
            jj = j * dilation
            buf[:, :, ii:ii + stride * oh:stride, jj:jj + stride * ow:stride] += g[:, :, i, j]
    if padding:
        buf = buf[:, :, padding:-padding, padding:-padding]
    return buf


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D convolution (cross-correlation), NCHW input and OIHW weights.

    Output spatial extents follow floor((h + 2p - f_eff)/s) + 1 with
    f_eff = dilation*(f-1) + 1.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and weight, got "
                             f"{x.data.shape} and {w.data.shape}")
    n, c, h, wd = x.data.shape
    o, ci, kh, kw = w.data.shape
    if c != ci:
        raise DimensionError(f"conv2d: input has {c} channels but weight expects {ci}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ConfigError(f"conv2d: invalid stride/padding/dilation "
                          f"({stride}, {padding}, {dilation})")
    oh = conv_out_extent(h, kh, stride, padding, dilation)
    ow = conv_out_extent(wd, kw, stride, padding, dilation)
    if oh < 1 or ow < 1:
        raise ConfigError(f"conv2d: output extent {oh}x{ow} < 1 for input "
                          f"{h}x{wd}, kernel {kh}x{kw}, stride {stride}, "
                          f"padding {padding}, dilation {dilation}")
    if b is not None and b.data.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {b.data.shape} != ({o},)")

    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding, dilation)
    w2 = w.data.reshape(o, -1)
    out_data = np.matmul(w2, cols).reshape(n, o, oh, ow)
    if b is not None:
        out_data += b.data.reshape(1, o, 1, 1)

    parents = (x, w) if b is None else (x, w, b)
    out = _result(out_data, parents, "conv2d")
    if out.requires_grad:
        def _bw(g):
            gr = g.reshape(n, o, oh * ow)
            if w.requires_grad:
                gw = np.matmul(gr, cols.transpose(0, 2, 1)).sum(axis=0)
                w.grad = _accum(w.grad, gw.reshape(w.data.shape))
            if x.requires_grad:
                gcols = np.matmul(w2.T, gr)
                gx = _col2im(gcols, x.data.shape, kh, kw, stride, padding,
                             dilation, oh, ow)
                x.grad = _accum(x.grad, gx)
            if b is not None and b.requires_grad:
                b.grad = _accum(b.grad, g.sum(axis=(0, 2, 3)))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# pooling / resizing
# ---------------------------------------------------------------------------


def maxpool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max pooling; ties route the gradient to the first window index in
    row-major order."""
    if stride is None:
        stride = kernel
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d: expected 4-D input, got {x.data.shape}")
    if padding > kernel // 2:
        raise ConfigError(f"maxpool2d: padding {padding} exceeds kernel//2 ({kernel // 2})")
    n, c, h, w = x.data.shape
    oh = conv_out_extent(h, kernel, stride, padding)
    ow = conv_out_extent(w, kernel, stride, padding)
    if oh < 1 or ow < 1:
        raise ConfigError(f"maxpool2d: output extent {oh}x{ow} < 1")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    windows = np.empty((n, c, kernel * kernel, oh, ow), dtype=x.data.dtype)
    for i in range(kernel):
        for j in range(kernel):
            windows[:, :, i * kernel + j] = xp[:, :, i:i + stride * oh:stride,
                                               j:j + stride * ow:stride]
    arg = windows.argmax(axis=2)  # first max in row-major window order
    out = _result(np.take_along_axis(windows, arg[:, :, None], axis=2)[:, :, 0],
                  (x,), "maxpool2d")
    if out.requires_grad:
        def _bw(g):
            if not x.requires_grad:
                return
            buf = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
            oi, oj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
            rows = oi * stride + arg // kernel   # (n,c,oh,ow) via broadcast
            colz = oj * stride + arg % kernel
            ni = np.arange(n)[:, None, None, None]
            ci_ = np.arange(c)[None, :, None, None]
            np.add.at(buf, (np.broadcast_to(ni, arg.shape),
                            np.broadcast_to(ci_, arg.shape), rows, colz), g)
            if padding:
                buf = buf[:, :, padding:-padding, padding:-padding]
            x.grad = _accum(x.grad, buf)
        out._backward = _bw
    return out


def global_avgpool(x: Tensor) -> Tensor:
    """Spatial mean, NCHW -> NC11."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_avgpool: expected 4-D input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    out = _result(x.data.mean(axis=(2, 3), keepdims=True), (x,), "global_avgpool")
    if out.requires_grad:
        def _bw(g):
            if x.requires_grad:
                x.grad = _accum(x.grad, np.broadcast_to(g / (h * w), x.data.shape).copy())
        out._backward = _bw
    return out


def resize_nearest(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Nearest-neighbour spatial resize; source index = floor(i*in/out)."""
    if target_h < 1 or target_w < 1:
        raise ConfigError(f"resize_nearest: target {target_h}x{target_w} must be positive")
    n, c, h, w = x.data.shape
    ri = (np.arange(target_h) * h) // target_h
    ci = (np.arange(target_w) * w) // target_w
    out = _result(np.ascontiguousarray(x.data[:, :, ri][:, :, :, ci]), (x,), "resize_nearest")
    if out.requires_grad:
        def _bw(g):
            if x.requires_grad:
                buf = np.zeros_like(x.data)
                np.add.at(buf, (slice(None), slice(None), ri[:, None], ci[None, :]), g)
                x.grad = _accum(x.grad, buf)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.03,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes by batch statistics (biased variance) and updates
    the running buffers in place: running = (1-momentum)*running + momentum*batch.
    Infer mode normalizes by the running buffers.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm2d: expected 4-D input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError(f"batchnorm2d: gamma/beta must have shape ({c},), got "
                             f"{gamma.data.shape} and {beta.data.shape}")
    m = n * h * w
    if m == 0:
        raise ConfigError("batchnorm2d: zero batch*spatial elements per channel")

    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out_data = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    out = _result(out_data, (x, gamma, beta), "batchnorm2d")
    if out.requires_grad:
        def _bw(g):
            if gamma.requires_grad:
                gamma.grad = _accum(gamma.grad, (g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta.grad = _accum(beta.grad, g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gxhat = g * gamma.data.reshape(1, c, 1, 1)
                if training:
                    s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
                    s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                    gx = (gxhat - s1 / m - xhat * s2 / m) * inv_std.reshape(1, c, 1, 1)
                else:
                    gx = gxhat * inv_std.reshape(1, c, 1, 1)
                x.grad = _accum(x.grad, gx)
        out._backward = _bw
    return out
