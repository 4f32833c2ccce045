"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is an implicit tape: every tensor produced by an operation receives
a monotonically increasing node id, so creation order is a topological order
(inputs always precede outputs). ``backward`` walks the reachable subgraph in
exact reverse creation order and accumulates gradients into ``.grad``.

Design constraints:
  * float64 everywhere; shapes are explicit and binary elementwise ops are
    strict about them (no silent broadcasting).
  * tensors are treated as immutable values after creation,
  * a forward/backward pass belongs to one logical thread; independent runs
    may proceed concurrently because there is no shared tape object.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ContractError, DomainError, NumericError, ShapeError

_node_ids = itertools.count()

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

LOG_CLAMP_EPS = 1e-12
L2_NORM_EPS = 1e-8


class _GradFlag(threading.local):
    enabled = True


_grad_flag = _GradFlag()


@contextmanager
def no_grad():
    """Disable graph recording inside the block (e.g. teacher forward)."""
    prev = _grad_flag.enabled
    _grad_flag.enabled = False
    try:
        yield
    finally:
        _grad_flag.enabled = prev


def grad_enabled() -> bool:
    return _grad_flag.enabled


class Tensor:
    """n-d float64 array plus reverse-mode bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_id", "_parents", "_bw", "_op")

    def __init__(self, data, requires_grad: bool = False, validate: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if validate and not np.all(np.isfinite(arr)):
            raise NumericError("tensor contains non-finite entries")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._id = next(_node_ids)
        self._parents = ()
        self._bw = None
        self._op = None

    @classmethod
    def _from_op(cls, data, parents, bw, op_name):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._id = next(_node_ids)
        track = _grad_flag.enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._bw = bw
            out._op = op_name
        else:
            out._parents = ()
            out._bw = None
            out._op = None
        return out

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul_scalar(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, float(p))

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, validate=False)


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every reachable tensor's ``.grad``.

    The loss must be scalar. Traversal order is reverse node-creation order
    over the reachable subgraph, which is a valid reverse topological order.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    # reachable set, iteratively (graphs can be long)
    seen = {loss._id: loss}
    stack = [loss]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p._id not in seen:
                seen[p._id] = p
                stack.append(p)
    order = sorted(seen.values(), key=lambda t: t._id, reverse=True)
    _accum(loss, np.ones_like(loss.data))
    for node in order:
        if node._bw is not None and node.grad is not None:
            node._bw(node.grad)


# -- elementwise (strict shapes) -------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return Tensor._from_op(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return Tensor._from_op(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return Tensor._from_op(a.data * b.data, (a, b), bw, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")

    def bw(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return Tensor._from_op(a.data / b.data, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, -g)

    return Tensor._from_op(-a.data, (a,), bw, "neg")


def add_scalar(a: Tensor, c: float) -> Tensor:
    def bw(g):
        _accum(a, g)

    return Tensor._from_op(a.data + c, (a,), bw, "add_scalar")


def mul_scalar(a: Tensor, c: float) -> Tensor:
    def bw(g):
        _accum(a, g * c)

    return Tensor._from_op(a.data * c, (a,), bw, "mul_scalar")


def pow_scalar(a: Tensor, p: float) -> Tensor:
    out_data = a.data**p

    def bw(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return Tensor._from_op(out_data, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g):
        _accum(a, g * out_data)

    return Tensor._from_op(out_data, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, g / a.data)

    return Tensor._from_op(np.log(a.data), (a,), bw, "log")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    mask = a.data >= lo

    def bw(g):
        _accum(a, g * mask)

    return Tensor._from_op(np.maximum(a.data, lo), (a,), bw, "clamp_min")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)

    return Tensor._from_op(np.maximum(a.data, 0.0), (a,), bw, "relu")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        _accum(a, g * (cdf + x * pdf))

    return Tensor._from_op(x * cdf, (a,), bw, "gelu")


# -- reductions / shape ------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, np.full_like(a.data, float(g)))

    return Tensor._from_op(np.asarray(a.data.sum()), (a,), bw, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    return mul_scalar(sum_all(a), 1.0 / a.size)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bw(g):
        _accum(a, g.reshape(a.shape))

    return Tensor._from_op(a.data.reshape(shape), (a,), bw, "reshape")


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(a, (a.shape[0], -1))


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return Tensor._from_op(a.data @ b.data, (a, b), bw, "matmul")


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature bias: x[n,k]+b[k] or x[n,c,h,w]+b[c]."""
    if b.ndim != 1:
        raise ShapeError(f"bias_add: bias must be 1-d, got {b.shape}")
    if x.ndim == 2:
        if x.shape[1] != b.shape[0]:
            raise ShapeError(f"bias_add: {x.shape} vs bias {b.shape}")
        out_data = x.data + b.data
        reduce_axes = (0,)
    elif x.ndim == 4:
        if x.shape[1] != b.shape[0]:
            raise ShapeError(f"bias_add: {x.shape} vs bias {b.shape}")
        out_data = x.data + b.data[None, :, None, None]
        reduce_axes = (0, 2, 3)
    else:
        raise ShapeError(f"bias_add: unsupported input rank {x.ndim}")

    def bw(g):
        _accum(x, g)
        _accum(b, g.sum(axis=reduce_axes))

    return Tensor._from_op(out_data, (x, b), bw, "bias_add")


# -- softmax / losses --------------------------------------------------------

def softmax(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Row softmax of logits/temperature with max-subtraction stabilization."""
    if temperature <= 0:
        raise DomainError(f"softmax temperature must be > 0, got {temperature}")
    if logits.ndim != 2:
        raise ShapeError(f"softmax expects (batch, m) logits, got {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("softmax received non-finite logits")
    z = logits.data / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        _accum(logits, (g - inner) * y / temperature)

    return Tensor._from_op(y, (logits,), bw, "softmax")


def cross_entropy(target: Tensor, prediction: Tensor) -> Tensor:
    """Batch sum of -sum_j target_j * log(prediction_j).

    Both arguments are rows of probabilities; predictions are clamped below
    at 1e-12 before the log so near-zero teacher mass cannot produce -inf.
    """
    if target.shape != prediction.shape:
        raise ShapeError(
            f"cross_entropy: target {target.shape} vs prediction {prediction.shape}"
        )
    logp = log(clamp_min(prediction, LOG_CLAMP_EPS))
    return neg(sum_all(mul(target, logp)))


def entropy(p: np.ndarray) -> float:
    """Batch-summed entropy of probability rows (plain float, no graph)."""
    q = np.maximum(p, LOG_CLAMP_EPS)
    return float(-(p * np.log(q)).sum())


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-row KL(p||q) for arrays of probability rows."""
    pc = np.maximum(p, LOG_CLAMP_EPS)
    qc = np.maximum(q, LOG_CLAMP_EPS)
    return (p * (np.log(pc) - np.log(qc))).sum(axis=1)


def l2_normalize(x: Tensor, eps: float = L2_NORM_EPS, axis: int = -1) -> Tensor:
    """x / max(||x||_2, eps) along ``axis``; the eps clamp keeps the zero
    vector (and its gradient) finite."""
    n_raw = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    n = np.maximum(n_raw, eps)
    y = x.data / n
    unclamped = n_raw >= eps

    def bw(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, g / n - unclamped * y * inner / n)

    return Tensor._from_op(y, (x,), bw, "l2_normalize")


# -- convolution / pooling ---------------------------------------------------

def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution, NCHW layout, square stride/padding, no bias."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input/weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ShapeError(f"conv2d: input channels {c} != weight channels {c2}")
    s, p = int(stride), int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    oh = (h + 2 * p - kh) // s + 1
    ow = (wd + 2 * p - kw) // s + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{wd}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    # (n, c, oh, ow, kh, kw) -> (n*oh*ow, c*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * oh * ow, c * kh * kw
    )
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, o)
        _accum(w, (g2.T @ cols).reshape(w.shape))
        dcols = (g2 @ wmat).reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + s * oh : s, j : j + s * ow : s] += dcols[:, :, i, j]
        _accum(x, dxp[:, :, p : p + h, p : p + wd] if p else dxp)

    return Tensor._from_op(np.ascontiguousarray(out), (x, w), bw, "conv2d")


def _pool_windows(data: np.ndarray):
    n, c, h, w = data.shape
    hh, ww = h // 2, w // 2
    if hh == 0 or ww == 0:
        raise ShapeError(f"pool2d: spatial dims too small in {data.shape}")
    crop = data[:, :, : 2 * hh, : 2 * ww]
    win = crop.reshape(n, c, hh, 2, ww, 2).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(n, c, hh, ww, 4), (n, c, h, w, hh, ww)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; odd trailing rows/cols are dropped.
    Ties route the gradient to the first (row-major) max in the window."""
    win, (n, c, h, w, hh, ww) = _pool_windows(x.data)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        dwin = np.zeros((n, c, hh, ww, 4))
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dcrop = dwin.reshape(n, c, hh, ww, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros((n, c, h, w))
        dx[:, :, : 2 * hh, : 2 * ww] = dcrop.reshape(n, c, 2 * hh, 2 * ww)
        _accum(x, dx)

    return Tensor._from_op(out, (x,), bw, "maxpool2d")


def avgpool2d(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2; odd trailing rows/cols dropped."""
    win, (n, c, h, w, hh, ww) = _pool_windows(x.data)
    out = win.mean(axis=-1)

    def bw(g):
        dwin = np.repeat(g[..., None] * 0.25, 4, axis=-1)
        dcrop = dwin.reshape(n, c, hh, ww, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros((n, c, h, w))
        dx[:, :, : 2 * hh, : 2 * ww] = dcrop.reshape(n, c, 2 * hh, 2 * ww)
        _accum(x, dx)

    return Tensor._from_op(out, (x,), bw, "avgpool2d")


def spatial_mean(x: Tensor) -> Tensor:
    """Global average pooling: (n, c, h, w) -> (n, c)."""
    if x.ndim != 4:
        raise ShapeError(f"spatial_mean expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def bw(g):
        _accum(x, np.broadcast_to(g[:, :, None, None] * scale, (n, c, h, w)))

    return Tensor._from_op(x.data.mean(axis=(2, 3)), (x,), bw, "spatial_mean")


# -- normalization -----------------------------------------------------------

def _param_bshape(x_ndim: int):
    # gamma/beta broadcast shape: feature axis is 1 for both 2-d and 4-d input
    return (1, -1) if x_ndim == 2 else (1, -1, 1, 1)


def _norm_affine(x, gamma, beta, mean, var, stat_axes, stats_from_x, eps):
    """Shared normalize-and-affine kernel for batch and layer norm.

    ``stats_from_x`` selects the backward path: True when mean/var were
    computed from x over ``stat_axes`` (train-mode BN, layer norm), False
    when they are constants (eval-mode BN with running stats).
    """
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    gb = gamma.data.reshape(_param_bshape(x.ndim))
    out = gb * xhat + beta.data.reshape(_param_bshape(x.ndim))
    m = 1
    for ax in stat_axes:
        m *= x.shape[ax]

    def bw(g):
        pshape = gamma.shape
        red = tuple(ax for ax in range(x.ndim) if ax != 1)
        _accum(gamma, (g * xhat).sum(axis=red).reshape(pshape))
        _accum(beta, g.sum(axis=red).reshape(pshape))
        dxhat = g * gb
        if stats_from_x:
            s1 = dxhat.sum(axis=stat_axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=stat_axes, keepdims=True)
            _accum(x, inv / m * (m * dxhat - s1 - xhat * s2))
        else:
            _accum(x, dxhat * inv)

    return Tensor._from_op(out, (x, gamma, beta), bw, "norm_affine")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch-statistics normalization with running-stat tracking.

    Train mode normalizes by the batch's (biased) statistics and updates the
    running buffers in place; eval mode normalizes by the running buffers.
    Running variance stores the biased batch variance so that eval-mode
    outputs converge exactly to train-mode outputs on stationary data.
    """
    stat_axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = _param_bshape(x.ndim)
    if training:
        mean = x.data.mean(axis=stat_axes, keepdims=True)
        var = x.data.var(axis=stat_axes, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(-1)
        return _norm_affine(x, gamma, beta, mean, var, stat_axes, True, eps)
    mean = running_mean.reshape(bshape)
    var = running_var.reshape(bshape)
    return _norm_affine(x, gamma, beta, mean, var, stat_axes, False, eps)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Batch-independent normalization over each sample's feature axes with
    per-feature (2-d) or per-channel (4-d) affine parameters."""
    stat_axes = (1,) if x.ndim == 2 else (1, 2, 3)
    mean = x.data.mean(axis=stat_axes, keepdims=True)
    var = x.data.var(axis=stat_axes, keepdims=True)
    return _norm_affine(x, gamma, beta, mean, var, stat_axes, True, eps)
