"""Define-by-run reverse-mode autodiff over dense numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to input gradients.  ``backward`` walks
the recorded nodes in exact reverse creation order.

Image ops expect NCHW layout.  Arrays are float32 unless a tensor is created
with an explicit dtype (gradient checks run in float64).
"""
import contextlib
import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32

_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._id = next(_ids)
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    def __len__(self):
        return len(self.data)

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

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(data, parents, backward_fn, op):
    """Wrap an op result, recording it in the graph when any parent needs grad."""
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._id = next(_ids)
    out._op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def backward(loss, grad=None):
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` to reset.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")

    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    grads = {loss._id: np.asarray(grad, dtype=loss.dtype)}
    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        g = grads.pop(node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bw, "sub")


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a) if not isinstance(b, Tensor) else b
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw, "div")


def square(x):
    out = x.data * x.data

    def bw(g):
        return (2.0 * g * x.data,)

    return _make(out, (x,), bw, "square")


def tabs(x):
    out = np.abs(x.data)

    def bw(g):
        return (g * np.sign(x.data),)

    return _make(out, (x,), bw, "abs")


def log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def bw(g):
        return (g / x.data,)

    return _make(out, (x,), bw, "log")


def clip(x, lo, hi):
    out = np.clip(x.data, lo, hi)

    def bw(g):
        return (g * ((x.data >= lo) & (x.data <= hi)),)

    return _make(out, (x,), bw, "clip")


def tsum(x, axis=None, keepdims=False):
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = np.mean(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype, copy=True),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), bw, "mean")


def broadcast_to(x, shape):
    out = np.broadcast_to(x.data, shape).copy()

    def bw(g):
        return (_unbroadcast(g, x.shape),)

    return _make(out, (x,), bw, "broadcast_to")


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make(out, tensors, bw, "concat")


def slice_batch(x, lo, hi):
    """``x[lo:hi]`` along the batch axis."""
    out = x.data[lo:hi]

    def bw(g):
        full = np.zeros_like(x.data)
        full[lo:hi] = g
        return (full,)

    return _make(out, (x,), bw, "slice")


# ---------------------------------------------------------------------------
# activations


def relu(x):
    mask = x.data >= 0
    out = x.data * mask

    def bw(g):
        return (g * mask,)

    return _make(out, (x,), bw, "relu")


def leaky_relu(x, slope=0.2):
    scale = np.where(x.data >= 0, 1.0, slope).astype(x.dtype)
    out = x.data * scale

    def bw(g):
        return (g * scale,)

    return _make(out, (x,), bw, "leaky_relu")


def _sigmoid(z):
    # split on sign so exp never overflows
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)


def sigmoid(x):
    out = _sigmoid(x.data)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), bw, "sigmoid")


def activation(x, kind, slope=0.2):
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# convolutions


def _check4(x, name):
    if x.ndim != 4:
        raise DimensionError(f"{name} must be rank-4 NCHW, got shape {x.shape}")


def conv_output_size(size, k, stride=1, padding=0, dilation=1):
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1):
    """2-D cross-correlation; ``weight`` is (C_out, C_in, k, k)."""
    _check4(x, "input")
    _check4(weight, "weight")
    n, c, h, w = x.shape
    c_out, c_in, k, k2 = weight.shape
    if c != c_in or k != k2:
        raise DimensionError(f"input channels {c} vs weight {weight.shape}")
    if stride < 1 or dilation < 1:
        raise DimensionError("stride and dilation must be >= 1")
    ho = conv_output_size(h, k, stride, padding, dilation)
    wo = conv_output_size(w, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {k} (dilation {dilation}) larger than padded input {h}x{w}")
    span = dilation * (k - 1) + 1
    p = padding

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (span, span), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride, ::dilation, ::dilation]
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            cols = np.tensordot(g, weight.data, axes=([1], [0]))  # N,Ho,Wo,C,k,k
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            hs = (ho - 1) * stride + 1
            ws = (wo - 1) * stride + 1
            for i in range(k):
                for j in range(k):
                    r, s = i * dilation, j * dilation
                    gxp[:, :, r : r + hs : stride, s : s + ws : stride] += cols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    """Gradient of :func:`conv2d` w.r.t. its input; ``weight`` is (C_in, C_out, k, k).

    Output size is ``(H-1)*stride - 2*padding + k + output_padding``.
    """
    _check4(x, "input")
    _check4(weight, "weight")
    n, c, h, w = x.shape
    c_in, c_out, k, k2 = weight.shape
    if c != c_in or k != k2:
        raise DimensionError(f"input channels {c} vs weight {weight.shape}")
    if stride < 1:
        raise DimensionError("stride must be >= 1")
    if output_padding < 0 or (output_padding and output_padding >= stride):
        raise DimensionError("output_padding must be smaller than stride")
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (w - 1) * stride - 2 * padding + k + output_padding
    if ho < 1 or wo < 1:
        raise DimensionError("padding too large for transpose convolution")
    p = padding
    full_h = (h - 1) * stride + k + output_padding
    full_w = (w - 1) * stride + k + output_padding
    hs = (h - 1) * stride + 1
    ws = (w - 1) * stride + 1

    cols = np.tensordot(x.data, weight.data, axes=([1], [0]))  # N,H,W,Cout,k,k
    full = np.zeros((n, c_out, full_h, full_w), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            full[:, :, i : i + hs : stride, j : j + ws : stride] += cols[..., i, j].transpose(0, 3, 1, 2)
    out = full[:, :, p : p + ho, p : p + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gfull = np.zeros((n, c_out, full_h, full_w), dtype=g.dtype)
        gfull[:, :, p : p + ho, p : p + wo] = g
        win = sliding_window_view(gfull, (k, k), axis=(2, 3))[:, :, :hs:stride, :ws:stride]
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray(
                np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
            )
        if weight.requires_grad:
            gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv_transpose2d")


# ---------------------------------------------------------------------------
# resampling


def _interp_axis(n_in, factor):
    """Source indices and lerp weights for half-pixel-centre upsampling."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def interp_matrix(n_in, factor):
    """Dense (n_out, n_in) bilinear weight matrix along one axis."""
    i0, i1, t = _interp_axis(n_in, factor)
    m = np.zeros((n_in * factor, n_in))
    rows = np.arange(n_in * factor)
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i1), t)
    return m


def bilinear_upsample(x, factor):
    """Upsample H and W by an integer factor (align_corners=False)."""
    _check4(x, "input")
    if factor < 1:
        raise DimensionError("upsample factor must be >= 1")
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,), "upsample")
    _, _, h, w = x.shape
    r0, r1, rt = _interp_axis(h, factor)
    c0, c1, ct = _interp_axis(w, factor)
    rt = rt.astype(x.dtype).reshape(1, 1, -1, 1)
    ct = ct.astype(x.dtype).reshape(1, 1, 1, -1)
    # lerp form a + t*(b-a) keeps constants exact
    top, bot = x.data[:, :, r0, :], x.data[:, :, r1, :]
    rows = top + rt * (bot - top)
    left, right = rows[:, :, :, c0], rows[:, :, :, c1]
    out = left + ct * (right - left)

    def bw(g):
        mh = interp_matrix(h, factor).astype(g.dtype)
        mw = interp_matrix(w, factor).astype(g.dtype)
        return (np.einsum("ph,ncpq,qw->nchw", mh, g, mw, optimize=True),)

    return _make(out, (x,), bw, "upsample")


def global_avg_pool(x):
    return mean(x, axis=(2, 3), keepdims=True)


# ---------------------------------------------------------------------------
# normalisation


def batchnorm(x, gamma, beta, running_mean, running_var, training=True, momentum=0.1, eps=1e-5, update_stats=True):
    """Per-channel batch normalisation.

    ``running_mean``/``running_var`` are Tensors updated in place in training
    mode unless ``update_stats`` is false.
    """
    _check4(x, "input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have length {c}")
    shape = (1, c, 1, 1)
    if training:
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_stats:
            unbiased = var * m / max(m - 1, 1)
            running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mu
            running_var.data[...] = (1 - momentum) * running_var.data + momentum * unbiased
    else:
        mu, var = running_mean.data, running_var.data
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shape)
            if training:
                m = g.shape[0] * g.shape[2] * g.shape[3]
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = inv.reshape(shape) / m * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv.reshape(shape)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw, "batchnorm")


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(f, inputs, h=1e-3, tol=1e-3, max_entries=None, seed=0):
    """Compare analytic gradients of scalar ``f(*inputs)`` with central differences.

    ``inputs`` are cast to float64 copies.  With ``max_entries`` only that many
    randomly chosen scalar entries (over all inputs) are perturbed.  Returns a
    dict with ``max_rel_err`` and ``passed``.

    Relative error per entry is ``|a - n| / max(|a|, |n|, 1e-3 * scale, 1e-10)``
    where ``scale`` is the largest numeric gradient magnitude, so entries whose
    true gradient is essentially zero are judged against the gradient's scale.
    """
    if not 1e-4 <= h <= 1e-2:
        raise ValueError("h must lie in [1e-4, 1e-2]")
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    xs = [Tensor(np.array(t.data, dtype=np.float64), requires_grad=True, dtype=np.float64) for t in inputs]

    loss = f(*xs)
    backward(loss)
    analytic = [x.grad if x.grad is not None else np.zeros_like(x.data) for x in xs]

    entries = [(ti, fi) for ti, x in enumerate(xs) for fi in range(x.data.size)]
    if max_entries is not None and max_entries < len(entries):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(entries), size=max_entries, replace=False)
        entries = [entries[i] for i in sorted(pick)]

    a_vals, n_vals = [], []
    with no_grad():
        for ti, fi in entries:
            flat = xs[ti].data.reshape(-1)
            orig = flat[fi]
            flat[fi] = orig + h
            fp = float(f(*xs).data)
            flat[fi] = orig - h
            fm = float(f(*xs).data)
            flat[fi] = orig
            n_vals.append((fp - fm) / (2 * h))
            a_vals.append(analytic[ti].reshape(-1)[fi])
    a_vals, n_vals = np.array(a_vals), np.array(n_vals)
    scale = np.max(np.abs(n_vals)) if n_vals.size else 0.0
    denom = np.maximum.reduce([np.abs(a_vals), np.abs(n_vals), np.full_like(n_vals, 1e-3 * scale), np.full_like(n_vals, 1e-10)])
    rel = np.abs(a_vals - n_vals) / denom if n_vals.size else np.zeros(0)
    max_rel = float(rel.max()) if rel.size else 0.0
    return {
        "max_rel_err": max_rel,
        "passed": max_rel <= tol,
        "checked": len(entries),
        "analytic": a_vals,
        "numeric": n_vals,
    }
