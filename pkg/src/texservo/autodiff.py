"""Minimal reverse-mode automatic differentiation on float64 numpy buffers.

A ``Tensor`` wraps an immutable float64 array.  Primitives record onto the
active ``Tape`` (a creation-ordered list, topological by construction) when
any input requires gradients.  ``backward`` walks the tape once in reverse
and accumulates ``d(root)/d(leaf)`` into each requires-grad leaf.

Everything is single-threaded and deterministic; speed is secondary to
gradient-check fidelity, so there is no fusion and no mixed precision.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import ndtr  # Gaussian CDF, exact GELU

from .errors import ContractError, NumericError, OracleInvalidError, ShapeError

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """n-d float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}, name={self.name})"


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


class Tape:
    """Ordered record of primitive applications within one training step."""

    def __init__(self):
        self._nodes = []  # (output Tensor, input Tensors, backward fn)

    def __len__(self):
        return len(self._nodes)

    def record(self, out, inputs, backward_fn):
        self._nodes.append((out, inputs, backward_fn))


_TAPE_STACK: list[Tape] = []


@contextlib.contextmanager
def recording(tape: Tape):
    """Make ``tape`` the active tape within the block."""
    _TAPE_STACK.append(tape)
    try:
        yield tape
    finally:
        _TAPE_STACK.pop()


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(tape: Tape, root: Tensor):
    """Accumulate d(root)/d(leaf) into every requires-grad leaf on the tape.

    Returns a dict mapping leaf Tensor -> gradient array.  Fan-out gradients
    sum; calling twice without resetting ``.grad`` accumulates twice.
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.data.shape}")
    produced = {id(out) for out, _, _ in tape._nodes}
    if id(root) not in produced:
        if root.requires_grad:
            g = np.ones_like(root.data)
            root.grad = g.copy() if root.grad is None else root.grad + g
            return {root: g}
        return {}
    pending = {id(root): [root, np.ones_like(root.data)]}
    leaf_grads = {}
    for out, inputs, backward_fn in reversed(tape._nodes):
        entry = pending.pop(id(out), None)
        if entry is None:
            continue
        grads_in = backward_fn(entry[1])
        for inp, gi in zip(inputs, grads_in):
            if gi is None:
                continue
            prev = pending.get(id(inp))
            if prev is None:
                pending[id(inp)] = [inp, np.array(gi, dtype=np.float64)]
            else:
                prev[1] = prev[1] + gi
    for _, (tensor, g) in pending.items():
        if tensor.requires_grad:
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
            leaf_grads[tensor] = g
    return leaf_grads


# ---------------------------------------------------------------------------
# primitive plumbing


def _check_finite(op, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite output of primitive '{op}'")


def _make(op, data, inputs, backward_fn):
    _check_finite(op, data)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _need(cond, op, msg):
    if not cond:
        raise ShapeError(f"{op}: {msg}")


# ---------------------------------------------------------------------------
# elementwise


def add(x, y):
    data = x.data + y.data
    return _make("add", data, (x, y),
                 lambda g: (_unbroadcast(g, x.data.shape), _unbroadcast(g, y.data.shape)))


def sub(x, y):
    data = x.data - y.data
    return _make("sub", data, (x, y),
                 lambda g: (_unbroadcast(g, x.data.shape), _unbroadcast(-g, y.data.shape)))


def mul(x, y):
    data = x.data * y.data
    xd, yd = x.data, y.data
    return _make("mul", data, (x, y),
                 lambda g: (_unbroadcast(g * yd, xd.shape), _unbroadcast(g * xd, yd.shape)))


def div(x, y):
    data = x.data / y.data
    xd, yd = x.data, y.data
    return _make("div", data, (x, y),
                 lambda g: (_unbroadcast(g / yd, xd.shape),
                            _unbroadcast(-g * xd / (yd * yd), yd.shape)))


def neg(x):
    return _make("neg", -x.data, (x,), lambda g: (-g,))


def scale(x, s: float):
    s = float(s)
    return _make("scale", x.data * s, (x,), lambda g: (g * s,))


def gelu(x):
    """Exact GELU x * Phi(x) (Gaussian CDF form, not the tanh approximation)."""
    xd = x.data
    phi = ndtr(xd)
    data = xd * phi

    def bwd(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (phi + xd * pdf),)

    return _make("gelu", data, (x,), bwd)


def sigmoid(x):
    data = 1.0 / (1.0 + np.exp(-x.data))
    return _make("sigmoid", data, (x,), lambda g: (g * data * (1.0 - data),))


def relu(x):
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# matrix products


def matmul(x, y):
    _need(x.data.ndim == 2 and y.data.ndim == 2, "matmul", "rank-2 operands required")
    _need(x.data.shape[1] == y.data.shape[0], "matmul",
          f"inner dims differ: {x.data.shape} vs {y.data.shape}")
    xd, yd = x.data, y.data
    return _make("matmul", xd @ yd, (x, y),
                 lambda g: (g @ yd.T, xd.T @ g))


def bmm(x, y):
    _need(x.data.ndim == 3 and y.data.ndim == 3, "bmm", "rank-3 operands required")
    _need(x.data.shape[0] == y.data.shape[0] and x.data.shape[2] == y.data.shape[1],
          "bmm", f"batched shapes differ: {x.data.shape} vs {y.data.shape}")
    xd, yd = x.data, y.data
    return _make("bmm", xd @ yd, (x, y),
                 lambda g: (g @ yd.transpose(0, 2, 1), xd.transpose(0, 2, 1) @ g))


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape):
    old = x.data.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors, axis):
    tensors = tuple(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make("concat", data, tensors, bwd)


def narrow(x, axis, start, length):
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    shape = x.data.shape

    def bwd(g):
        gx = np.zeros(shape)
        gx[idx] = g
        return (gx,)

    return _make("narrow", np.ascontiguousarray(x.data[idx]), (x,), bwd)


# ---------------------------------------------------------------------------
# reductions


def tsum(x, axis=None, keepdims=False):
    data = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", data, (x,), bwd)


def tmean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else x.data.shape[axis]
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def l2norm(x, axis=None, keepdims=False):
    """Euclidean norm reduction with zero subgradient at the origin."""
    data = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=keepdims))
    xd = x.data

    def bwd(g):
        n = data
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
            n = np.expand_dims(n, axis)
        safe = np.where(n > 0.0, n, 1.0)
        return (g * xd / safe * (n > 0.0),)

    return _make("l2norm", data, (x,), bwd)


def softmax(x, axis):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _make("softmax", data, (x,), bwd)


# ---------------------------------------------------------------------------
# normalization


def layer_norm(x, gamma, beta, axis=-1, eps=1e-6):
    """Normalize over ``axis``; gamma/beta broadcast against x."""
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    var = xd.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    data = xhat * gamma.data + beta.data
    n = xd.shape[axis]
    gshape, bshape = gamma.data.shape, beta.data.shape

    def bwd(g):
        dgamma = _unbroadcast(g * xhat, gshape)
        dbeta = _unbroadcast(g, bshape)
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=axis, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=axis, keepdims=True))
        return (dx, dgamma, dbeta)

    _ = n
    return _make("layer_norm", data, (x, gamma, beta), bwd)


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    """Batch norm over (batch, spatial) for rank-4 maps or batch for rank-2.

    ``running_mean``/``running_var`` are plain numpy buffers updated in place
    during training; eval mode normalizes with them (affine-only backward).
    """
    xd = x.data
    if xd.ndim == 4:
        axes = (0, 2, 3)
        def ex(v):
            return v.reshape(1, -1, 1, 1)
    elif xd.ndim == 2:
        axes = (0,)
        def ex(v):
            return v.reshape(1, -1)
    else:
        raise ShapeError(f"batch_norm: rank-2 or rank-4 input required, got {xd.shape}")
    n = xd.size // xd.shape[1]
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        unbiased = var * (n / max(n - 1, 1))
        running_var *= (1.0 - momentum)
        running_var += momentum * unbiased
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(ex(var) + eps)
    xhat = (xd - ex(mu)) * inv
    data = xhat * ex(gamma.data) + ex(beta.data)

    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx = g * ex(gamma.data)
        if training:
            dx = inv * (gx - ex(gx.mean(axis=axes))
                        - xhat * ex((gx * xhat).mean(axis=axes)))
        else:
            dx = gx * inv
        return (dx, dgamma, dbeta)

    return _make("batch_norm", data, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# convolution


def _windows(xp, kh, kw):
    b, c, h, w = xp.shape
    ho, wo = h - kh + 1, w - kw + 1
    sb, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (b, c, kh, kw, ho, wo), (sb, sc, sh, sw, sh, sw), writeable=False)


def _pad2d(a, ph, pw):
    if ph == 0 and pw == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _conv_fwd_single(xd, wd, ph, pw):
    kh, kw = wd.shape[2], wd.shape[3]
    xp = _pad2d(xd, ph, pw)
    if kh == 1 and kw == 1:
        return np.einsum("oc,bchw->bohw", wd[:, :, 0, 0], xp, optimize=True)
    win = _windows(xp, kh, kw)
    return np.einsum("bcijhw,ocij->bohw", win, wd, optimize=True)


def _conv_bwd_single(g, xd, wd, ph, pw):
    kh, kw = wd.shape[2], wd.shape[3]
    xp = _pad2d(xd, ph, pw)
    h, w = xd.shape[2], xd.shape[3]
    if kh == 1 and kw == 1:
        dw = np.einsum("bohw,bchw->oc", g, xp, optimize=True)[:, :, None, None]
        dxp = np.einsum("oc,bohw->bchw", wd[:, :, 0, 0], g, optimize=True)
    else:
        win = _windows(xp, kh, kw)
        dw = np.einsum("bohw,bcijhw->ocij", g, win, optimize=True)
        gp = _pad2d(g, kh - 1, kw - 1)
        gwin = _windows(gp, kh, kw)
        wflip = wd[:, :, ::-1, ::-1]
        dxp = np.einsum("boijhw,ocij->bchw", gwin, wflip, optimize=True)
    dx = dxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else dxp
    return np.ascontiguousarray(dx), dw


def _conv_fwd_depthwise(xd, wd, ph, pw):
    kh, kw = wd.shape[2], wd.shape[3]
    win = _windows(_pad2d(xd, ph, pw), kh, kw)
    return np.einsum("bcijhw,cij->bchw", win, wd[:, 0], optimize=True)


def _conv_bwd_depthwise(g, xd, wd, ph, pw):
    kh, kw = wd.shape[2], wd.shape[3]
    h, w = xd.shape[2], xd.shape[3]
    win = _windows(_pad2d(xd, ph, pw), kh, kw)
    dw = np.einsum("bchw,bcijhw->cij", g, win, optimize=True)[:, None]
    gwin = _windows(_pad2d(g, kh - 1, kw - 1), kh, kw)
    dxp = np.einsum("bcijhw,cij->bchw", gwin, wd[:, 0, ::-1, ::-1], optimize=True)
    dx = dxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else dxp
    return np.ascontiguousarray(dx), dw


def conv2d(x, w, b=None, padding=0, groups=1):
    """Stride-1 2-D cross-correlation, NCHW layout.

    ``w`` has shape (c_out, c_in/groups, kh, kw); ``padding`` is an int or an
    (ph, pw) pair.  ``groups == c_in`` with unit multiplier is the depthwise
    case; other group counts fall back to a per-group loop.
    """
    _need(x.data.ndim == 4, "conv2d", f"rank-4 input required, got {x.data.shape}")
    _need(w.data.ndim == 4, "conv2d", f"rank-4 weight required, got {w.data.shape}")
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    xd, wd = x.data, w.data
    cin, cout = xd.shape[1], wd.shape[0]
    _need(cin % groups == 0 and cout % groups == 0, "conv2d",
          f"groups={groups} must divide c_in={cin} and c_out={cout}")
    _need(wd.shape[1] == cin // groups, "conv2d",
          f"weight c_in {wd.shape[1]} != input c_in/groups {cin // groups}")
    depthwise = groups == cin and wd.shape[1] == 1 and groups > 1

    if groups == 1:
        data = _conv_fwd_single(xd, wd, ph, pw)
    elif depthwise:
        data = _conv_fwd_depthwise(xd, wd, ph, pw)
    else:
        cg_in, cg_out = cin // groups, cout // groups
        data = np.concatenate(
            [_conv_fwd_single(xd[:, g * cg_in:(g + 1) * cg_in],
                              wd[g * cg_out:(g + 1) * cg_out], ph, pw)
             for g in range(groups)], axis=1)
    inputs = (x, w)
    if b is not None:
        _need(b.data.shape == (cout,), "conv2d", f"bias shape {b.data.shape} != ({cout},)")
        data = data + b.data.reshape(1, -1, 1, 1)
        inputs = (x, w, b)

    def bwd(g):
        if groups == 1:
            dx, dw = _conv_bwd_single(g, xd, wd, ph, pw)
        elif depthwise:
            dx, dw = _conv_bwd_depthwise(g, xd, wd, ph, pw)
        else:
            cg_in, cg_out = cin // groups, cout // groups
            parts = [_conv_bwd_single(g[:, k * cg_out:(k + 1) * cg_out],
                                      xd[:, k * cg_in:(k + 1) * cg_in],
                                      wd[k * cg_out:(k + 1) * cg_out], ph, pw)
                     for k in range(groups)]
            dx = np.concatenate([p[0] for p in parts], axis=1)
            dw = np.concatenate([p[1] for p in parts], axis=0)
        if b is not None:
            return dx, dw, g.sum(axis=(0, 2, 3))
        return dx, dw

    return _make("conv2d", data, inputs, bwd)


def conv2d_per_sample(x, w, padding=0):
    """Stride-1 conv where every batch element has its own kernel stack.

    ``x`` is (B, C_in, H, W) and ``w`` is (B, C_out, C_in, kh, kw); sample b
    is convolved with kernel stack b.  Equivalent to a grouped conv2d with
    groups == batch but evaluated in one einsum instead of a per-sample
    loop."""
    _need(x.data.ndim == 4, "conv2d_per_sample", f"rank-4 input required, got {x.data.shape}")
    _need(w.data.ndim == 5, "conv2d_per_sample", f"rank-5 weight required, got {w.data.shape}")
    _need(x.data.shape[0] == w.data.shape[0], "conv2d_per_sample",
          f"batch mismatch: {x.data.shape[0]} vs {w.data.shape[0]}")
    _need(x.data.shape[1] == w.data.shape[2], "conv2d_per_sample",
          f"channel mismatch: {x.data.shape[1]} vs {w.data.shape[2]}")
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    xd, wd = x.data, w.data
    b, cin = xd.shape[0], xd.shape[1]
    cout, kh, kw = wd.shape[1], wd.shape[3], wd.shape[4]
    h, w_sp = xd.shape[2], xd.shape[3]
    win = _windows(_pad2d(xd, ph, pw), kh, kw)           # (b,c,kh,kw,ho,wo)
    ho, wo = win.shape[4], win.shape[5]
    # flatten to batched matmuls; einsum on the 6-d strided view is slow
    win_m = np.ascontiguousarray(win).reshape(b, cin * kh * kw, ho * wo)
    w_m = wd.reshape(b, cout, cin * kh * kw)
    data = (w_m @ win_m).reshape(b, cout, ho, wo)

    def bwd(g):
        g_m = g.reshape(b, cout, ho * wo)
        dw = (g_m @ win_m.transpose(0, 2, 1)).reshape(b, cout, cin, kh, kw)
        hp, wp = ho + kh - 1, wo + kw - 1          # padded-input spatial size
        gwin = _windows(_pad2d(g, kh - 1, kw - 1), kh, kw)
        gwin_m = np.ascontiguousarray(gwin).reshape(b, cout * kh * kw, hp * wp)
        wflip = wd[:, :, :, ::-1, ::-1].transpose(0, 2, 1, 3, 4)
        wflip_m = np.ascontiguousarray(wflip).reshape(b, cin, cout * kh * kw)
        dxp = (wflip_m @ gwin_m).reshape(b, cin, hp, wp)
        dx = dxp[:, :, ph:ph + h, pw:pw + w_sp] if (ph or pw) else dxp
        return np.ascontiguousarray(dx), dw

    return _make("conv2d_per_sample", data, (x, w), bwd)


def conv1d(x, w, b=None, padding=0):
    """1-D cross-correlation over the last axis of a rank-3 (B, C, L) input."""
    _need(x.data.ndim == 3, "conv1d", f"rank-3 input required, got {x.data.shape}")
    x4 = reshape(x, (x.data.shape[0], x.data.shape[1], 1, x.data.shape[2]))
    w4 = reshape(w, (w.data.shape[0], w.data.shape[1], 1, w.data.shape[2]))
    out = conv2d(x4, w4, b, padding=(0, padding))
    return reshape(out, (out.data.shape[0], out.data.shape[1], out.data.shape[3]))


def global_avg_pool(x):
    """(B, C, H, W) -> (B, C) spatial mean."""
    _need(x.data.ndim == 4, "global_avg_pool", f"rank-4 input required, got {x.data.shape}")
    b, c, h, w = x.data.shape
    data = x.data.mean(axis=(2, 3))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (b, c, h, w)).copy(),)

    return _make("global_avg_pool", data, (x,), bwd)


# ---------------------------------------------------------------------------
# patch unfold / fold (non-overlapping, stride = patch size)


def unfold(x, patch):
    """(B, C, H, W) -> (B, C, ph*pw, n_patches) with non-overlapping patches."""
    ph, pw = (patch, patch) if isinstance(patch, int) else patch
    b, c, h, w = x.data.shape
    _need(h % ph == 0 and w % pw == 0, "unfold",
          f"patch ({ph},{pw}) must divide spatial dims ({h},{w})")
    nh, nw = h // ph, w // pw
    x6 = reshape(x, (b, c, nh, ph, nw, pw))
    x6 = transpose(x6, (0, 1, 3, 5, 2, 4))  # B,C,ph,pw,nh,nw
    return reshape(x6, (b, c, ph * pw, nh * nw))


def fold(x, patch, hw):
    """Inverse of :func:`unfold` back to spatial size ``hw``."""
    ph, pw = (patch, patch) if isinstance(patch, int) else patch
    h, w = hw
    b, c = x.data.shape[0], x.data.shape[1]
    nh, nw = h // ph, w // pw
    x6 = reshape(x, (b, c, ph, pw, nh, nw))
    x6 = transpose(x6, (0, 1, 4, 2, 5, 3))  # B,C,nh,ph,nw,pw
    return reshape(x6, (b, c, h, w))


# ---------------------------------------------------------------------------
# gradient oracle


def check_gradients(builder, wrt, eps=1e-4, samples_per_tensor=6, rng=None):
    """Max relative error between analytic and central finite differences.

    ``builder()`` must rebuild and return the scalar loss from the current
    contents of the ``wrt`` tensors; it is re-evaluated once to verify
    determinism (a mismatch raises :class:`OracleInvalidError`).  Relative
    error is |analytic - numeric| / max(1, |analytic|, |numeric|) over
    coordinates sampled from every tensor in ``wrt``.
    """
    if eps <= 0:
        raise ContractError("check_gradients: eps must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    tape = Tape()
    with recording(tape):
        root = builder()
    if root.data.size != 1:
        raise ContractError("check_gradients: builder must produce a scalar")
    base = root.data.item()
    if builder().data.item() != base:
        raise OracleInvalidError("builder is not deterministic across evaluations")
    for t in wrt:
        t.zero_grad()
    backward(tape, root)
    worst = 0.0
    for t in wrt:
        if t.grad is None:
            raise ContractError(f"tensor {t.name or t.shape} received no gradient")
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        n = flat.size
        k = min(samples_per_tensor, n)
        idxs = rng.choice(n, size=k, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = builder().data.item()
            flat[i] = orig - eps
            fm = builder().data.item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            analytic = gflat[i]
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, err)
    return worst
