"""Differentiable tensor ops.

No broadcasting beyond scalars and the explicit bias helpers; mismatched
shapes raise.  Reductions accumulate in float64.
"""
from __future__ import annotations

import math

import numpy as np

from .. import kernels
from .tensor import Tensor, default_dtype as ft, make_result

# analytic multiply-add count of conv/matmul/attention, read by instrumentation
FLOPS = {"count": 0}


def _count(n):
    FLOPS["count"] += int(n)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b):
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, s):
    s = float(s)
    return make_result(a.data * ft()(s), (a,), lambda g: (g * ft()(s),))


def add_scalar(a, s):
    return make_result(a.data + ft()(s), (a,), lambda g: (g,))


def square(a):
    ad = a.data
    return make_result(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def abs(a):  # noqa: A001 - mirrors numpy naming
    ad = a.data
    return make_result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def silu(a):
    x = a.data.astype(np.float64)
    sig = 1.0 / (1.0 + np.exp(-x))
    out = (x * sig).astype(ft())

    def bwd(g):
        return ((g * (sig * (1.0 + x * (1.0 - sig)))).astype(ft()),)

    return make_result(out, (a,), bwd)


def tanh(a):
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clamp(a, lo, hi):
    mask = (a.data >= lo) & (a.data <= hi)
    return make_result(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- bias helpers


def add_bias(x, b):
    """x (N, ..., C) or NCHW plus a per-channel bias b (C,)."""
    if x.ndim == 4:
        if b.shape != (x.shape[1],):
            raise ValueError(f"add_bias: channel axis 1 has {x.shape[1]}, bias {b.shape}")
        out = x.data + b.data[None, :, None, None]
        return make_result(out, (x, b), lambda g: (g, g.sum(axis=(0, 2, 3), dtype=np.float64).astype(ft())))
    if b.shape != (x.shape[-1],):
        raise ValueError(f"add_bias: last axis has {x.shape[-1]}, bias {b.shape}")
    axes = tuple(range(x.ndim - 1))
    return make_result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes, dtype=np.float64).astype(ft())))


def add_channel_vector(x, v):
    """NCHW x plus a per-sample channel vector v (N, C)."""
    if x.ndim != 4 or v.shape != x.shape[:2]:
        raise ValueError(f"add_channel_vector: expected v {x.shape[:2]}, got {v.shape}")
    out = x.data + v.data[:, :, None, None]
    return make_result(out, (x, v), lambda g: (g, g.sum(axis=(2, 3), dtype=np.float64).astype(ft())))


# ---------------------------------------------------------------- shape ops


def reshape(a, shape):
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return make_result(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def nchw_to_tokens(x):
    """(N, C, H, W) -> (N, H*W, C), row-major over spatial positions."""
    n, c, h, w = x.shape
    return reshape(transpose(x, (0, 2, 3, 1)), (n, h * w, c))


def tokens_to_nchw(t, h, w):
    n, tok, c = t.shape
    if tok != h * w:
        raise ValueError(f"tokens_to_nchw: token axis has {tok}, expected {h}*{w}")
    return transpose(reshape(t, (n, h, w, c)), (0, 3, 1, 2))


def concat(tensors, axis):
    tensors = list(tensors)
    datas = [t.data for t in tensors]
    ref = datas[0].shape
    for d in datas[1:]:
        if d.ndim != len(ref) or any(d.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ValueError(f"concat: shapes {ref} and {d.shape} disagree off axis {axis}")
    out = np.concatenate(datas, axis=axis)
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return make_result(out, tensors, bwd)


def slice_axis(a, axis, start, stop):
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=ft())
        full[idx] = g
        return (full,)

    return make_result(np.ascontiguousarray(a.data[idx]), (a,), bwd)


# ---------------------------------------------------------------- reductions


def sum(a):  # noqa: A001
    shape = a.shape
    out = np.array(a.data.sum(dtype=np.float64), dtype=ft())
    return make_result(out, (a,), lambda g: (np.full(shape, g, dtype=ft()),))


def mean(a):
    shape, n = a.shape, a.size
    out = np.array(a.data.mean(dtype=np.float64), dtype=ft())
    return make_result(out, (a,), lambda g: (np.full(shape, g / n, dtype=ft()),))


def mean_rows(a):
    """Mean over all but the first axis -> (N,)."""
    n = a.shape[0]
    m = a.size // n
    out = a.data.reshape(n, m).mean(axis=1, dtype=np.float64).astype(ft())
    shape = a.shape

    def bwd(g):
        return (np.broadcast_to((g / m)[:, None], (n, m)).reshape(shape).astype(ft()),)

    return make_result(out, (a,), bwd)


def l1_loss(a, b):
    """Mean absolute difference."""
    return mean(abs(sub(a, b)))


def global_avg_pool(x):
    """(N, C, H, W) -> (N, C)."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(ft())

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(ft()),)

    return make_result(out, (x,), bwd)


def l2_normalize(a, eps=1e-12):
    """Normalize each row of (N, D) to unit length."""
    x = a.data.astype(np.float64)
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x / norm

    def bwd(g):
        g = g.astype(np.float64)
        return (((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm).astype(ft()),)

    return make_result(y.astype(ft()), (a,), bwd)


def row_dot(a, b):
    """Row-wise inner product of two (N, D) tensors -> (N,)."""
    _same_shape(a, b, "row_dot")
    ad, bd = a.data, b.data
    out = (ad.astype(np.float64) * bd).sum(axis=-1).astype(ft())
    return make_result(out, (a, b), lambda g: (g[:, None] * bd, g[:, None] * ad))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """(..., M, K) @ (..., K, P) with identical leading axes, or 2-D."""
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    _count(2 * ad.size * bd.shape[-1])

    def bwd(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return make_result(ad @ bd, (a, b), bwd)


def linear(x, w, b=None):
    """Token-wise affine map: x (..., D) @ w.T (O, D) + b (O,)."""
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear: input feature axis {x.shape[-1]} vs weight in-dim {w.shape[1]}")
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = (x2 @ wd.T).reshape(*lead, wd.shape[0])
    _count(2 * x2.shape[0] * wd.shape[0] * wd.shape[1])

    def bwd(g):
        g2 = g.reshape(-1, wd.shape[0])
        gx = (g2 @ wd).reshape(xd.shape)
        gw = g2.T @ x2
        if b is None:
            return (gx, gw)
        return (gx, gw, g2.sum(axis=0, dtype=np.float64).astype(ft()))

    if b is not None:
        out = out + b.data
        return make_result(out, (x, w, b), bwd)
    return make_result(out, (x, w), bwd)


def conv2d(x, w, b=None, stride=1, pad=0):
    """Cross-correlation of NCHW input with OIHW weight."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd_ = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv2d: channel axis mismatch, input has {c}, weight expects {ci}")
    if h + 2 * pad < kh:
        raise ValueError(f"conv2d: height axis {h}+2*{pad} smaller than kernel {kh}")
    if wd_ + 2 * pad < kw:
        raise ValueError(f"conv2d: width axis {wd_}+2*{pad} smaller than kernel {kw}")
    if b is not None and b.shape != (o,):
        raise ValueError(f"conv2d: bias axis has {b.shape}, expected ({o},)")
    ho = kernels.conv_out_size(h, kh, stride, pad)
    wo = kernels.conv_out_size(wd_, kw, stride, pad)
    cols = kernels.im2col(x.data, kh, kw, stride, pad)  # (n, c*kh*kw, ho*wo)
    wm = w.data.reshape(o, -1)
    out = np.matmul(wm, cols)  # (n, o, ho*wo)
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape(n, o, ho, wo)
    _count(2 * n * o * ho * wo * c * kh * kw)

    def bwd(g):
        g2 = g.reshape(n, o, ho * wo)
        gw = np.einsum("nop,nkp->ok", g2, cols, optimize=True).reshape(w.shape).astype(ft())
        gcols = np.matmul(wm.T, g2)
        gx = kernels.col2im(np.ascontiguousarray(gcols, dtype=ft()), n, c, h, wd_, kh, kw, stride, pad)
        if b is None:
            return (gx, gw)
        return (gx, gw, g2.sum(axis=(0, 2), dtype=np.float64).astype(ft()))

    inputs = (x, w) if b is None else (x, w, b)
    return make_result(out, inputs, bwd)


def group_norm(x, groups, gamma, beta, eps=1e-5):
    n, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"group_norm: channel axis {c} not divisible by {groups} groups")
    xg = x.data.reshape(n, groups, -1).astype(np.float64)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    gm = gamma.data.astype(np.float64)[None, :, None, None]
    out = (xhat * gm + beta.data[None, :, None, None]).astype(ft())

    def bwd(g):
        g = g.astype(np.float64)
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx_hat = (g * gm).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        m = xh.shape[2]
        gx = inv / m * (m * gx_hat - gx_hat.sum(axis=2, keepdims=True) - xh * (gx_hat * xh).sum(axis=2, keepdims=True))
        return (gx.reshape(n, c, h, w).astype(ft()), ggamma.astype(ft()), gbeta.astype(ft()))

    return make_result(out, (x, gamma, beta), bwd)


def upsample_nearest(x, factor=2):
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def bwd(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_result(out, (x,), bwd)


def downsample_nearest(x, factor=2):
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"downsample_nearest: spatial axes {h}x{w} not divisible by {factor}")

    def bwd(g):
        full = np.zeros(x.shape, dtype=ft())
        full[:, :, ::factor, ::factor] = g
        return (full,)

    return make_result(np.ascontiguousarray(x.data[:, :, ::factor, ::factor]), (x,), bwd)


def avg_pool(x, factor=2):
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"avg_pool: spatial axes {h}x{w} not divisible by {factor}")
    out = x.data.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))

    def bwd(g):
        return ((g / (factor * factor)).repeat(factor, axis=2).repeat(factor, axis=3),)

    return make_result(out, (x,), bwd)


# ---------------------------------------------------------------- attention


def softmax(a):
    """Softmax over the last axis."""
    x = a.data.astype(np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        g = g.astype(np.float64)
        return ((p * (g - (g * p).sum(axis=-1, keepdims=True))).astype(ft()),)

    return make_result(p.astype(ft()), (a,), bwd)


def scaled_dot_attention(q, k, v):
    """softmax(q k^T / sqrt(D)) v for q (N, Tq, D), k and v (N, Tk, D)."""
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ValueError("scaled_dot_attention: q, k, v must be (N, T, D)")
    if k.shape[1] == 0:
        raise ValueError("scaled_dot_attention: empty key set")
    if k.shape != v.shape or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ValueError(f"scaled_dot_attention: shapes q{q.shape} k{k.shape} v{v.shape} disagree")
    n, tq, d = q.shape
    tk = k.shape[1]
    qd = q.data.astype(np.float64)
    kd = k.data.astype(np.float64)
    vd = v.data.astype(np.float64)
    s = 1.0 / math.sqrt(d)
    logits = np.matmul(qd, kd.transpose(0, 2, 1)) * s
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    out = np.matmul(p, vd)
    _count(4 * n * tq * tk * d)

    def bwd(g):
        g = g.astype(np.float64)
        gv = np.matmul(p.transpose(0, 2, 1), g)
        gp = np.matmul(g, vd.transpose(0, 2, 1))
        gl = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * s
        gq = np.matmul(gl, kd)
        gk = np.matmul(gl.transpose(0, 2, 1), qd)
        return (gq.astype(ft()), gk.astype(ft()), gv.astype(ft()))

    return make_result(out.astype(ft()), (q, k, v), bwd)
