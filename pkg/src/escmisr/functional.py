"""Differentiable neural-network operators built on :mod:`escmisr.tensor`."""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import DimensionError, Tensor, _unbroadcast, concat, take

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) or (C,H,W) with ``weight`` (O,C,kh,kw)."""
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = xd.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    p = padding
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    ho = (h + 2 * p - kh) // stride + 1
    wo = (w + 2 * p - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d output would be empty")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (n, ho, wo, c*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if squeeze:
        out = out[0]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g4 = g[None] if squeeze else g
        gm = g4.transpose(0, 2, 3, 1)  # n, ho, wo, o
        grads = []
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
            grads.append(gx[0] if squeeze else gx)
        else:
            grads.append(None)
        if weight.requires_grad:
            gw = gm.reshape(-1, o).T @ cols.reshape(-1, c * kh * kw)
            grads.append(gw.reshape(weight.shape))
        else:
            grads.append(None)
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return grads

    return Tensor._make(out, parents, backward)


# ---------------------------------------------------------------------------
# activations and normalisation
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = (x.data * cdf).astype(x.dtype, copy=False)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype, copy=False),)

    return Tensor._make(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        gy = g * out
        return (gy - out * gy.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last (channel) axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = [x] + [t for t in (gamma, beta) if t is not None]
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gh = g * gamma.data if gamma is not None else g
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return grads

    return Tensor._make(out.astype(x.dtype, copy=False), parents, backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation of (N,C,H,W) input.

    In training mode batch statistics are used and the running buffers are
    updated in place; in eval mode the running buffers are used.
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects (N,C,H,W), got {x.shape}")
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.size // x.shape[1]
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape).astype(x.dtype)) * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        gh = g * gamma.data.reshape(shape)
        if training:
            gx = inv.reshape(shape) * (gh - gh.mean(axis=axes, keepdims=True)
                                       - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
        else:
            gx = gh * inv.reshape(shape)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return Tensor._make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# dense layers and attention
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight (+ bias)`` with ``weight`` stored as (in, out)."""
    y = x @ weight
    return y + bias if bias is not None else y


def mlp(x: Tensor, w1: Tensor, b1: Tensor | None, w2: Tensor, b2: Tensor | None, activation=gelu) -> Tensor:
    return linear(activation(linear(x, w1, b1)), w2, b2)


def mhsa(x: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor, bias: Tensor | None, heads: int,
         b_q: Tensor | None = None, b_k: Tensor | None = None, b_v: Tensor | None = None,
         b_o: Tensor | None = None) -> Tensor:
    """Multi-head self-attention with an additive logit bias.

    ``x`` is (..., T, C); ``bias`` is (heads, T, T) or broadcastable to
    (..., heads, T, T). Each head computes ``softmax(q k^T / sqrt(d) + B) v``;
    heads are concatenated and projected by ``w_o``.
    """
    *lead, t, c = x.shape
    if c % heads:
        raise DimensionError(f"channels {c} not divisible by {heads} heads")
    if bias is not None and tuple(bias.shape[-2:]) != (t, t):
        raise DimensionError(f"bias covers {bias.shape[-2:]} tokens, input has {t}")
    d = c // heads

    def split(z):  # (..., T, C) -> (..., heads, T, d)
        z = z.reshape(*lead, t, heads, d)
        nd = z.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return z.transpose(axes)

    q = split(linear(x, w_q, b_q))
    k = split(linear(x, w_k, b_k))
    v = split(linear(x, w_v, b_v))
    y = attention_core(q, k, v, bias, 1.0 / math.sqrt(d))  # (..., heads, T, d)
    nd = y.ndim
    y = y.transpose(tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)).reshape(*lead, t, c)
    return linear(y, w_o, b_o)


_ROW_BLOCK = 256


def attention_core(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None, scale: float) -> Tensor:
    """``softmax(scale * q k^T + bias) v`` over the last two axes, as one recorded op.

    Logits are max-shifted per row before exponentiation. Work proceeds in
    blocks of query rows so each block of the (T, T) matrix stays in cache.
    The backward pass uses ``rowsum(dP * P) = rowsum(dO * O)``.
    """
    *lead, t, d = q.shape
    lead = tuple(lead)
    s = k.shape[-2]
    qs = q.data * np.asarray(scale, dtype=q.dtype)
    kd, vd = k.data, v.data
    bd = bshape = None
    if bias is not None:
        if bias.ndim > len(lead) + 2:
            raise DimensionError(f"bias {bias.shape} has more axes than the logits {lead + (t, s)}")
        bshape = (1,) * (len(lead) + 2 - bias.ndim) + bias.shape
        bd = bias.data.reshape(bshape)
    probs = np.empty(lead + (t, s), dtype=q.dtype)
    out = np.empty(lead + (t, vd.shape[-1]), dtype=q.dtype)

    def bias_index(idx):
        return tuple(i if bshape[j] != 1 else 0 for j, i in enumerate(idx))

    for idx in np.ndindex(*lead):
        kt = kd[idx].T
        for r0 in range(0, t, _ROW_BLOCK):
            rows = slice(r0, r0 + _ROW_BLOCK)
            blk = probs[idx][rows]
            np.matmul(qs[idx][rows], kt, out=blk)
            if bd is not None:
                blk += bd[bias_index(idx)][rows]
            blk -= blk.max(axis=-1, keepdims=True)
            np.exp(blk, out=blk)
            blk /= blk.sum(axis=-1, keepdims=True)
            np.matmul(blk, vd[idx], out=out[idx][rows])
    parents = (q, k, v) if bias is None else (q, k, v, bias)

    def backward(g):
        gq = np.empty_like(qs)
        gk = np.zeros(lead + kd.shape[-2:], dtype=q.dtype)
        gv = np.zeros(lead + vd.shape[-2:], dtype=q.dtype)
        gb = None
        if bias is not None and bias.requires_grad:
            # accumulate straight into the (possibly broadcast) bias shape
            gb = np.zeros(bshape[:-2] + (t, s), dtype=q.dtype)
        rowdot = (g * out).sum(axis=-1, keepdims=True)
        for idx in np.ndindex(*lead):
            vt = vd[idx].T
            for r0 in range(0, t, _ROW_BLOCK):
                rows = slice(r0, r0 + _ROW_BLOCK)
                pb = probs[idx][rows]
                gr = g[idx][rows]
                gv[idx] += pb.T @ gr
                ds = gr @ vt
                ds -= rowdot[idx][rows]
                ds *= pb
                gq[idx][rows] = ds @ kd[idx]
                gk[idx] += ds.T @ qs[idx][rows]
                if gb is not None:
                    gb[bias_index(idx)][rows] += ds
        gq *= scale
        grads = [_unbroadcast(gq, q.shape), _unbroadcast(gk, k.shape), _unbroadcast(gv, v.shape)]
        if bias is not None:
            grads.append(None if gb is None else _unbroadcast(gb, bias.shape))
        return grads

    return Tensor._make(out, parents, backward)


# ---------------------------------------------------------------------------
# relative position bias
# ---------------------------------------------------------------------------

def relative_index(pos_q: np.ndarray, pos_k: np.ndarray, h: int, w: int) -> np.ndarray:
    """Index into a (2h-1)(2w-1) offset table for every (query, key) pair.

    ``pos_q`` and ``pos_k`` are integer (row, col) arrays of shape (T, 2).
    """
    dy = pos_q[:, None, 0] - pos_k[None, :, 0] + (h - 1)
    dx = pos_q[:, None, 1] - pos_k[None, :, 1] + (w - 1)
    return (dy * (2 * w - 1) + dx).astype(np.intp)


def grid_positions(h: int, w: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([yy.ravel(), xx.ravel()], axis=1)


def relative_bias(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather a (heads, R) table into a (heads, T, T) bias."""
    return take(table, index)


# ---------------------------------------------------------------------------
# rearrangement
# ---------------------------------------------------------------------------

def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(…, C*r*r, H, W) -> (…, C, r*H, r*W) with out[c, r*h+a, r*w+b] = in[c*r*r + a*r + b, h, w]."""
    *lead, cr, h, w = x.shape
    if cr % (r * r):
        raise DimensionError(f"pixel_shuffle: {cr} channels not divisible by r^2={r * r}")
    c = cr // (r * r)
    nl = len(lead)
    y = x.reshape(*lead, c, r, r, h, w)
    base = tuple(range(nl))
    y = y.transpose(base + (nl, nl + 3, nl + 1, nl + 4, nl + 2))
    return y.reshape(*lead, c, h * r, w * r)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse rearrangement of :func:`pixel_shuffle`."""
    *lead, c, hr, wr = x.shape
    if hr % r or wr % r:
        raise DimensionError("pixel_unshuffle: spatial dims not divisible by r")
    h, w = hr // r, wr // r
    nl = len(lead)
    y = x.reshape(*lead, c, h, r, w, r)
    base = tuple(range(nl))
    y = y.transpose(base + (nl, nl + 2, nl + 4, nl + 1, nl + 3))
    return y.reshape(*lead, c * r * r, h, w)


def channel_concat(tensors, axis: int = -3) -> Tensor:
    return concat(tensors, axis=axis)
