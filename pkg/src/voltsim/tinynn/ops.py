"""Forward/backward kernel pairs used by the toy models.

Everything is float64 and pure. Each *_fwd returns (output, cache) and the
matching *_bwd consumes that cache, so gradient checks can pin every layer
type against finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "NormStats",
    "linear_fwd",
    "linear_bwd",
    "embed_fwd",
    "embed_bwd",
    "rmsnorm_fwd",
    "rmsnorm_bwd",
    "layernorm_fwd",
    "layernorm_bwd",
    "silu_fwd",
    "silu_bwd",
    "relu_fwd",
    "relu_bwd",
    "softmax",
    "attention_fwd",
    "attention_bwd",
    "cross_entropy",
    "mse",
    "conv2d_fwd",
    "conv2d_bwd",
    "maxpool2d_fwd",
    "maxpool2d_bwd",
]


@dataclass(frozen=True)
class NormStats:
    """Input statistics of one normalization invocation."""

    mu: float
    sigma: float
    rms: float


def stats_of(x: np.ndarray) -> NormStats:
    mu = float(np.mean(x))
    sigma = float(np.std(x))
    rms = float(np.sqrt(np.mean(x * x)))
    return NormStats(mu, sigma, rms)


# ------------------------------------------------------------------ linear

def linear_fwd(x, w):
    return x @ w, (x, w)


def linear_bwd(dout, cache):
    x, w = cache
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = x2.T @ d2
    dx = dout @ w.T
    return dx, dw


# --------------------------------------------------------------- embedding

def embed_fwd(ids, table):
    return table[ids], (ids, table.shape)


def embed_bwd(dout, cache):
    ids, shape = cache
    dtable = np.zeros(shape)
    np.add.at(dtable, ids.reshape(-1), dout.reshape(-1, shape[1]))
    return dtable


# ------------------------------------------------------------------- norms

def rmsnorm_fwd(x, g, eps=1e-6):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    xn = x / r
    return xn * g, (x, xn, r, g)


def rmsnorm_bwd(dout, cache):
    x, xn, r, g = cache
    n = x.shape[-1]
    dg = np.sum(dout * xn, axis=tuple(range(dout.ndim - 1)))
    dxn = dout * g
    # d/dx of x/r with r = sqrt(mean x^2 + eps)
    dx = dxn / r - x * np.sum(dxn * x, axis=-1, keepdims=True) / (n * r**3)
    return dx, dg


def layernorm_fwd(x, g, b, eps=1e-6):
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.var(x, axis=-1, keepdims=True)
    sd = np.sqrt(var + eps)
    xn = (x - mu) / sd
    return xn * g + b, (xn, sd, g)


def layernorm_bwd(dout, cache):
    xn, sd, g = cache
    lead = tuple(range(dout.ndim - 1))
    dg = np.sum(dout * xn, axis=lead)
    db = np.sum(dout, axis=lead)
    dxn = dout * g
    m1 = np.mean(dxn, axis=-1, keepdims=True)
    m2 = np.mean(dxn * xn, axis=-1, keepdims=True)
    dx = (dxn - m1 - xn * m2) / sd
    return dx, dg, db


# ------------------------------------------------------------- activations

def silu_fwd(x):
    # exp may overflow on clamped fault garbage; the saturated limit is right
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x))
    return x * s, (x, s)


def silu_bwd(dout, cache):
    x, s = cache
    return dout * s * (1.0 + x * (1.0 - s))


def relu_fwd(x):
    return np.maximum(x, 0.0), (x > 0)


def relu_bwd(dout, cache):
    return dout * cache


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


# --------------------------------------------------------------- attention

def attention_fwd(q, k, v, n_heads, causal):
    """Multi-head scaled dot-product attention on (B, T, D) tensors.

    Scores, softmax and the value mix stay in full precision; only the
    Q/K/V/O projections outside this function are quantized.
    """
    B, T, D = q.shape
    dh = D // n_heads
    qh = q.reshape(B, T, n_heads, dh)
    kh = k.reshape(B, T, n_heads, dh)
    vh = v.reshape(B, T, n_heads, dh)
    s = np.einsum("bihd,bjhd->bhij", qh, kh) / np.sqrt(dh)
    if causal:
        s = np.where(np.tril(np.ones((T, T), dtype=bool)), s, -np.inf)
    p = softmax(s, axis=-1)
    out = np.einsum("bhij,bjhd->bihd", p, vh).reshape(B, T, D)
    return out, (qh, kh, vh, p, n_heads)


def attention_bwd(dout, cache):
    qh, kh, vh, p, n_heads = cache
    B, T, H, dh = qh.shape
    do = dout.reshape(B, T, H, dh)
    dv = np.einsum("bhij,bihd->bjhd", p, do)
    dp = np.einsum("bihd,bjhd->bhij", do, vh)
    ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
    ds /= np.sqrt(dh)
    dq = np.einsum("bhij,bjhd->bihd", ds, kh).reshape(B, T, H * dh)
    dk = np.einsum("bhij,bihd->bjhd", ds, qh).reshape(B, T, H * dh)
    return dq, dk, dv.reshape(B, T, H * dh)


# ------------------------------------------------------------------ losses

def cross_entropy(logits, targets, weights=None):
    """Mean CE over weighted positions; returns (loss, dlogits)."""
    flat = logits.reshape(-1, logits.shape[-1])
    t = np.asarray(targets).reshape(-1)
    if weights is None:
        w = np.ones(len(t))
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
    total = np.sum(w)
    p = softmax(flat, axis=-1)
    eps = 1e-300  # log guard only; probabilities stay untouched
    loss = -np.sum(w * np.log(p[np.arange(len(t)), t] + eps)) / total
    dlogits = p * w[:, None]
    dlogits[np.arange(len(t)), t] -= w
    dlogits /= total
    return loss, dlogits.reshape(logits.shape)


def mse(pred, target):
    d = pred - target
    loss = float(np.mean(d * d))
    return loss, 2.0 * d / d.size


# ----------------------------------------------------------- conv and pool

def im2col(x, kh, kw, stride=1, pad=0):
    """(B, C, H, W) -> (B, C*kh*kw, OH*OW) patch matrix."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    B, C, OH, OW = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * kh * kw, OH * OW)
    return np.ascontiguousarray(cols), OH, OW


def conv2d_fwd(x, w, b, stride=1, pad=0):
    B = x.shape[0]
    O, C, kh, kw = w.shape
    cols, OH, OW = im2col(x, kh, kw, stride, pad)
    wf = w.reshape(O, -1)
    y = np.einsum("ok,bkl->bol", wf, cols) + b[None, :, None]
    return y.reshape(B, O, OH, OW), (cols, wf, x.shape, (kh, kw, stride, pad))


def conv2d_bwd(dout, cache):
    cols, wf, xshape, (kh, kw, stride, pad) = cache
    B, O = dout.shape[:2]
    dy = dout.reshape(B, O, -1)
    dw = np.einsum("bol,bkl->ok", dy, cols).reshape(O, xshape[1], kh, kw)
    db = dy.sum(axis=(0, 2))
    dcols = np.einsum("ok,bol->bkl", wf, dy)
    # col2im scatter-add
    Hp, Wp = xshape[2] + 2 * pad, xshape[3] + 2 * pad
    dxp = np.zeros((B, xshape[1], Hp, Wp))
    OH, OW = dout.shape[2], dout.shape[3]
    dcols = dcols.reshape(B, xshape[1], kh, kw, OH, OW)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * OH : stride, j : j + stride * OW : stride] += dcols[
                :, :, i, j
            ]
    dx = dxp[:, :, pad : Hp - pad, pad : Wp - pad] if pad else dxp
    return dx, dw, db


def maxpool2d_fwd(x):
    """2x2 stride-2 max pool; odd trailing rows/cols are dropped.

    Maps already down to a single row/column pass through with a window of
    one on that axis, so deep stacks on tiny images never produce an empty
    output.
    """
    B, C, H, W = x.shape
    kh = 2 if H >= 2 else 1
    kw = 2 if W >= 2 else 1
    oh, ow = H // kh, W // kw
    v = x[:, :, : oh * kh, : ow * kw].reshape(B, C, oh, kh, ow, kw)
    v = v.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, oh, ow, kh * kw)
    idx = np.argmax(v, axis=-1)
    y = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape, kh, kw)


def maxpool2d_bwd(dout, cache):
    idx, xshape, kh, kw = cache
    B, C, H, W = xshape
    oh, ow = H // kh, W // kw
    dv = np.zeros((B, C, oh, ow, kh * kw))
    np.put_along_axis(dv, idx[..., None], dout[..., None], axis=-1)
    dv = dv.reshape(B, C, oh, ow, kh, kw).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(xshape)
    dx[:, :, : oh * kh, : ow * kw] = dv.reshape(B, C, oh * kh, ow * kw)
    return dx
