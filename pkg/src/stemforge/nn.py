"""Array-level layer primitives with handwritten adjoints.

Every layer is a pair of functions: ``*_forward`` returns the output and
a cache, ``*_backward`` consumes the upstream gradient and the cache and
returns input/parameter gradients.  All math is float64; shapes follow
the (batch, channels, length) convention for sequence data.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


# -- convolution -------------------------------------------------------------

def conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-padded stride-1 conv.  x (B,C,L), w (O,C,k) with odd k, b (O,)."""
    B, C, L = x.shape
    O, _, k = w.shape
    p = k // 2
    xp = np.zeros((B, C, L + 2 * p), dtype=x.dtype)
    xp[:, :, p:p + L] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)  # (B,C,L,k)
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * L, C * k)
    wmat = w.transpose(1, 2, 0).reshape(C * k, O)
    y = (cols @ wmat).reshape(B, L, O).transpose(0, 2, 1) + b[None, :, None]
    # keep outputs C-contiguous: downstream reductions must not depend on the
    # memory layout this transpose would otherwise propagate
    return np.ascontiguousarray(y), (cols, x.shape, w.shape)


def conv1d_backward(dy: np.ndarray, w: np.ndarray, cache):
    cols, (B, C, L), (O, _, k) = cache[0], cache[1], cache[2]
    p = k // 2
    dyf = np.ascontiguousarray(dy.transpose(0, 2, 1)).reshape(B * L, O)
    dwmat = cols.T @ dyf
    dw = dwmat.reshape(C, k, O).transpose(2, 0, 1)
    db = dy.sum(axis=(0, 2))
    wmat = w.transpose(1, 2, 0).reshape(C * k, O)
    dcols = (dyf @ wmat.T).reshape(B, L, C, k)
    dxp = np.zeros((B, C, L + 2 * p), dtype=dy.dtype)
    for i in range(k):
        dxp[:, :, i:i + L] += dcols[:, :, :, i].transpose(0, 2, 1)
    return dxp[:, :, p:p + L], dw, db


# -- normalization -----------------------------------------------------------

def group_norm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                       groups: int, eps: float = 1e-5):
    B, C, L = x.shape
    xg = x.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(B, C, L)
    y = xhat * gamma[None, :, None] + beta[None, :, None]
    return y, (xhat, inv, gamma, (B, C, L, groups))


def group_norm_backward(dy: np.ndarray, cache):
    xhat, inv, gamma, (B, C, L, G) = cache
    dgamma = (dy * xhat).sum(axis=(0, 2))
    dbeta = dy.sum(axis=(0, 2))
    dxh = (dy * gamma[None, :, None]).reshape(B, G, -1)
    xh = xhat.reshape(B, G, -1)
    dx = inv * (dxh - dxh.mean(axis=2, keepdims=True)
                - xh * (dxh * xh).mean(axis=2, keepdims=True))
    return dx.reshape(B, C, L), dgamma, dbeta


# -- activations -------------------------------------------------------------

def silu_forward(x: np.ndarray):
    s = expit(x)
    return x * s, (x, s)


def silu_backward(dy: np.ndarray, cache):
    x, s = cache
    return dy * (s * (1.0 + x * (1.0 - s)))


# -- resampling --------------------------------------------------------------

def avg_pool2_forward(x: np.ndarray) -> np.ndarray:
    return 0.5 * (x[:, :, 0::2] + x[:, :, 1::2])


def avg_pool2_backward(dy: np.ndarray) -> np.ndarray:
    dx = np.empty(dy.shape[:2] + (2 * dy.shape[2],), dtype=dy.dtype)
    dx[:, :, 0::2] = 0.5 * dy
    dx[:, :, 1::2] = 0.5 * dy
    return dx


def upsample2_forward(x: np.ndarray) -> np.ndarray:
    return np.repeat(x, 2, axis=2)


def upsample2_backward(dy: np.ndarray) -> np.ndarray:
    return dy[:, :, 0::2] + dy[:, :, 1::2]


# -- dense layers ------------------------------------------------------------

def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x (B,F) @ w (F,O) + b."""
    return x @ w + b, x


def linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def channel_linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Per-position linear over channels: x (B,C,L), w (O,C), b (O,)."""
    y = np.einsum("oc,bcl->bol", w, x, optimize=True) + b[None, :, None]
    return y, x


def channel_linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    dx = np.einsum("oc,bol->bcl", w, dy, optimize=True)
    dw = np.einsum("bol,bcl->oc", dy, x, optimize=True)
    db = dy.sum(axis=(0, 2))
    return dx, dw, db


# -- attention ---------------------------------------------------------------

def softmax_last(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attention_core_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    """Single-head attention over the length axis: q,k,v (B,C,L)."""
    scale = 1.0 / np.sqrt(q.shape[1])
    s = np.einsum("bcl,bcm->blm", q, k, optimize=True) * scale
    a = softmax_last(s)
    y = np.einsum("bcm,blm->bcl", v, a, optimize=True)
    return y, (q, k, v, a, scale)


def attention_core_backward(dy: np.ndarray, cache):
    q, k, v, a, scale = cache
    dv = np.einsum("bcl,blm->bcm", dy, a, optimize=True)
    da = np.einsum("bcl,bcm->blm", dy, v, optimize=True)
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
    dq = np.einsum("blm,bcm->bcl", ds, k, optimize=True)
    dk = np.einsum("blm,bcl->bcm", ds, q, optimize=True)
    return dq, dk, dv


# -- feature-wise conditioning ------------------------------------------------

def film_forward(h: np.ndarray, cond: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Scale-and-shift h (B,C,L) from cond (B,M) via a (M,2C) linear."""
    gs, _ = linear_forward(cond, w, b)
    C = h.shape[1]
    g, s = gs[:, :C], gs[:, C:]
    y = h * (1.0 + g)[:, :, None] + s[:, :, None]
    return y, (h, g, cond)


def film_backward(dy: np.ndarray, cache, w: np.ndarray):
    h, g, cond = cache
    dh = dy * (1.0 + g)[:, :, None]
    dgs = np.concatenate([(dy * h).sum(axis=2), dy.sum(axis=2)], axis=1)
    dcond, dw, db = linear_backward(dgs, cond, w)
    return dh, dcond, dw, db


# -- embeddings --------------------------------------------------------------

def embed_mean_forward(table: np.ndarray, token_lists):
    """Mean-pooled table lookups; token_lists is one id sequence per example.
    Empty sequences pool to the zero vector."""
    out = np.zeros((len(token_lists), table.shape[1]), dtype=table.dtype)
    for i, ids in enumerate(token_lists):
        if len(ids):
            out[i] = table[np.asarray(ids)].mean(axis=0)
    return out, token_lists


def embed_mean_backward(dy: np.ndarray, table_shape, token_lists):
    dtable = np.zeros(table_shape, dtype=dy.dtype)
    for i, ids in enumerate(token_lists):
        if len(ids):
            np.add.at(dtable, np.asarray(ids), dy[i] / len(ids))
    return dtable


def sinusoid_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal position embedding of integer timesteps; dim must be even.

    Component j < dim/2 is sin(t * w_j) and component dim/2 + j is
    cos(t * w_j) with w_j = 10000^(-2j/dim).
    """
    if dim % 2:
        raise ValueError("sinusoid embedding dim must be even")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * (2.0 * np.arange(half) / dim))
    ang = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
