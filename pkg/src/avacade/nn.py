"""Dense-network primitives in float64 with hand-written backward passes.

Every op comes as a fwd/bwd pair: forward returns (output, cache) and
backward consumes (grad_out, cache).  Caches hold references, not copies, so
a forward pass is cheap to discard when gradients are not needed.  All token
arrays are 2-D (tokens, channels); there is no batch axis, callers loop over
examples.  Weights live in flat dicts owned by the caller; functions here
take arrays and return gradient arrays in matching order.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericalError

MASK_OFF = -1e30  # additive score for disallowed attention pairs
_LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def linear_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    return x @ w + b, (x, w)


def linear_bwd(gy: np.ndarray, cache):
    x, w = cache
    gx = gy @ w.T
    gw = x.reshape(-1, x.shape[-1]).T @ gy.reshape(-1, gy.shape[-1])
    gb = gy.reshape(-1, gy.shape[-1]).sum(axis=0)
    return gx, gw, gb


def layernorm_fwd(x: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat, (xhat, inv)


def layernorm_bwd(gy: np.ndarray, cache):
    xhat, inv = cache
    gmean = gy.mean(axis=-1, keepdims=True)
    gproj = (gy * xhat).mean(axis=-1, keepdims=True)
    return inv * (gy - gmean - xhat * gproj)


def film_fwd(x: np.ndarray, scale: np.ndarray, shift: np.ndarray):
    return x * (1.0 + scale) + shift, (x, scale)


def film_bwd(gy: np.ndarray, cache):
    x, scale = cache
    gx = gy * (1.0 + scale)
    flat_g = gy.reshape(-1, gy.shape[-1])
    gscale = (flat_g * x.reshape(-1, x.shape[-1])).sum(axis=0)
    gshift = flat_g.sum(axis=0)
    return gx, gscale, gshift


def gelu_fwd(x: np.ndarray):
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_bwd(gy: np.ndarray, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    n, m = x.shape
    return x.reshape(n, n_heads, m // n_heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def attention_fwd(
    q_in: np.ndarray,
    kv_in: np.ndarray,
    wq, bq, wk, bk, wv, bv, wo, bo,
    n_heads: int,
    mask: np.ndarray | None = None,
):
    """Multi-head attention; mask is additive on scores, (Nq, Nk) or None."""
    q = _split_heads(q_in @ wq + bq, n_heads)
    k = _split_heads(kv_in @ wk + bk, n_heads)
    v = _split_heads(kv_in @ wv + bv, n_heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = np.einsum("hqd,hkd->hqk", q, k) * scale
    if mask is not None:
        scores = scores + mask
    p = softmax(scores)
    ctx = np.einsum("hqk,hkd->hqd", p, v)
    merged = _merge_heads(ctx)
    y = merged @ wo + bo
    cache = (q_in, kv_in, q, k, v, p, merged, wq, wk, wv, wo, scale)
    return y, cache


def attention_bwd(gy: np.ndarray, cache):
    q_in, kv_in, q, k, v, p, merged, wq, wk, wv, wo, scale = cache
    n_heads = q.shape[0]
    g_wo = merged.T @ gy
    g_bo = gy.sum(axis=0)
    g_ctx = _split_heads(gy @ wo.T, n_heads)
    g_p = np.einsum("hqd,hkd->hqk", g_ctx, v)
    g_v = np.einsum("hqk,hqd->hkd", p, g_ctx)
    g_scores = p * (g_p - (g_p * p).sum(axis=-1, keepdims=True))
    g_q = np.einsum("hqk,hkd->hqd", g_scores, k) * scale
    g_k = np.einsum("hqk,hqd->hkd", g_scores, q) * scale
    gq_flat = _merge_heads(g_q)
    gk_flat = _merge_heads(g_k)
    gv_flat = _merge_heads(g_v)
    g_wq = q_in.T @ gq_flat
    g_bq = gq_flat.sum(axis=0)
    g_wk = kv_in.T @ gk_flat
    g_bk = gk_flat.sum(axis=0)
    g_wv = kv_in.T @ gv_flat
    g_bv = gv_flat.sum(axis=0)
    g_q_in = gq_flat @ wq.T
    g_kv_in = gk_flat @ wk.T + gv_flat @ wv.T
    grads = {
        "wq": g_wq, "bq": g_bq, "wk": g_wk, "bk": g_bk,
        "wv": g_wv, "bv": g_bv, "wo": g_wo, "bo": g_bo,
    }
    return g_q_in, g_kv_in, grads


def window_mask(query_frames: np.ndarray, key_frames: np.ndarray, radius: int = 1) -> np.ndarray:
    """Additive mask allowing queries to see keys within +-radius frames."""
    diff = np.abs(query_frames[:, None].astype(np.int64) - key_frames[None, :].astype(np.int64))
    return np.where(diff <= radius, 0.0, MASK_OFF)


def timestep_features(t: float, dim: int) -> np.ndarray:
    """Sinusoidal features of a scalar time in [0, 1]."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * t * freqs
    return np.concatenate([np.cos(args), np.sin(args)])


_AXIS_DIMS = (24, 20, 20)  # frame, row, col parts of a 64-dim encoding


def position_encoding(positions: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal encoding of (frame, row, col) integer positions.

    The channel budget is split per axis proportionally to _AXIS_DIMS.
    """
    if dim % 2:
        raise NumericalError("position encoding dim must be even")
    total = sum(_AXIS_DIMS)
    dims = [max(2, 2 * ((dim * a // total) // 2)) for a in _AXIS_DIMS]
    dims[0] += dim - sum(dims)
    parts = []
    for axis in range(3):
        half = dims[axis] // 2
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
        args = positions[:, axis : axis + 1].astype(np.float64) * freqs[None, :]
        parts.append(np.cos(args))
        parts.append(np.sin(args))
    return np.concatenate(parts, axis=1)


def check_finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"non-finite values in {name}")
