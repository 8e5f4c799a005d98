"""Numeric building blocks with hand-written backward passes.

Every forward returns (output, cache); the matching backward consumes the
upstream gradient plus that cache and writes parameter gradients into a
flat name -> array dict (accumulating, so shared weights just add up).
Everything is plain numpy in the dtype of the parameters; float64 mode is
exact enough for central-difference verification at 1e-6.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "affine_fwd",
    "affine_bwd",
    "gelu_fwd",
    "gelu_bwd",
    "layernorm_fwd",
    "layernorm_bwd",
    "softmax",
    "softmax_bwd",
    "block_fwd",
    "block_bwd",
    "stack_fwd",
    "stack_bwd",
]

LN_EPS = 1e-6

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def affine_fwd(x, W, b):
    return x @ W + b, x


def affine_bwd(dy, x, W, grads, w_name, b_name):
    grads[w_name] += x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    grads[b_name] += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dy @ W.T


def gelu_fwd(x):
    # erf only has a float64 loop; evaluate there, round back to x's dtype
    y = 0.5 * x * (1.0 + erf(x * _INV_SQRT2))
    return y.astype(x.dtype, copy=False), x


def gelu_bwd(dy, x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return (dy * (cdf + x * pdf)).astype(x.dtype, copy=False)


def layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv_std
    return xhat * g + b, (xhat, inv_std, g)


def layernorm_bwd(dy, cache, grads, g_name, b_name):
    xhat, inv_std, g = cache
    grads[g_name] += (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    grads[b_name] += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return inv_std * (dxhat - m1 - xhat * m2)


def softmax(s):
    shifted = s - s.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(da, a):
    return a * (da - (da * a).sum(axis=-1, keepdims=True))


def _split_heads(x, heads):
    n, c = x.shape
    return x.reshape(n, heads, c // heads).transpose(1, 0, 2)


def _merge_heads(x):
    heads, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, heads * dh)


def _attention_fwd(x, p, prefix, heads):
    h, ln_cache = layernorm_fwd(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    qkv, _ = affine_fwd(h, p[f"{prefix}.attn.Wqkv"], p[f"{prefix}.attn.bqkv"])
    c = x.shape[-1]
    q, k, v = (_split_heads(qkv[:, i * c:(i + 1) * c], heads) for i in range(3))
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ k.transpose(0, 2, 1)) * scale
    attn = softmax(scores)
    ctx = attn @ v
    merged = _merge_heads(ctx)
    out, _ = affine_fwd(merged, p[f"{prefix}.attn.Wproj"], p[f"{prefix}.attn.bproj"])
    cache = (ln_cache, h, q, k, v, attn, merged, scale)
    return x + out, cache


def _attention_bwd(dy, x, p, prefix, heads, cache, grads):
    ln_cache, h, q, k, v, attn, merged, scale = cache
    dmerged = affine_bwd(
        dy, merged, p[f"{prefix}.attn.Wproj"], grads,
        f"{prefix}.attn.Wproj", f"{prefix}.attn.bproj",
    )
    dctx = _split_heads(dmerged, heads)
    dattn = dctx @ v.transpose(0, 2, 1)
    dv = attn.transpose(0, 2, 1) @ dctx
    dscores = softmax_bwd(dattn, attn) * scale
    dq = dscores @ k
    dk = dscores.transpose(0, 2, 1) @ q
    dqkv = np.concatenate([_merge_heads(g) for g in (dq, dk, dv)], axis=1)
    dh = affine_bwd(
        dqkv, h, p[f"{prefix}.attn.Wqkv"], grads,
        f"{prefix}.attn.Wqkv", f"{prefix}.attn.bqkv",
    )
    dx = layernorm_bwd(dh, ln_cache, grads, f"{prefix}.ln1.g", f"{prefix}.ln1.b")
    return dy + dx


def _mlp_fwd(x, p, prefix):
    h, ln_cache = layernorm_fwd(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    f1, _ = affine_fwd(h, p[f"{prefix}.mlp.W1"], p[f"{prefix}.mlp.b1"])
    g, _ = gelu_fwd(f1)
    f2, _ = affine_fwd(g, p[f"{prefix}.mlp.W2"], p[f"{prefix}.mlp.b2"])
    return x + f2, (ln_cache, h, f1, g)


def _mlp_bwd(dy, x, p, prefix, cache, grads):
    ln_cache, h, f1, g = cache
    dg = affine_bwd(dy, g, p[f"{prefix}.mlp.W2"], grads, f"{prefix}.mlp.W2", f"{prefix}.mlp.b2")
    df1 = gelu_bwd(dg, f1)
    dh = affine_bwd(df1, h, p[f"{prefix}.mlp.W1"], grads, f"{prefix}.mlp.W1", f"{prefix}.mlp.b1")
    dx = layernorm_bwd(dh, ln_cache, grads, f"{prefix}.ln2.g", f"{prefix}.ln2.b")
    return dy + dx


def block_fwd(x, p, prefix, heads):
    """Pre-norm transformer block: attention then MLP, both residual."""
    x1, attn_cache = _attention_fwd(x, p, prefix, heads)
    x2, mlp_cache = _mlp_fwd(x1, p, prefix)
    return x2, (x, x1, attn_cache, mlp_cache)


def block_bwd(dy, p, prefix, heads, cache, grads):
    x, x1, attn_cache, mlp_cache = cache
    dx1 = _mlp_bwd(dy, x1, p, prefix, mlp_cache, grads)
    return _attention_bwd(dx1, x, p, prefix, heads, attn_cache, grads)


def stack_fwd(x, p, stack: str, depth: int, heads: int):
    """Run ``depth`` blocks named ``{stack}.{i}``; depth 0 is the identity."""
    caches = []
    for i in range(depth):
        x, cache = block_fwd(x, p, f"{stack}.{i}", heads)
        caches.append(cache)
    return x, caches


def stack_bwd(dy, p, stack: str, depth: int, heads: int, caches, grads):
    for i in range(depth - 1, -1, -1):
        dy = block_bwd(dy, p, f"{stack}.{i}", heads, caches[i], grads)
    return dy
