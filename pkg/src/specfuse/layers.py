"""Shared neural layers over the tensor core.

Parameters live in a flat dict name -> Tensor with slash-separated
prefixes, so checkpoints, EMA copies, and the optimizer all operate on
plain named tensors.
"""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nm

__all__ = [
    "init_linear", "init_layer_norm", "init_mha", "init_block", "init_pqa",
    "linear", "layer_norm_affine", "mha", "block", "projected_query_attention",
    "trunc_normal", "n_params", "subtree",
]


def trunc_normal(rng, shape, std=0.02):
    x = rng.normal(0.0, std, size=shape)
    return np.clip(x, -2 * std, 2 * std)


def n_params(params, prefix=""):
    return sum(p.size for k, p in params.items() if k.startswith(prefix))


def subtree(params, prefix):
    return {k: v for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# init
# ---------------------------------------------------------------------------

def init_linear(params, rng, name, d_in, d_out, std=0.02):
    params[f"{name}/w"] = nm.parameter(trunc_normal(rng, (d_in, d_out), std))
    params[f"{name}/b"] = nm.parameter(np.zeros(d_out))


def init_layer_norm(params, name, d):
    params[f"{name}/g"] = nm.parameter(np.ones(d))
    params[f"{name}/b"] = nm.parameter(np.zeros(d))


def init_mha(params, rng, name, d_in, d_out):
    init_linear(params, rng, f"{name}/wq", d_in, d_out)
    init_linear(params, rng, f"{name}/wk", d_in, d_out)
    init_linear(params, rng, f"{name}/wv", d_in, d_out)
    init_linear(params, rng, f"{name}/wo", d_out, d_out)


def init_block(params, rng, name, d_in, d_out, mlp_ratio=4):
    init_layer_norm(params, f"{name}/ln1", d_in)
    init_mha(params, rng, f"{name}/attn", d_in, d_out)
    if d_in != d_out:
        init_linear(params, rng, f"{name}/shortcut", d_in, d_out)
    init_layer_norm(params, f"{name}/ln2", d_out)
    init_linear(params, rng, f"{name}/mlp1", d_out, mlp_ratio * d_out)
    init_linear(params, rng, f"{name}/mlp2", mlp_ratio * d_out, d_out)


def init_pqa(params, rng, name, d_in, d_mid, d_out, n_roles=0):
    """Projected-query attention: project, add roles, one learned query."""
    init_linear(params, rng, f"{name}/proj", d_in, d_mid)
    if n_roles:
        params[f"{name}/roles"] = nm.parameter(
            trunc_normal(rng, (n_roles, d_mid)))
    params[f"{name}/query"] = nm.parameter(trunc_normal(rng, (d_mid,)))
    init_linear(params, rng, f"{name}/wk", d_mid, d_mid)
    init_linear(params, rng, f"{name}/wv", d_mid, d_mid)
    init_linear(params, rng, f"{name}/wo", d_mid, d_out)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def linear(params, name, x):
    return nm.matmul(x, params[f"{name}/w"]) + params[f"{name}/b"]


def layer_norm_affine(params, name, x):
    return nm.layer_norm(x) * params[f"{name}/g"] + params[f"{name}/b"]


def _split_heads(x, heads):
    # (B, L, D) -> (B, h, L, dh)
    b, l, d = x.shape
    return x.reshape(b, l, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * dh)


def mha(params, name, q_in, kv_in, heads):
    """Multi-head attention; q_in (B, Lq, Din), kv_in (B, Lk, Din)."""
    q = _split_heads(linear(params, f"{name}/wq", q_in), heads)
    k = _split_heads(linear(params, f"{name}/wk", kv_in), heads)
    v = _split_heads(linear(params, f"{name}/wv", kv_in), heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = nm.matmul(q, k.transpose(0, 1, 3, 2)) * scale
    attn = nm.softmax(scores, axis=-1)
    out = _merge_heads(nm.matmul(attn, v))
    return linear(params, f"{name}/wo", out)


def _windowed(x, grid, window):
    """(B, H*W, D) -> (B*nw, window*window, D) window partition."""
    b, l, d = x.shape
    h = w = grid
    nw = grid // window
    t = x.reshape(b, nw, window, nw, window, d).transpose(0, 1, 3, 2, 4, 5)
    return t.reshape(b * nw * nw, window * window, d)


def _unwindowed(x, b, grid, window, d):
    nw = grid // window
    t = x.reshape(b, nw, nw, window, window, d).transpose(0, 1, 3, 2, 4, 5)
    return t.reshape(b, grid * grid, d)


def block(params, name, x, grid, heads, window=0, pool=False):
    """Hiera-style pre-norm transformer block on a (B, H*W, D) token grid.

    With pool=True the attention queries and the residual path are 2x2
    max-pooled, halving the grid; a shortcut projection handles any width
    change. window=0 means global attention; otherwise kv tokens are
    partitioned into window x window tiles (queries into matching pooled
    tiles) and attention never crosses tile boundaries.
    """
    b, l, d_in = x.shape
    d_out = params[f"{name}/attn/wo/b"].shape[0]
    xn = layer_norm_affine(params, f"{name}/ln1", x)
    shortcut = linear(params, f"{name}/shortcut", xn) if d_in != d_out else x

    def pool_tokens(t):
        dt = t.shape[-1]
        pooled = []
        for i in range(b):
            m = t[i].reshape(grid, grid, dt)
            pooled.append(nm.pool2d(m, 2, "max").reshape(grid * grid // 4, dt))
        return nm.stack(pooled, axis=0)

    if pool:
        shortcut = pool_tokens(shortcut)
        q_in = pool_tokens(xn)
        q_grid = grid // 2
    else:
        q_in = xn
        q_grid = grid

    if window and window < grid:
        q_win = window // (2 if pool else 1)
        kv = _windowed(xn, grid, window)
        qq = _windowed(q_in, q_grid, q_win)
        out = mha(params, f"{name}/attn", qq, kv, heads)
        out = _unwindowed(out, b, q_grid, q_win, d_out)
    else:
        out = mha(params, f"{name}/attn", q_in, xn, heads)

    x = shortcut + out
    xn2 = layer_norm_affine(params, f"{name}/ln2", x)
    h = linear(params, f"{name}/mlp2", nm.gelu(linear(params, f"{name}/mlp1", xn2)))
    return x + h, q_grid


def projected_query_attention(params, name, tokens, heads, role_ids=None):
    """One learned query attending over a projected token set.

    tokens: (B, n, Din) -> (B, Dout). Output is invariant to token order
    when role_ids follow the tokens.
    """
    b, n, _ = tokens.shape
    if n == 0:
        raise nm.ShapeError("projected_query_attention: empty token set")
    t = linear(params, f"{name}/proj", tokens)
    if role_ids is not None:
        t = t + params[f"{name}/roles"][list(role_ids)]
    d_mid = t.shape[-1]
    k = _split_heads(linear(params, f"{name}/wk", t), heads)
    v = _split_heads(linear(params, f"{name}/wv", t), heads)
    q = params[f"{name}/query"].reshape(1, heads, 1, d_mid // heads)
    scale = 1.0 / math.sqrt(d_mid // heads)
    scores = nm.matmul(q, k.transpose(0, 1, 3, 2)) * scale
    attn = nm.softmax(scores, axis=-1)
    out = _merge_heads(nm.matmul(attn, v)).reshape(b, d_mid)
    return linear(params, f"{name}/wo", out)
