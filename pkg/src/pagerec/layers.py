"""Layer operations composed on the autodiff core: conv2d, batch norm,
dense, multi-head self-attention encoder blocks, and bidirectional LSTMs.

Parameters are plain dicts of named Tensors created by the ``init_*``
helpers so the model can flatten them into a single named-tensor map for
checkpointing.  Convolution dispatches to the compiled/vectorized kernels
in :mod:`pagerec.kernels`; everything else is built from autodiff
primitives or carries a hand-derived backward closure.
"""

import math

import numpy as np

from . import kernels
from .autodiff import (
    Tensor,
    _make,
    add,
    concat,
    dropout,
    layer_norm,
    matmul,
    mul,
    narrow,
    relu,
    scale,
    sigmoid,
    softmax_rows,
    tanh,
    transpose,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------

def kaiming_uniform(rng, shape, fan_in):
    """He-style uniform init: U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def orthogonal(rng, rows, cols):
    """Orthonormal rows/columns via QR of a Gaussian matrix."""
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # fix QR sign ambiguity for determinism
    if rows < cols:
        q = q.T
    return Tensor(q[:rows, :cols].copy(), requires_grad=True)


def zeros_param(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape):
    return Tensor(np.ones(shape), requires_grad=True)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x, weight, bias, stride=(1, 1), padding=(0, 0)):
    """Cross-correlate a [C_in, H, W] image with [C_out, C_in, kh, kw] weights.

    Output extent: floor((H + 2*ph - kh)/sh) + 1, and likewise for width.
    """
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ValueError(
            f"conv2d expects [C,H,W] image and [Co,Ci,kh,kw] weight, got "
            f"{x.data.shape} and {weight.data.shape}"
        )
    ci, h, w = x.data.shape
    co, wci, kh, kw = weight.data.shape
    if wci != ci:
        raise ValueError(f"conv2d channel mismatch: image has {ci}, weight expects {wci}")
    sh, sw = stride
    ph, pw = padding
    if sh < 1 or sw < 1:
        raise ValueError(f"conv2d strides must be >= 1, got {stride}")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ValueError(
            f"conv2d kernel ({kh},{kw}) exceeds padded input "
            f"({h + 2 * ph},{w + 2 * pw})"
        )
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    y = kernels.conv2d_forward(xp, weight.data, bias.data, sh, sw)

    def bwd(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            gxp = kernels.conv2d_backward_input(
                g, weight.data, sh, sw, h + 2 * ph, w + 2 * pw
            )
            x.accumulate_grad(gxp[:, ph : ph + h, pw : pw + w])
        if weight.requires_grad:
            weight.accumulate_grad(
                kernels.conv2d_backward_weight(g, xp, kh, kw, sh, sw)
            )
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(1, 2)))

    return _make(y, (x, weight, bias), bwd)


def conv_output_extent(extent, kernel, stride, pad):
    return (extent + 2 * pad - kernel) // stride + 1


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batch_norm(x, gamma, beta, stats, training, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Normalize a [C, ...] tensor per channel.

    Training mode uses the biased moments of the current input (biased so a
    single-element channel floors to variance 0 + eps instead of dividing by
    zero) and folds them into ``stats`` in place:
    running = (1 - momentum) * running + momentum * batch.  Eval mode reads
    ``stats`` and never mutates it.
    """
    c = x.data.shape[0]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(
            f"batch_norm affine shape mismatch: {c} channels vs "
            f"{gamma.data.shape}/{beta.data.shape}"
        )
    axes = tuple(range(1, x.data.ndim))
    expand = (slice(None),) + (None,) * (x.data.ndim - 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        stats["mean"][:] = (1.0 - momentum) * stats["mean"] + momentum * mu
        stats["var"][:] = (1.0 - momentum) * stats["var"] + momentum * var
    else:
        mu = stats["mean"]
        var = stats["var"]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[expand]) * inv[expand]

    def bwd(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=axes))
        if x.requires_grad:
            gi = g * gamma.data[expand]
            if training:
                gx = gi - gi.mean(axis=axes, keepdims=True) \
                    - xhat * (gi * xhat).mean(axis=axes, keepdims=True)
            else:
                gx = gi
            x.accumulate_grad(gx * inv[expand])

    return _make(xhat * gamma.data[expand] + beta.data[expand], (x, gamma, beta), bwd)


def init_batch_norm(c):
    params = {"gamma": ones_param((c,)), "beta": zeros_param((c,))}
    stats = {"mean": np.zeros(c), "var": np.ones(c)}
    return params, stats


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

def dense(x, weight, bias):
    """[T, D_in] @ [D_in, D_out] + bias[D_out]."""
    if bias.data.shape != (weight.data.shape[1],):
        raise ValueError(
            f"dense bias shape {bias.data.shape} does not match output dim "
            f"{weight.data.shape[1]}"
        )
    return add(matmul(x, weight), bias)


def init_dense(rng, d_in, d_out):
    return {"w": kaiming_uniform(rng, (d_in, d_out), d_in), "b": zeros_param((d_out,))}


# ---------------------------------------------------------------------------
# sinusoidal positional encoding
# ---------------------------------------------------------------------------

def sinusoidal_encoding(t_len, d):
    """Fixed sin/cos position table [t_len, d]; d must be even."""
    if d % 2 != 0:
        raise ValueError(f"positional encoding needs an even dim, got {d}")
    pos = np.arange(t_len, dtype=np.float64)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(d // 2, dtype=np.float64) * 2.0 / d)
    angles = pos * freq[None, :]
    pe = np.empty((t_len, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


# ---------------------------------------------------------------------------
# transformer encoder
# ---------------------------------------------------------------------------

def init_transformer_layer(rng, d, ff_dim):
    p = {}
    for name in ("wq", "wk", "wv", "wo"):
        p[name] = kaiming_uniform(rng, (d, d), d)
    for name in ("bq", "bk", "bv", "bo"):
        p[name] = zeros_param((d,))
    p["w1"] = kaiming_uniform(rng, (d, ff_dim), d)
    p["b1"] = zeros_param((ff_dim,))
    p["w2"] = kaiming_uniform(rng, (ff_dim, d), ff_dim)
    p["b2"] = zeros_param((d,))
    p["ln1_g"] = ones_param((d,))
    p["ln1_b"] = zeros_param((d,))
    p["ln2_g"] = ones_param((d,))
    p["ln2_b"] = zeros_param((d,))
    return p


def multi_head_attention(x, p, n_heads, return_weights=False):
    """Dense O(T^2) self-attention over [T, D]; D split evenly across heads."""
    t_len, d = x.data.shape
    if d % n_heads != 0:
        raise ValueError(f"model dim {d} not divisible by {n_heads} heads")
    dk = d // n_heads
    q = dense(x, p["wq"], p["bq"])
    k = dense(x, p["wk"], p["bk"])
    v = dense(x, p["wv"], p["bv"])
    heads = []
    weights = []
    for h in range(n_heads):
        qh = narrow(q, 1, h * dk, dk)
        kh = narrow(k, 1, h * dk, dk)
        vh = narrow(v, 1, h * dk, dk)
        scores = scale(matmul(qh, transpose(kh)), 1.0 / math.sqrt(dk))
        attn = softmax_rows(scores)
        weights.append(attn)
        heads.append(matmul(attn, vh))
    out = heads[0] if n_heads == 1 else concat(heads, axis=1)
    out = dense(out, p["wo"], p["bo"])
    if return_weights:
        return out, weights
    return out


def transformer_encoder_layer(x, p, n_heads, rng=None, dropout_rate=0.0,
                              training=False):
    """Post-norm encoder block: LN(x + MHA(x)), then LN(x + FFN(x))."""
    attn = multi_head_attention(x, p, n_heads)
    attn = dropout(attn, dropout_rate, rng, training)
    x = layer_norm(add(x, attn), p["ln1_g"], p["ln1_b"])
    ff = dense(relu(dense(x, p["w1"], p["b1"])), p["w2"], p["b2"])
    ff = dropout(ff, dropout_rate, rng, training)
    return layer_norm(add(x, ff), p["ln2_g"], p["ln2_b"])


# ---------------------------------------------------------------------------
# bidirectional LSTM
# ---------------------------------------------------------------------------

def init_blstm_layer(rng, d_in, hidden):
    """Input and recurrent weights for both directions; gate order i,f,g,o."""
    p = {}
    for direction in ("fwd", "bwd"):
        p[f"wx_{direction}"] = kaiming_uniform(rng, (d_in, 4 * hidden), d_in)
        blocks = [orthogonal(rng, hidden, hidden).data for _ in range(4)]
        p[f"wh_{direction}"] = Tensor(np.concatenate(blocks, axis=1),
                                      requires_grad=True)
        p[f"b_{direction}"] = zeros_param((4 * hidden,))
    return p


def _lstm_pass(x, wx, wh, b, hidden, reverse):
    t_len = x.data.shape[0]
    h = Tensor(np.zeros((1, hidden)))
    c = Tensor(np.zeros((1, hidden)))
    outs = [None] * t_len
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)
    for t in order:
        xt = narrow(x, 0, t, 1)
        gates = add(add(matmul(xt, wx), matmul(h, wh)), b)
        i = sigmoid(narrow(gates, 1, 0, hidden))
        f = sigmoid(narrow(gates, 1, hidden, hidden))
        g = tanh(narrow(gates, 1, 2 * hidden, hidden))
        o = sigmoid(narrow(gates, 1, 3 * hidden, hidden))
        c = add(mul(f, c), mul(i, g))
        h = mul(o, tanh(c))
        outs[t] = h
    return concat(outs, axis=0) if t_len > 1 else outs[0]


def blstm_layer(x, p):
    """[T, D] -> [T, 2H]: forward pass concatenated with backward pass."""
    if x.data.ndim != 2 or x.data.shape[0] < 1:
        raise ValueError(f"blstm_layer expects a non-empty [T, D] input, got {x.data.shape}")
    hidden = p["wh_fwd"].data.shape[0]
    fwd = _lstm_pass(x, p["wx_fwd"], p["wh_fwd"], p["b_fwd"], hidden, False)
    bwd = _lstm_pass(x, p["wx_bwd"], p["wh_bwd"], p["b_bwd"], hidden, True)
    return concat([fwd, bwd], axis=1)
