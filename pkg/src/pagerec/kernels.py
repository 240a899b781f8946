"""Hot numeric kernels with numba-compiled and pure-numpy implementations.

Every kernel exists twice: a ``*_numba`` version built from explicit loops
and compiled with ``@njit``, and a ``*_numpy`` version written against
vectorized numpy (the convolutions go through im2col + BLAS).  The public
names (``conv2d_forward`` etc.) are bound at import time from the
``PAGEREC_KERNELS`` environment variable:

    PAGEREC_KERNELS=numba   force the compiled loops for every kernel
    PAGEREC_KERNELS=numpy   force the pure-numpy path for every kernel
    PAGEREC_KERNELS=auto    per-kernel defaults (the default; see below)

``auto`` picks the implementation that measured fastest on a single core in
``benchmarks/bench_kernels.py``: BLAS wins the convolutions, the compiled
loops win the sequential dynamic programs (CTC, run-length scoring).

All kernels take and return float64 (or uint8 for the image scorers) and are
deterministic for a fixed input on one platform.  No fastmath, no parallel
reductions: summation order is fixed per element.
"""

import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False


# ---------------------------------------------------------------------------
# Convolution (single image, channels-first, caller pads the input)
# ---------------------------------------------------------------------------

def _im2col(xp, kh, kw, sh, sw):
    """Gather (C, kh, kw, H', W') patch views from a padded image."""
    c = xp.shape[0]
    ho = (xp.shape[1] - kh) // sh + 1
    wo = (xp.shape[2] - kw) // sw + 1
    cols = np.empty((c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + (ho - 1) * sh + 1 : sh,
                               j : j + (wo - 1) * sw + 1 : sw]
    return cols, ho, wo


def conv2d_forward_numpy(xp, weight, bias, sh, sw):
    co, ci, kh, kw = weight.shape
    cols, ho, wo = _im2col(xp, kh, kw, sh, sw)
    out = weight.reshape(co, -1) @ cols.reshape(ci * kh * kw, ho * wo)
    out += bias[:, None]
    return out.reshape(co, ho, wo)


def conv2d_backward_input_numpy(gy, weight, sh, sw, hp, wp):
    co, ci, kh, kw = weight.shape
    ho, wo = gy.shape[1], gy.shape[2]
    gcols = weight.reshape(co, -1).T @ gy.reshape(co, ho * wo)
    gcols = gcols.reshape(ci, kh, kw, ho, wo)
    gxp = np.zeros((ci, hp, wp), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i : i + (ho - 1) * sh + 1 : sh,
                j : j + (wo - 1) * sw + 1 : sw] += gcols[:, i, j]
    return gxp


def conv2d_backward_weight_numpy(gy, xp, kh, kw, sh, sw):
    co = gy.shape[0]
    cols, ho, wo = _im2col(xp, kh, kw, sh, sw)
    gw = gy.reshape(co, ho * wo) @ cols.reshape(-1, ho * wo).T
    return gw.reshape(co, cols.shape[0], kh, kw)


if HAS_NUMBA:

    @numba.njit(cache=True)
    def conv2d_forward_numba(xp, weight, bias, sh, sw):
        co, ci, kh, kw = weight.shape
        ho = (xp.shape[1] - kh) // sh + 1
        wo = (xp.shape[2] - kw) // sw + 1
        out = np.empty((co, ho, wo), dtype=np.float64)
        for oc in range(co):
            for oy in range(ho):
                row_out = out[oc, oy]
                for x in range(wo):
                    row_out[x] = bias[oc]
                iy0 = oy * sh
                for ic in range(ci):
                    for i in range(kh):
                        row_in = xp[ic, iy0 + i]
                        for j in range(kw):
                            wv = weight[oc, ic, i, j]
                            for x in range(wo):
                                row_out[x] += wv * row_in[j + x * sw]
        return out

    @numba.njit(cache=True)
    def conv2d_backward_input_numba(gy, weight, sh, sw, hp, wp):
        co, ci, kh, kw = weight.shape
        ho, wo = gy.shape[1], gy.shape[2]
        gxp = np.zeros((ci, hp, wp), dtype=np.float64)
        for ic in range(ci):
            for oc in range(co):
                for oy in range(ho):
                    grow = gy[oc, oy]
                    iy0 = oy * sh
                    for i in range(kh):
                        gin = gxp[ic, iy0 + i]
                        for j in range(kw):
                            wv = weight[oc, ic, i, j]
                            for x in range(wo):
                                gin[j + x * sw] += wv * grow[x]
        return gxp

    @numba.njit(cache=True)
    def conv2d_backward_weight_numba(gy, xp, kh, kw, sh, sw):
        co = gy.shape[0]
        ci = xp.shape[0]
        ho, wo = gy.shape[1], gy.shape[2]
        gw = np.zeros((co, ci, kh, kw), dtype=np.float64)
        for oc in range(co):
            for ic in range(ci):
                for oy in range(ho):
                    grow = gy[oc, oy]
                    iy0 = oy * sh
                    for i in range(kh):
                        row_in = xp[ic, iy0 + i]
                        for j in range(kw):
                            acc = 0.0
                            for x in range(wo):
                                acc += grow[x] * row_in[j + x * sw]
                            gw[oc, ic, i, j] += acc
        return gw


# ---------------------------------------------------------------------------
# CTC forward/backward dynamic programs (log space)
# ---------------------------------------------------------------------------

# Sentinel for log(0).  Large enough in magnitude that exp() underflows to
# exactly zero, small enough that additions never overflow to -inf.
LOG_ZERO = -1.0e30


def _logaddexp(a, b):
    if a < b:
        a, b = b, a
    if b <= LOG_ZERO:
        return a
    return a + np.log1p(np.exp(b - a))


def ctc_alpha_numpy(log_probs, labels_ext):
    t_len = log_probs.shape[0]
    s_len = labels_ext.shape[0]
    alpha = np.full((t_len, s_len), LOG_ZERO, dtype=np.float64)
    alpha[0, 0] = log_probs[0, labels_ext[0]]
    if s_len > 1:
        alpha[0, 1] = log_probs[0, labels_ext[1]]
    # stay/advance one state always allowed; skip over a blank is allowed
    # when the two real labels it separates differ
    skip_ok = np.zeros(s_len, dtype=np.bool_)
    if s_len > 2:
        skip_ok[2:] = labels_ext[2:] != labels_ext[:-2]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([LOG_ZERO], prev[:-1]))
        acc = np.logaddexp(stay, step)
        if s_len > 2:
            skip = np.concatenate(([LOG_ZERO, LOG_ZERO], prev[:-2]))
            skip = np.where(skip_ok, skip, LOG_ZERO)
            acc = np.logaddexp(acc, skip)
        alpha[t] = acc + log_probs[t, labels_ext]
    return alpha


def ctc_beta_numpy(log_probs, labels_ext):
    t_len = log_probs.shape[0]
    s_len = labels_ext.shape[0]
    beta = np.full((t_len, s_len), LOG_ZERO, dtype=np.float64)
    beta[t_len - 1, s_len - 1] = log_probs[t_len - 1, labels_ext[s_len - 1]]
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = log_probs[t_len - 1, labels_ext[s_len - 2]]
    skip_ok = np.zeros(s_len, dtype=np.bool_)
    if s_len > 2:
        skip_ok[:-2] = labels_ext[:-2] != labels_ext[2:]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        stay = nxt
        step = np.concatenate((nxt[1:], [LOG_ZERO]))
        acc = np.logaddexp(stay, step)
        if s_len > 2:
            skip = np.concatenate((nxt[2:], [LOG_ZERO, LOG_ZERO]))
            skip = np.where(skip_ok, skip, LOG_ZERO)
            acc = np.logaddexp(acc, skip)
        beta[t] = acc + log_probs[t, labels_ext]
    return beta


if HAS_NUMBA:

    @numba.njit(cache=True)
    def _logaddexp_nb(a, b):
        if a < b:
            a, b = b, a
        if b <= LOG_ZERO:
            return a
        return a + np.log1p(np.exp(b - a))

    @numba.njit(cache=True)
    def ctc_alpha_numba(log_probs, labels_ext):
        t_len = log_probs.shape[0]
        s_len = labels_ext.shape[0]
        alpha = np.full((t_len, s_len), LOG_ZERO, dtype=np.float64)
        alpha[0, 0] = log_probs[0, labels_ext[0]]
        if s_len > 1:
            alpha[0, 1] = log_probs[0, labels_ext[1]]
        for t in range(1, t_len):
            for s in range(s_len):
                acc = alpha[t - 1, s]
                if s >= 1:
                    acc = _logaddexp_nb(acc, alpha[t - 1, s - 1])
                if s >= 2 and labels_ext[s] != labels_ext[s - 2]:
                    acc = _logaddexp_nb(acc, alpha[t - 1, s - 2])
                alpha[t, s] = acc + log_probs[t, labels_ext[s]]
        return alpha

    @numba.njit(cache=True)
    def ctc_beta_numba(log_probs, labels_ext):
        t_len = log_probs.shape[0]
        s_len = labels_ext.shape[0]
        beta = np.full((t_len, s_len), LOG_ZERO, dtype=np.float64)
        beta[t_len - 1, s_len - 1] = log_probs[t_len - 1, labels_ext[s_len - 1]]
        if s_len > 1:
            beta[t_len - 1, s_len - 2] = log_probs[t_len - 1, labels_ext[s_len - 2]]
        for t in range(t_len - 2, -1, -1):
            for s in range(s_len):
                acc = beta[t + 1, s]
                if s + 1 < s_len:
                    acc = _logaddexp_nb(acc, beta[t + 1, s + 1])
                if s + 2 < s_len and labels_ext[s] != labels_ext[s + 2]:
                    acc = _logaddexp_nb(acc, beta[t + 1, s + 2])
                beta[t, s] = acc + log_probs[t, labels_ext[s]]
        return beta


# ---------------------------------------------------------------------------
# Vertical-stroke scoring for de-slanting
# ---------------------------------------------------------------------------

def vertical_run_score_numpy(img):
    """Sum over columns of squared vertical run lengths of signal pixels."""
    if img.size == 0:
        return 0.0
    # column-major flatten with a zero row on top so runs never bleed
    # across column boundaries
    padded = np.vstack((np.zeros((1, img.shape[1]), dtype=img.dtype), img))
    flat = padded.ravel(order="F")
    on = flat != 0
    starts = on & ~np.concatenate(([False], on[:-1]))
    run_ids = np.cumsum(starts)
    lengths = np.bincount(run_ids[on]) if on.any() else np.zeros(0, dtype=np.int64)
    return float(np.sum(lengths.astype(np.float64) ** 2))


if HAS_NUMBA:

    @numba.njit(cache=True)
    def vertical_run_score_numba(img):
        h, w = img.shape
        total = 0.0
        for x in range(w):
            run = 0
            for y in range(h):
                if img[y, x] != 0:
                    run += 1
                else:
                    if run > 0:
                        total += run * run
                    run = 0
            if run > 0:
                total += run * run
        return float(total)


# ---------------------------------------------------------------------------
# Backend selection
# ---------------------------------------------------------------------------

# Fastest single-core implementation per kernel (see benchmarks/):
# BLAS-backed im2col beats scalar loops for the convolutions, compiled
# loops beat the shifted-vector recursions for the DP/scoring kernels.
_AUTO = {
    "conv2d_forward": "numpy",
    "conv2d_backward_input": "numpy",
    "conv2d_backward_weight": "numpy",
    "ctc_alpha": "numba",
    "ctc_beta": "numba",
    "vertical_run_score": "numba",
}

_KERNEL_NAMES = tuple(_AUTO)


def _resolve(mode):
    if mode not in ("auto", "numba", "numpy"):
        raise ValueError(
            f"PAGEREC_KERNELS must be 'auto', 'numba' or 'numpy', got {mode!r}"
        )
    if mode == "numba" and not HAS_NUMBA:
        raise RuntimeError("PAGEREC_KERNELS=numba but numba is not importable")
    table = {}
    for name in _KERNEL_NAMES:
        impl = mode if mode != "auto" else _AUTO[name]
        if impl == "numba" and not HAS_NUMBA:
            impl = "numpy"
        table[name] = globals()[f"{name}_{impl}"]
    return table


KERNEL_MODE = os.environ.get("PAGEREC_KERNELS", "auto").strip().lower() or "auto"
_table = _resolve(KERNEL_MODE)

conv2d_forward = _table["conv2d_forward"]
conv2d_backward_input = _table["conv2d_backward_input"]
conv2d_backward_weight = _table["conv2d_backward_weight"]
ctc_alpha = _table["ctc_alpha"]
ctc_beta = _table["ctc_beta"]
vertical_run_score = _table["vertical_run_score"]
