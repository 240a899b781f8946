"""CTC loss, decoding, and a brute-force alignment-enumeration oracle.

The loss runs the standard log-space forward/backward dynamic program over
the blank-extended label sequence (S' = 2*|target| + 1 states) and exposes
the analytic gradient with respect to the input log-probabilities, so it
plugs into the autodiff graph as a single op.  log(0) is the ``LOG_ZERO``
sentinel from :mod:`pagerec.kernels`, chosen so exp() underflows to exactly
0.0 and sums never reach -inf.

``ctc_brute_force`` is deliberately naive: it enumerates every one of the
K^T frame paths, collapses each (merge repeats, then drop blanks), and sums
the probabilities of those that match the target.  It exists purely as a
test oracle for the dynamic program.
"""

import itertools

import numpy as np

from . import kernels
from .autodiff import Tensor, _make
from .kernels import LOG_ZERO


class InfeasibleLength(ValueError):
    """Raised when T frames cannot carry the target under CTC topology."""

    def __init__(self, t_len, required):
        self.t_len = t_len
        self.required = required
        super().__init__(
            f"CTC needs at least {required} frames for this target, got {t_len}"
        )


def min_ctc_length(target):
    """|target| plus one mandatory blank between each adjacent repeat."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def extend_with_blanks(target, blank):
    """Interleave blanks: y1..yn -> blank y1 blank y2 ... yn blank."""
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def _validate_target(target, n_symbols, blank):
    for idx in target:
        if not 0 <= idx < n_symbols:
            raise ValueError(f"target id {idx} outside [0, {n_symbols})")
        if idx == blank:
            raise ValueError(f"target contains the blank id {blank}")


def ctc_loss(log_probs, target, blank):
    """Negative log probability of ``target`` under [T, K] log-probabilities.

    Differentiable: backward deposits the analytic gradient into
    ``log_probs.grad``.  Raises :class:`InfeasibleLength` when T is too
    short, carrying (t_len, required).
    """
    lp = log_probs.data
    t_len, n_symbols = lp.shape
    target = [int(i) for i in target]
    _validate_target(target, n_symbols, blank)
    required = min_ctc_length(target)
    if t_len < required or t_len < 1:
        raise InfeasibleLength(t_len, max(required, 1))

    labels_ext = extend_with_blanks(target, blank)
    s_len = labels_ext.shape[0]
    alpha = kernels.ctc_alpha(lp, labels_ext)
    log_p = alpha[t_len - 1, s_len - 1]
    if s_len > 1:
        with np.errstate(invalid="ignore"):  # NaN input is reported below
            log_p = np.logaddexp(log_p, alpha[t_len - 1, s_len - 2])
    if not np.isfinite(log_p) or log_p <= LOG_ZERO / 2:
        raise FloatingPointError(
            f"CTC total path probability underflowed (log P = {log_p})"
        )

    beta = kernels.ctc_beta(lp, labels_ext)
    # gamma[t,s] = log P(paths through state s at time t); alpha and beta
    # both include the emission at t, so subtract it once
    gamma = alpha + beta - lp[:, labels_ext]
    occupancy = np.exp(gamma - log_p)  # rows sum to 1
    grad_lp = np.zeros_like(lp)
    for s in range(s_len):
        grad_lp[:, labels_ext[s]] -= occupancy[:, s]

    def bwd(g):
        log_probs.accumulate_grad(float(g) * grad_lp)

    return _make(np.asarray(-log_p), (log_probs,), bwd)


# ---------------------------------------------------------------------------
# brute-force oracle
# ---------------------------------------------------------------------------

BRUTE_FORCE_BUDGET = 2_000_000


def collapse_path(path, blank):
    """CTC collapse: merge consecutive repeats, then remove blanks."""
    merged = [k for k, _ in itertools.groupby(path)]
    return tuple(k for k in merged if k != blank)


# (n_symbols, t_len) -> (path index matrix [K^T, T], {collapsed: row indices})
_ENUM_CACHE = {}


def _enumerate_paths(n_symbols, t_len):
    key = (n_symbols, t_len)
    if key not in _ENUM_CACHE:
        paths = np.array(
            list(itertools.product(range(n_symbols), repeat=t_len)), dtype=np.int64
        ).reshape(-1, t_len)
        # collapse grouping depends on the blank id; filled lazily per blank
        _ENUM_CACHE[key] = (paths, {})
    return _ENUM_CACHE[key]


def _collapse_groups(n_symbols, t_len, blank):
    paths, by_blank = _enumerate_paths(n_symbols, t_len)
    if blank not in by_blank:
        groups = {}
        for row in range(paths.shape[0]):
            collapsed = collapse_path(paths[row], blank)
            groups.setdefault(collapsed, []).append(row)
        by_blank[blank] = {k: np.array(v, dtype=np.int64) for k, v in groups.items()}
    return paths, by_blank[blank]


def ctc_brute_force(log_probs, target, blank):
    """Loss by explicit enumeration of all K^T paths; the test oracle.

    Returns +inf when no path collapses to the target.  Refuses when K^T
    exceeds the enumeration budget.
    """
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    t_len, n_symbols = lp.shape
    if n_symbols**t_len > BRUTE_FORCE_BUDGET:
        raise ValueError(
            f"brute force refuses {n_symbols}^{t_len} paths "
            f"(budget {BRUTE_FORCE_BUDGET})"
        )
    target = tuple(int(i) for i in target)
    _validate_target(target, n_symbols, blank)
    paths, groups = _collapse_groups(n_symbols, t_len, blank)
    rows = groups.get(target)
    if rows is None:
        return float("inf")
    path_log_p = lp[np.arange(t_len)[None, :], paths[rows]].sum(axis=1)
    total = float(np.exp(path_log_p).sum())
    if total <= 0.0:
        return float("inf")
    return -float(np.log(total))


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def best_path_decode(log_probs, blank):
    """Frame-wise argmax, then CTC collapse.

    Ties break toward the lowest symbol id (argmax takes the first maximum).
    Returns a list of symbol ids without blanks.
    """
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    frames = lp.argmax(axis=1)
    return list(collapse_path(frames, blank))
