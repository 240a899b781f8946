"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a C-contiguous float64 ndarray.  Operations build a
graph by storing parent references and a backward closure on the output;
``backward(loss)`` topologically orders the recorded operations (each op
is visited exactly once) and pushes gradients from a scalar loss back to
every leaf with ``requires_grad``.  By default the graph is released as it
is consumed so a training step does not retain activations.

Tensors are immutable after creation except for the ``grad`` buffer.
Operations that do not touch parameters (``requires_grad=False``
everywhere) record nothing and may run concurrently.
"""

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        # note: ascontiguousarray would promote 0-d scalars to shape (1,)
        data = np.asarray(data, dtype=np.float64)
        if not data.flags["C_CONTIGUOUS"]:
            data = np.ascontiguousarray(data)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # small conveniences used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _make(data, parents, backward_fn):
    """Wrap an op result, recording the edge only when a parent needs it."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss, free_graph=True):
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    ``loss`` must be a scalar tensor.  With ``free_graph`` the recorded
    operations are dropped as they are consumed, releasing activation
    memory; pass ``False`` to keep the graph (e.g. for inspection).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)
            if free_graph:
                node._parents = ()
                node._backward_fn = None
                node.grad = None


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and linear algebra primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bwd)


def scale(a, c):
    c = float(c)

    def bwd(g):
        a.accumulate_grad(g * c)

    return _make(a.data * c, (a,), bwd)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bwd)


def relu(a):
    mask = a.data > 0.0

    def bwd(g):
        a.accumulate_grad(g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), bwd)


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        a.accumulate_grad(g * y * (1.0 - y))

    return _make(y, (a,), bwd)


def tanh(a):
    y = np.tanh(a.data)

    def bwd(g):
        a.accumulate_grad(g * (1.0 - y * y))

    return _make(y, (a,), bwd)


def tsum(a):
    def bwd(g):
        a.accumulate_grad(np.full_like(a.data, float(g)))

    return _make(np.asarray(a.data.sum()), (a,), bwd)


def mean(a):
    n = a.data.size

    def bwd(g):
        a.accumulate_grad(np.full_like(a.data, float(g) / n))

    return _make(np.asarray(a.data.mean()), (a,), bwd)


# ---------------------------------------------------------------------------
# shape movement
# ---------------------------------------------------------------------------

def reshape(a, shape):
    old = a.data.shape

    def bwd(g):
        a.accumulate_grad(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bwd)


def permute(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        a.accumulate_grad(g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), bwd)


def transpose(a):
    return permute(a, (1, 0))


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along ``axis``."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        a.accumulate_grad(buf)

    return _make(a.data[idx], (a,), bwd)


def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p.accumulate_grad(g[tuple(idx)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd)


# ---------------------------------------------------------------------------
# row-wise normalizations
# ---------------------------------------------------------------------------

def log_softmax(a):
    """Row-wise log softmax of a [T, K] tensor, max-subtracted for stability."""
    if a.data.ndim != 2:
        raise ValueError(f"log_softmax expects [T, K], got {a.data.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse

    def bwd(g):
        a.accumulate_grad(g - np.exp(y) * g.sum(axis=1, keepdims=True))

    return _make(y, (a,), bwd)


def softmax_rows(a):
    """Row-wise softmax of a [T, K] tensor (attention weights)."""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        a.accumulate_grad(y * (g - dot))

    return _make(y, (a,), bwd)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalize each row of [T, D] to zero mean / unit variance, then affine."""
    mu = a.data.mean(axis=1, keepdims=True)
    var = a.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    d = a.data.shape[1]

    def bwd(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=0))
        if a.requires_grad:
            gx = g * gamma.data
            term = gx - gx.mean(axis=1, keepdims=True) \
                - xhat * (gx * xhat).mean(axis=1, keepdims=True)
            a.accumulate_grad(term * inv)

    return _make(xhat * gamma.data + beta.data, (a, gamma, beta), bwd)


def dropout(a, rate, rng, training):
    """Inverted dropout; identity when not training or rate is 0."""
    if not training or rate <= 0.0:
        return a
    keep = 1.0 - rate
    mask = (rng.random(a.data.shape) < keep) / keep

    def bwd(g):
        a.accumulate_grad(g * mask)

    return _make(a.data * mask, (a,), bwd)
