"""Central finite-difference gradient checking shared by tests and the CLI.

``grad_check`` rebuilds the forward pass per perturbed element, so the op
under test sees freshly mutated leaf data each time; relative error uses a
1e-6 absolute floor to keep near-zero gradients from exploding the ratio.
"""

import numpy as np

from . import ctc, layers
from .autodiff import (
    Tensor,
    backward,
    concat,
    log_softmax,
    matmul,
    mean,
    mul,
    narrow,
    permute,
    relu,
    reshape,
    sigmoid,
    softmax_rows,
    tanh,
    tsum,
)
from .autodiff import add as t_add
from .autodiff import layer_norm as t_layer_norm

FD_STEP = 1e-5
REL_FLOOR = 1e-6


def grad_check(build, leaves, h=FD_STEP):
    """Max relative error between analytic and central-FD gradients.

    ``build`` must return a scalar Tensor recomputed from the current data
    of ``leaves`` (a dict name -> Tensor with requires_grad).
    """
    for t in leaves.values():
        t.grad = None
    loss = build()
    backward(loss)
    worst = 0.0
    for name, t in leaves.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = float(build().data)
            flat[i] = keep - h
            down = float(build().data)
            flat[i] = keep
            numeric = (up - down) / (2.0 * h)
            ga = analytic.reshape(-1)[i]
            rel = abs(ga - numeric) / max(abs(ga), abs(numeric), REL_FLOOR)
            worst = max(worst, rel)
    return worst


def _leaf(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def suite(seed=0):
    """One representative gradient check per op; returns {op: max rel err}.

    The test suite runs each op over many random shapes; this function is
    the quick self-check behind the CLI's gradcheck command.
    """
    rng = np.random.default_rng(seed)
    results = {}

    x = _leaf(rng, (3, 4))
    y = _leaf(rng, (3, 4))
    results["add"] = grad_check(lambda: tsum(t_add(x, y)), {"x": x, "y": y})
    results["mul"] = grad_check(lambda: tsum(mul(x, y)), {"x": x, "y": y})
    a = _leaf(rng, (3, 5))
    b = _leaf(rng, (5, 2))
    results["matmul"] = grad_check(lambda: tsum(matmul(a, b)), {"a": a, "b": b})
    z = _leaf(rng, (4, 4))
    results["relu"] = grad_check(lambda: tsum(relu(z)), {"z": z})
    results["sigmoid"] = grad_check(lambda: tsum(sigmoid(z)), {"z": z})
    results["tanh"] = grad_check(lambda: tsum(tanh(z)), {"z": z})
    results["mean"] = grad_check(lambda: mean(mul(z, z)), {"z": z})
    results["reshape"] = grad_check(
        lambda: tsum(mul(reshape(z, (2, 8)), reshape(z, (2, 8)))), {"z": z}
    )
    results["permute"] = grad_check(
        lambda: tsum(mul(permute(z, (1, 0)), permute(z, (1, 0)))), {"z": z}
    )
    results["narrow"] = grad_check(lambda: tsum(narrow(z, 1, 1, 2)), {"z": z})
    results["concat"] = grad_check(
        lambda: tsum(mul(concat([x, y], axis=0), concat([x, y], axis=0))),
        {"x": x, "y": y},
    )
    results["log_softmax"] = grad_check(
        lambda: tsum(mul(log_softmax(z), Tensor(np.arange(16.0).reshape(4, 4)))),
        {"z": z},
    )
    results["softmax_rows"] = grad_check(
        lambda: tsum(mul(softmax_rows(z), Tensor(np.arange(16.0).reshape(4, 4)))),
        {"z": z},
    )
    g = _leaf(rng, (4,))
    bt = _leaf(rng, (4,))
    ln_mul = Tensor(rng.uniform(-1, 1, size=(4, 4)))
    results["layer_norm"] = grad_check(
        lambda: tsum(mul(t_layer_norm(z, g, bt), ln_mul)),
        {"z": z, "g": g, "bt": bt},
    )

    img = _leaf(rng, (2, 6, 7))
    w = _leaf(rng, (3, 2, 3, 3))
    cb = _leaf(rng, (3,))
    results["conv2d"] = grad_check(
        lambda: tsum(layers.conv2d(img, w, cb, (2, 1), (1, 1))),
        {"img": img, "w": w, "cb": cb},
    )

    bx = _leaf(rng, (3, 5, 4))
    bg = _leaf(rng, (3,), 0.5, 1.5)
    bb = _leaf(rng, (3,))
    bn_mul = Tensor(rng.uniform(-1, 1, size=(3, 5, 4)))
    stats = {"mean": np.zeros(3), "var": np.ones(3)}
    results["batch_norm"] = grad_check(
        lambda: tsum(mul(layers.batch_norm(bx, bg, bb, stats, True), bn_mul)),
        {"bx": bx, "bg": bg, "bb": bb},
    )

    dx = _leaf(rng, (3, 4))
    dw = _leaf(rng, (4, 2))
    db = _leaf(rng, (2,))
    results["dense"] = grad_check(
        lambda: tsum(layers.dense(dx, dw, db)), {"dx": dx, "dw": dw, "db": db}
    )

    enc_rng = np.random.default_rng(seed + 1)
    ex = _leaf(enc_rng, (3, 4))
    ep = layers.init_transformer_layer(enc_rng, 4, 6)
    results["transformer_encoder_layer"] = grad_check(
        lambda: tsum(layers.transformer_encoder_layer(ex, ep, 2)),
        {"ex": ex, **ep},
    )

    lx = _leaf(enc_rng, (3, 4))
    lp = layers.init_blstm_layer(enc_rng, 4, 3)
    results["blstm_layer"] = grad_check(
        lambda: tsum(layers.blstm_layer(lx, lp)), {"lx": lx, **lp}
    )

    cx = Tensor(rng.uniform(-1, 1, size=(5, 4)), requires_grad=True)
    results["ctc_loss"] = grad_check(
        lambda: ctc.ctc_loss(log_softmax(cx), [0, 1, 0], blank=3), {"cx": cx}
    )
    return results
