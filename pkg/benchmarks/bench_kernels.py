"""Single-core timing of every hot kernel in both implementations.

Each kernel ships twice (compiled loops vs vectorized numpy); this script
times both on representative shapes, cross-checks that they agree, and
prints the table behind the per-kernel defaults baked into
``pagerec.kernels._AUTO``.

    python3 benchmarks/bench_kernels.py [--repeats N] [--quick]
"""

import argparse
import time

import numpy as np

from pagerec import kernels
from pagerec.ctc import extend_with_blanks


def best_of(fn, args, repeats):
    """Minimum wall time over ``repeats`` calls, in milliseconds."""
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best * 1000.0


def workloads(quick):
    """(kernel name, args) on shapes the recognizer actually runs.

    conv shapes mirror a mid-stack layer on a 64x512 line; the CTC DP uses
    a page-sized frame count against a 40-symbol target.
    """
    rng = np.random.default_rng(0)
    scale = 2 if quick else 1

    ci, co = 64 // scale, 128 // scale
    xp = rng.standard_normal((ci, 34, 130 // scale))
    w = rng.standard_normal((co, ci, 3, 3))
    b = rng.standard_normal(co)
    gy = rng.standard_normal((co, 32, 128 // scale))

    t_len = 288 // scale
    n_sym = 64
    logp = np.log(rng.dirichlet(np.ones(n_sym), size=t_len))
    target = rng.integers(0, n_sym - 1, size=40 // scale)
    labels_ext = extend_with_blanks(list(target), blank=n_sym - 1)

    img = (rng.random((512 // scale, 512 // scale)) < 0.1).astype(np.uint8)

    return [
        ("conv2d_forward", (xp, w, b, 1, 1)),
        ("conv2d_backward_input", (gy, w, 1, 1, xp.shape[1], xp.shape[2])),
        ("conv2d_backward_weight", (gy, xp, 3, 3, 1, 1)),
        ("ctc_alpha", (logp, labels_ext)),
        ("ctc_beta", (logp, labels_ext)),
        ("vertical_run_score", (img,)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5,
                    help="take the best of this many timed calls")
    ap.add_argument("--quick", action="store_true",
                    help="quarter-size workloads (CI smoke run)")
    args = ap.parse_args(argv)

    if not kernels.HAS_NUMBA:
        print("numba not importable: timing the numpy implementations only")

    header = f"{'kernel':<24} {'numpy[ms]':>10} {'numba[ms]':>10} " \
             f"{'speedup':>8}  auto"
    print(header)
    print("-" * len(header))
    for name, call_args in workloads(args.quick):
        np_fn = getattr(kernels, f"{name}_numpy")
        ref = np_fn(*call_args)
        t_np = best_of(np_fn, call_args, args.repeats)
        if kernels.HAS_NUMBA:
            nb_fn = getattr(kernels, f"{name}_numba")
            got = nb_fn(*call_args)  # first call compiles; timed after
            if not np.allclose(ref, got, rtol=1e-10, atol=1e-10):
                raise AssertionError(f"{name}: implementations disagree")
            t_nb = best_of(nb_fn, call_args, args.repeats)
            ratio = t_np / t_nb
            print(f"{name:<24} {t_np:>10.3f} {t_nb:>10.3f} {ratio:>7.2f}x"
                  f"  {kernels._AUTO[name]}")
        else:
            print(f"{name:<24} {t_np:>10.3f} {'-':>10} {'-':>8}"
                  f"  {kernels._AUTO[name]}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
