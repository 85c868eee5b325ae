"""Time the compiled kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the best-of-N wall time of each backend and
the speed-up, after checking that both backends agree.
"""
import argparse
import timeit

import numpy as np

from cohortgraph import _fallback

try:
    from cohortgraph import _ckernels
except ImportError:  # pragma: no cover - extension not built
    _ckernels = None


def cases(rng):
    x = rng.standard_normal((32, 16, 32, 32)).astype(np.float32)
    cols = _fallback.im2col3x3(x)
    pooled, arg = _fallback.maxpool2x2(x)
    a = rng.standard_normal((200, 18))
    w = rng.random(18)
    feat = rng.standard_normal(200)
    labels = rng.integers(0, 2, 200).astype(np.int64)
    k = np.full(200, 3, dtype=np.int64)
    radius = _fallback.same_label_kth_distance(feat, labels, k)
    return {
        "im2col3x3 (32x16x32x32)": ("im2col3x3", (x,)),
        "col2im3x3": ("col2im3x3", (cols, 32, 16, 32, 32)),
        "maxpool2x2": ("maxpool2x2", (x,)),
        "maxpool2x2_backward": ("maxpool2x2_backward", (pooled, arg, 32, 32)),
        "pairwise_minkowski (200x200, d=18)": ("pairwise_minkowski", (a, a, w, 2.0)),
        "same_label_kth_distance (n=200)": ("same_label_kth_distance", (feat, labels, k)),
        "count_within (n=200)": ("count_within", (feat, radius)),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(np.asarray(a, dtype=float), np.asarray(b, dtype=float), rtol=1e-6, atol=1e-6)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=3)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension unavailable; nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':40s} {'numpy ms':>10s} {'cython ms':>10s} {'speed-up':>9s}")
    for label, (name, call_args) in cases(rng).items():
        slow, fast = getattr(_fallback, name), getattr(_ckernels, name)
        if not _same(slow(*call_args), fast(*call_args)):
            raise SystemExit(f"{name}: backends disagree")
        t_slow = min(timeit.repeat(lambda: slow(*call_args), number=args.number, repeat=args.repeat)) / args.number
        t_fast = min(timeit.repeat(lambda: fast(*call_args), number=args.number, repeat=args.repeat)) / args.number
        print(f"{label:40s} {t_slow * 1e3:10.3f} {t_fast * 1e3:10.3f} {t_slow / t_fast:8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
