"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--size 24] [--repeat 3]

Both backends run on the same inputs; outputs are compared before timing
is reported.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from topomicro._kernels import _pure
from topomicro.topology import build_complex, signed_distance_filtration

try:
    from topomicro._kernels import _core
except ImportError:  # extension not built
    _core = None


def _inputs(size: int, seed: int):
    rng = np.random.default_rng(seed)
    mask = np.ascontiguousarray(rng.random((size,) * 3) < 0.5, dtype=np.uint8)
    pri = np.ascontiguousarray(_pure.sq_edt(mask).astype(np.float64))
    markers = np.zeros(mask.shape, np.int32)
    for i, p in enumerate(np.argwhere(mask)[:: max(1, mask.sum() // 20)]):
        markers[tuple(p)] = i + 1
    c = build_complex(signed_distance_filtration(mask.astype(bool)))
    return {
        "sq_edt": (mask,),
        "label6": (mask,),
        "flood": (pri, markers, mask),
        "cubical_pairs": (c.values.shape, c.filtration_order()),
    }


def _best(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times), out


def _same(a, b) -> bool:
    if isinstance(a, (tuple, list)):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=24, help="edge length of the random test volume")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if _core is None:
        print("compiled extension not available; build it with `pip install -e . --no-build-isolation`")
        return 1
    inputs = _inputs(args.size, args.seed)
    print(f"volume {args.size}^3, best of {args.repeat}")
    print(f"{'kernel':<15}{'cython [s]':>12}{'python [s]':>12}{'speed-up':>10}")
    for name, fn_args in inputs.items():
        tc, oc = _best(getattr(_core, name), fn_args, args.repeat)
        tp, op = _best(getattr(_pure, name), fn_args, args.repeat)
        if not _same(oc, op):
            raise SystemExit(f"{name}: backends disagree")
        print(f"{name:<15}{tc:>12.4f}{tp:>12.4f}{tp / tc:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
