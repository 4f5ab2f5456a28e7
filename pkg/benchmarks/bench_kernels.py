"""Time the numba and numpy LSTM / haversine kernels against each other.

Usage::

    python benchmarks/bench_kernels.py [--batch 32] [--days 365] [--hidden 32] [--repeat 5]

Both implementations are imported explicitly, so ``RACI_DISABLE_NUMBA`` does
not matter here. The first numba call (compilation) is excluded from timing.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from raci import kernels as K


def best_of(fn, args, repeat):
    fn(*args)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--days", type=int, default=365)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--sites", type=int, default=500)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    if not K.NUMBA_AVAILABLE:
        print("numba is not installed; only the numpy path exists")
        return 1
    rng = np.random.default_rng(0)
    h = args.hidden
    xproj = rng.normal(size=(args.days, args.batch, 4 * h))
    wh = rng.normal(scale=1.0 / np.sqrt(h), size=(h, 4 * h))
    hs, cs, gates = K.lstm_forward_numpy(xproj, wh)
    dhs = rng.normal(size=hs.shape)
    lat = rng.uniform(-80, 80, args.sites)
    lon = rng.uniform(-180, 180, args.sites)

    cases = [
        ("lstm_forward", (xproj, wh), K.lstm_forward_numpy, K.lstm_forward_numba),
        ("lstm_backward", (dhs, wh, hs, cs, gates), K.lstm_backward_numpy, K.lstm_backward_numba),
        ("haversine_matrix", (lat, lon), K.haversine_matrix_numpy, K.haversine_matrix_numba),
    ]
    print(f"batch={args.batch} days={args.days} hidden={h} sites={args.sites} (best of {args.repeat})")
    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}{'max |diff|':>12}")
    for name, inputs, f_np, f_nb in cases:
        t_np = best_of(f_np, inputs, args.repeat)
        t_nb = best_of(f_nb, inputs, args.repeat)
        a, b = f_np(*inputs), f_nb(*inputs)
        a = a if isinstance(a, tuple) else (a,)
        b = b if isinstance(b, tuple) else (b,)
        diff = max(float(np.max(np.abs(x - y))) for x, y in zip(a, b))
        print(f"{name:<18}{1e3 * t_np:>10.2f}{1e3 * t_nb:>10.2f}{t_np / t_nb:>8.2f}x{diff:>12.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
