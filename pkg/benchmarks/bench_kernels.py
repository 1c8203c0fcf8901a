#!/usr/bin/env python3
"""Time the compiled kernel extension against the numpy fallback.

Every backend entry point runs on representative workloads under both
implementations; outputs are compared bit for bit and per-call times are
reported side by side.

    python3 benchmarks/bench_kernels.py [--repeats N] [--quick]
"""

import argparse
import sys
import time

import numpy as np

from nerfdesk.backend import load_impl
from nerfdesk.rng import Prng


def _composite_inputs(rng, rays, samples):
    sigma = np.abs(rng.normal((rays, samples))) * 2.0
    delta = rng.uniform((rays, samples)) * 0.05 + 0.01
    om = np.exp(-sigma * delta)
    alpha = -np.expm1(-sigma * delta)
    rgb = rng.uniform((rays, samples, 3))
    bg = rng.uniform((3,))
    return om, alpha, rgb, bg, sigma, delta


def _workloads(quick):
    scale = 4 if quick else 1
    rng = Prng(2024)
    out = []

    for n in (10_000 // scale, 1_000_000 // scale):
        out.append(("exact_sum", f"n={n}", (rng.normal((n,)),)))

    for rows, cols in ((256 // scale, 64), (4096 // scale, 256)):
        out.append(("exact_rowsum", f"{rows}x{cols}",
                    (np.exp(rng.normal((rows, cols))),)))

    for tokens, d in ((64, 32), (256 // scale, 64)):
        logits = rng.normal((tokens, tokens))
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        out.append(("exact_weighted_rows", f"p {tokens}x{tokens}, v {tokens}x{d}",
                    (p, rng.normal((tokens, d)))))

    for rays, samples in ((1024 // scale, 128), (4096 // scale, 32)):
        om, alpha, rgb, bg, _, _ = _composite_inputs(rng, rays, samples)
        out.append(("composite_scan", f"{rays} rays x {samples} samples",
                    (om, alpha, rgb, bg)))

    for rays, samples in ((1024 // scale, 128),):
        om, alpha, rgb, bg, _, delta = _composite_inputs(rng, rays, samples)
        ref = load_impl("numpy")
        _, _, w = ref.composite_scan(om, alpha, rgb, bg)
        gpix = rng.normal((rays, 3))
        gop = rng.normal((rays,))
        out.append(("composite_scan_backward",
                    f"{rays} rays x {samples} samples",
                    (gpix, gop, delta, rgb, bg, om, w)))

    for n, m in ((512 // scale, 512 // scale), (2048 // scale, 2048 // scale)):
        out.append(("chamfer_nn", f"{n} vs {m} points",
                    (rng.normal((n, 3)), rng.normal((m, 3)))))
    return out


def _time_call(fn, args, repeats, min_window=0.02):
    loops = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(loops):
            fn(*args)
        dt = time.perf_counter() - t0
        if dt >= min_window or loops >= 1 << 20:
            break
        loops *= 4
    best = dt / loops
    for _ in range(repeats - 1):
        t0 = time.perf_counter()
        for _ in range(loops):
            fn(*args)
        best = min(best, (time.perf_counter() - t0) / loops)
    return best


def _as_tuple(x):
    return x if isinstance(x, tuple) else (x,)


def _identical(a, b):
    for x, y in zip(_as_tuple(a), _as_tuple(b)):
        if isinstance(x, float):
            if x != y:
                return False
        elif not np.array_equal(np.asarray(x), np.asarray(y)):
            return False
    return True


def _fmt_time(seconds):
    if seconds < 1e-3:
        return f"{seconds * 1e6:8.1f} us"
    return f"{seconds * 1e3:8.2f} ms"


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3,
                    help="timing repetitions per workload (best is kept)")
    ap.add_argument("--quick", action="store_true",
                    help="shrink workloads for a fast smoke run")
    args = ap.parse_args(argv)

    numpy_impl = load_impl("numpy")
    try:
        compiled = load_impl("compiled")
    except ImportError:
        compiled = None
        print("compiled extension not importable; timing the numpy "
              "fallback only", file=sys.stderr)

    header = (f"{'kernel':<26} {'workload':<34} {'numpy':>11}"
              f" {'compiled':>11} {'speedup':>8}  match")
    print(header)
    print("-" * len(header))
    mismatches = 0
    for name, label, call_args in _workloads(args.quick):
        t_np = _time_call(getattr(numpy_impl, name), call_args, args.repeats)
        if compiled is None:
            print(f"{name:<26} {label:<34} {_fmt_time(t_np)}")
            continue
        t_c = _time_call(getattr(compiled, name), call_args, args.repeats)
        same = _identical(getattr(numpy_impl, name)(*call_args),
                          getattr(compiled, name)(*call_args))
        mismatches += 0 if same else 1
        print(f"{name:<26} {label:<34} {_fmt_time(t_np)} {_fmt_time(t_c)}"
              f" {t_np / t_c:7.1f}x  {'yes' if same else 'NO'}")
    if mismatches:
        print(f"\n{mismatches} workload(s) disagreed between backends",
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
