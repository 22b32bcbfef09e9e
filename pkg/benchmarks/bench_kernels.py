"""Time the numba kernels against the numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--n 1000000] [--repeats 5] [--json out.json]

Both paths are called directly, so the env flag does not matter here. The
numba functions are compiled (or loaded from cache) before timing.
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from qlora_cls import kernels
from qlora_cls._accel import HAVE_NUMBA
from qlora_cls.quantization import DYNAMIC_MAP_8BIT, DYNAMIC_ZERO_INDEX, NF4_LEVELS, NF4_ZERO_INDEX

CASES = {
    "nf4/64": (NF4_LEVELS, NF4_ZERO_INDEX, 64),
    "dyn8/256": (DYNAMIC_MAP_8BIT, DYNAMIC_ZERO_INDEX, 256),
}


def best_of(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def run(n: int, repeats: int, seed: int = 0) -> list[dict]:
    x = np.random.default_rng(seed).normal(size=n).astype(np.float32)
    rows = []
    for name, (book, zero, bs) in CASES.items():
        q_np = lambda: kernels.quantize_blockwise_numpy(x, bs, book, zero)  # noqa: E731
        codes, scales = q_np()
        d_np = lambda: kernels.dequantize_blockwise_numpy(codes, scales, bs, book)  # noqa: E731
        row = {"case": name, "n": n, "quantize_numpy_s": best_of(q_np, repeats), "dequantize_numpy_s": best_of(d_np, repeats)}
        if HAVE_NUMBA:
            q_nb = lambda: kernels.quantize_blockwise_numba(x, bs, book, zero)  # noqa: E731
            d_nb = lambda: kernels.dequantize_blockwise_numba(codes, scales, bs, book)  # noqa: E731
            c2, s2 = q_nb()  # compile
            d_nb()
            if not (np.array_equal(codes, c2) and np.array_equal(scales, s2)):
                raise AssertionError(f"{name}: numba and numpy codes differ")
            row["quantize_numba_s"] = best_of(q_nb, repeats)
            row["dequantize_numba_s"] = best_of(d_nb, repeats)
            row["quantize_speedup"] = row["quantize_numpy_s"] / row["quantize_numba_s"]
            row["dequantize_speedup"] = row["dequantize_numpy_s"] / row["dequantize_numba_s"]
        rows.append(row)
    return rows


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=1_000_000)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--json")
    args = p.parse_args(argv)
    rows = run(args.n, args.repeats)
    for r in rows:
        line = f"{r['case']:<9} n={r['n']}  quantize numpy {r['quantize_numpy_s'] * 1e3:8.2f} ms"
        if "quantize_numba_s" in r:
            line += f"  numba {r['quantize_numba_s'] * 1e3:8.2f} ms  ({r['quantize_speedup']:.1f}x)"
        print(line)
        line = f"{'':<9} n={r['n']}  dequant  numpy {r['dequantize_numpy_s'] * 1e3:8.2f} ms"
        if "dequantize_numba_s" in r:
            line += f"  numba {r['dequantize_numba_s'] * 1e3:8.2f} ms  ({r['dequantize_speedup']:.1f}x)"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
