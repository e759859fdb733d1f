"""Time the compiled reservoir kernel against the numpy fallback.

Usage: python3 benchmarks/compare_kernels.py [n_x ...]
"""
import sys

from esncv import kernels
from esncv.bench import compare_kernels


def main(sizes):
    print(f"available implementations: {sorted(kernels.IMPLEMENTATIONS)} (active: {kernels.ACTIVE})")
    print(f"{'n_x':>6s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s} {'max diff':>10s}")
    for n_x in sizes:
        res = compare_kernels(n_x=n_x)
        ms = res["best_ms"]
        print(f"{n_x:6d} {ms.get('python', float('nan')):10.2f} "
              f"{ms.get('compiled', float('nan')):12.2f} {res.get('speedup', float('nan')):8.2f} "
              f"{res['max_abs_diff']:10.1e}")


if __name__ == "__main__":
    main([int(a) for a in sys.argv[1:]] or [20, 50, 100, 300, 1000])
