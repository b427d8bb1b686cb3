"""FGT throughput on uniform trees of growing size.

    python scripts/fgt_scaling.py --eps 1e-6 --levels 3 4 5 6
"""
import argparse
import time

import numpy as np

from parapot import fgt
from parapot.adaptree import AdaptiveTree, TreeField, sample_function


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--eps", type=float, default=1e-6)
    ap.add_argument("--delta", type=float, default=1e-3)
    ap.add_argument("--K", type=int, default=16)
    ap.add_argument("--levels", type=int, nargs="*", default=[3, 4, 5, 6])
    a = ap.parse_args()
    plan = fgt.get_plan(a.delta, a.eps, a.K)
    f = lambda x, y: np.exp(np.cos(2 * np.pi * x) * np.sin(2 * np.pi * y))  # noqa: E731
    print("N_pts,seconds,points_per_second")
    for lev in a.levels:
        tree = AdaptiveTree.uniform(lev)
        src = TreeField(tree, sample_function(f, tree, a.K, 1))
        fgt.apply(plan, src)  # warm the table caches
        t0 = time.perf_counter()
        fgt.apply(plan, src)
        dt = time.perf_counter() - t0
        n = len(tree) * a.K**2
        print(f"{n},{dt:.3f},{n / dt:.3e}")


if __name__ == "__main__":
    main()
