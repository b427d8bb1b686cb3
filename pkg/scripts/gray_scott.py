"""Long Gray-Scott run writing snapshots every few steps.

    python scripts/gray_scott.py --t-final 2000 --dt 1 --every 100
"""
import argparse

from parapot.cli import RunConfig, run


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--t-final", type=float, default=200.0)
    ap.add_argument("--dt", type=float, default=1.0)
    ap.add_argument("--eps", type=float, default=1e-8)
    ap.add_argument("--scheme", default="AM2")
    ap.add_argument("--every", type=int, default=50)
    ap.add_argument("--out", default="runs/gray_scott")
    a = ap.parse_args()
    cfg = RunConfig(problem="gray-scott", scheme=a.scheme, dt=a.dt, t_final=a.t_final, eps=a.eps, snapshot_every=a.every)
    print(run(cfg, a.out).summary)


if __name__ == "__main__":
    main()
