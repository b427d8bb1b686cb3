"""Step-halving study for the forced heat problem against the dense Duhamel reference.

    python scripts/heat_convergence.py AM2 2 4 8 16 32
"""
import argparse

from parapot.cli import RunConfig, converge, estimated_orders


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("scheme", default="AM2", nargs="?")
    ap.add_argument("steps", type=int, nargs="*", default=[2, 4, 8, 16, 32])
    ap.add_argument("--eps", type=float, default=1e-9)
    ap.add_argument("--t-final", type=float, default=0.01)
    ap.add_argument("--out", default=None)
    a = ap.parse_args()
    cfg = RunConfig(problem="heat", scheme=a.scheme, dt=a.t_final / a.steps[0], t_final=a.t_final, eps=a.eps, reference="dense")
    rows = converge(cfg, a.steps, a.out, write=a.out is not None)
    for r in rows:
        print(f"{r['N_step']:5d} {r['l2_error']:.3e} {r['k']}")
    print("orders", [round(k, 3) for k in estimated_orders([r["l2_error"] for r in rows])])


if __name__ == "__main__":
    main()
