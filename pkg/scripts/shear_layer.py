"""Double shear layer: a vorticity snapshot series and an optional step-halving table.

    python scripts/shear_layer.py --out runs/shear
    python scripts/shear_layer.py --converge 10 20 40 80
"""
import argparse

from parapot.cli import RunConfig, converge, run


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--orientation", default="classical", choices=["classical", "x-switched", "smooth"])
    ap.add_argument("--eps", type=float, default=1e-8)
    ap.add_argument("--t-final", type=float, default=0.4)
    ap.add_argument("--steps", type=int, default=40)
    ap.add_argument("--converge", type=int, nargs="*")
    ap.add_argument("--out", default="runs/shear")
    a = ap.parse_args()
    cfg = RunConfig(
        problem="shear-layer", scheme="PC4", params={"orientation": a.orientation},
        dt=a.t_final / a.steps, t_final=a.t_final, eps=a.eps, snapshot_every=max(1, a.steps // 4),
    )
    if a.converge:
        cfg = cfg.replace(dt=a.t_final / a.converge[0], reference="finest", snapshot_every=0)
        for r in converge(cfg, a.converge, a.out):
            print(r)
    else:
        res = run(cfg, a.out)
        print(res.summary)


if __name__ == "__main__":
    main()
