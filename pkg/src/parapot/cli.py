"""Command-line driver: ``parapot run | converge | profile | inspect``.

Runs are described by an INI file with a ``[run]`` section (keys are the
fields of :class:`RunConfig`) and an optional ``[params]`` section passed to
the problem factory::

    [run]
    problem = heat
    scheme = AM2
    dt = 0.001
    t_final = 0.01
    eps = 1e-9
    snapshots = 0.001, 0.005, 0.01

    [params]
    delta = 0.0025

Exit codes: 0 success, 2 configuration error, 3 solver failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import json
import logging
import math
import os
import sys
import time
import traceback
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import helmholtz, treeio
from .adaptree import TreeField, eval_field
from .fgt import PlanError
from .oracles import duhamel_dense, uniform_points
from .problems import PROBLEMS, ProblemSpec, make_problem, vorticity
from .stepper import BootstrapRequired, MultistepScheme, Settings, StepFailure, StepReport, integrate

log = logging.getLogger("parapot")

ENV_OUT = "PARAPOT_OUT_DIR"
ENV_WORKERS = "PARAPOT_WORKERS"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    problem: str = "heat"
    params: dict = field(default_factory=dict)
    scheme: str = "AM2"
    dt: float = 1e-3
    t_final: float = 0.01
    eps: float = 1e-9
    K: int = 8
    L_max: int = 12
    helmholtz_backend: str = "uniform-spectral"
    helmholtz_grid: int = 0  # 0: chosen from the tree depth
    adapt_metric: str = "extrap"
    out_dir: str = "out"
    snapshots: list = field(default_factory=list)  # times
    snapshot_every: int = 0  # steps; 0 disables
    export_grid: int = 256
    error_grid: int = 128
    reference: str = "auto"  # auto | exact | dense | finest | successive
    profile: bool = False
    seed: int = 0
    workers: int = 0  # 0: library default

    def __post_init__(self):
        self.validate()

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.t_final / self.dt)))

    def validate(self) -> None:
        if self.problem not in PROBLEMS:
            raise ConfigError(f"unknown problem {self.problem!r}; choose from {sorted(PROBLEMS)}")
        try:
            sch = MultistepScheme.parse(self.scheme)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if not (self.dt > 0 and self.t_final > 0):
            raise ConfigError("dt and t_final must be positive")
        if abs(self.n_steps * self.dt - self.t_final) > 1e-9 * self.t_final:
            raise ConfigError(f"t_final={self.t_final} is not a whole number of steps of dt={self.dt}")
        if not (1e-12 <= self.eps <= 1e-3):
            raise ConfigError("eps must lie in [1e-12, 1e-3]")
        if self.K < 2 or self.L_max < 1:
            raise ConfigError("K >= 2 and L_max >= 1 required")
        if self.helmholtz_backend != "uniform-spectral":
            raise ConfigError(f"helmholtz_backend {self.helmholtz_backend!r} is not available (use uniform-spectral)")
        if self.adapt_metric not in ("extrap", "shell", "tail", "l2"):
            raise ConfigError(f"unknown adapt_metric {self.adapt_metric!r}")
        if self.reference not in ("auto", "exact", "dense", "finest", "successive"):
            raise ConfigError(f"unknown reference {self.reference!r}")
        try:
            prob = make_problem(self.problem, **self.params)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad problem parameters: {e}") from None
        if prob.kind == "gradient" and sch.kind == "implicit":
            raise ConfigError("gradient-coupled problems need an AB or PC scheme")

    def settings(self) -> Settings:
        return Settings(
            eps=self.eps,
            K=self.K,
            L_max=self.L_max,
            helmholtz_M=self.helmholtz_grid or None,
            helmholtz_backend=self.helmholtz_backend,
            metric=self.adapt_metric,
        )

    def make_problem(self) -> ProblemSpec:
        return make_problem(self.problem, **self.params)

    # -- text form -----------------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["run"] = {f.name: _emit(getattr(self, f.name)) for f in fields(self) if f.name != "params"}
        if self.params:
            cp["params"] = {k: _emit(v) for k, v in self.params.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"cannot parse config: {e}") from None
        extra = set(cp.sections()) - {"run", "params"}
        if extra:
            raise ConfigError(f"unknown section(s): {sorted(extra)}")
        kw = dict(cp["run"]) if cp.has_section("run") else {}
        params = {k: _guess(v) for k, v in cp["params"].items()} if cp.has_section("params") else {}
        return cls.from_dict(kw, params)

    @classmethod
    def from_dict(cls, kw: dict, params: dict | None = None) -> "RunConfig":
        types = {f.name: f for f in fields(cls)}
        out = {}
        for k, v in kw.items():
            if k not in types or k == "params":
                raise ConfigError(f"unknown config key {k!r}")
            out[k] = _coerce(k, types[k], v)
        if params is not None:
            out["params"] = dict(params)
        return cls(**out)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _emit(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ", ".join(_emit(x) for x in v)
    return str(v)


def _guess(s: str):
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def _coerce(name: str, f: dataclasses.Field, v):
    if not isinstance(v, str):
        return v
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if kind == "bool":
            low = v.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(v)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(v)
        if kind == "float":
            return float(v)
        if kind == "list":
            return [float(x) for x in v.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"bad value for {name}: {v!r}") from None
    return v


def load_config(path: str | os.PathLike) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return RunConfig.from_ini(text)


# ---------------------------------------------------------------------------
# export helpers


def uniform_csv(field: TreeField, path, M: int = 256, flow: bool = False) -> None:
    """Resample a field to an M x M grid and write x, y, components (and omega)."""
    X, Y = uniform_points(M)
    vals = eval_field(field, X, Y)
    cols = [X.ravel(), Y.ravel()] + [v.ravel() for v in vals]
    names = ["x", "y"] + (["u", "v"] if flow and field.p == 2 else [f"u{i}" for i in range(field.p)])
    if flow and field.p == 2:
        cols.append(eval_field(vorticity(field), X, Y)[0].ravel())
        names.append("omega")
    data = np.column_stack(cols)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(names) + "\n")
        np.savetxt(fh, data, delimiter=",", fmt="%.17g")


def l2_error(a: np.ndarray, b: np.ndarray) -> float:
    """Discrete L2 norm of a - b over a uniform grid, summed over components."""
    d = np.asarray(a) - np.asarray(b)
    return float(np.sqrt(np.mean(np.sum(d.reshape(d.shape[0], -1) ** 2, axis=0))))


def estimated_orders(errors: Sequence[float]) -> list[float]:
    """k_i = log2(e_i / e_{i+1}) for successive step-count doublings."""
    e = list(errors)
    return [math.log2(e[i] / e[i + 1]) if e[i] > 0 and e[i + 1] > 0 else float("nan") for i in range(len(e) - 1)]


def _reference_values(cfg: RunConfig, prob: ProblemSpec, M: int):
    """Reference solution on the M x M error grid at t_final, or None."""
    mode = cfg.reference
    if mode in ("finest", "successive"):
        return None, mode
    X, Y = uniform_points(M)
    if mode in ("auto", "exact") and prob.exact is not None:
        return np.asarray(prob.exact(X, Y, cfg.t_final)), "exact"
    if mode == "exact":
        raise ConfigError(f"problem {prob.name!r} has no exact solution")
    dense_ok = prob.kind == "linear" and not prob.project and prob.p == 1
    if mode in ("auto", "dense") and dense_ok:
        ref = duhamel_dense(
            lambda x, y, t: prob.forcing(x, y, t)[0],
            lambda x, y: prob.u0(x, y)[0],
            prob.D[0],
            cfg.t_final,
            M=M,
        )
        return ref.vals, "dense"
    if mode == "dense":
        raise ConfigError("dense reference needs a scalar linear problem")
    return None, "finest"


# ---------------------------------------------------------------------------
# subcommands


@dataclass
class RunResult:
    state: object
    reports: list
    summary: dict


def _apply_env(cfg: RunConfig) -> RunConfig:
    if os.environ.get(ENV_OUT):
        cfg = cfg.replace(out_dir=os.environ[ENV_OUT])
    if os.environ.get(ENV_WORKERS):
        try:
            cfg = cfg.replace(workers=int(os.environ[ENV_WORKERS]))
        except ValueError:
            raise ConfigError(f"{ENV_WORKERS} must be an integer") from None
    if cfg.workers > 0:
        helmholtz.NTHREADS = cfg.workers
    return cfg


def run(cfg: RunConfig, out_dir: str | os.PathLike | None = None, write: bool = True) -> RunResult:
    """March ``cfg`` to t_final, writing snapshots, step reports and a summary."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    prob = cfg.make_problem()
    st = cfg.settings()
    scheme = MultistepScheme.parse(cfg.scheme)
    np.random.seed(cfg.seed)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(cfg.to_ini())
    want = sorted(cfg.snapshots)
    taken: set[int] = set()
    step_rows: list[StepReport] = []

    def snap(state, idx: int):
        stem = out / f"snap_{idx:04d}"
        treeio.write(stem.with_suffix(".ppt"), state.u, cfg.eps)
        uniform_csv(state.u, stem.with_suffix(".csv"), cfg.export_grid, prob.is_flow)

    def callback(state, rep):
        if rep is not None:
            step_rows.append(rep)
            if cfg.profile:
                log.info("step %d t=%.6g leaves=%d %.2fs", rep.step, rep.t, rep.n_leaf, rep.t_total)
        if not write or state.n in taken:
            return
        hit = cfg.snapshot_every and state.n % cfg.snapshot_every == 0
        hit = hit or any(abs(state.t - t) <= 0.5 * cfg.dt for t in want)
        if hit:
            taken.add(state.n)
            snap(state, state.n)

    t0 = time.perf_counter()
    summary: dict = {"problem": prob.name, "scheme": scheme.name, "dt": cfg.dt, "n_steps": cfg.n_steps}
    try:
        state, reports = integrate(prob, scheme, cfg.dt, cfg.n_steps, st, callback=callback)
    except (StepFailure, PlanError, BootstrapRequired, FloatingPointError, np.linalg.LinAlgError) as e:
        summary.update(status="failed", error=f"{type(e).__name__}: {e}", steps_done=len(step_rows))
        if write:
            _write_reports(out / "steps.csv", step_rows)
            (out / "failure.json").write_text(json.dumps({**summary, "traceback": traceback.format_exc()}, indent=2))
        raise
    summary.update(
        status="ok",
        t=state.t,
        wall=time.perf_counter() - t0,
        n_leaf=len(state.u.tree),
        n_pts=state.u.n_points(),
        depth=state.u.tree.depth,
    )
    if prob.exact is not None:
        M = cfg.error_grid
        X, Y = uniform_points(M)
        ex = np.asarray(prob.exact(X, Y, state.t))
        got = eval_field(state.u, X, Y)
        summary["l2_error"] = l2_error(got, ex)
        summary["max_error"] = float(np.max(np.abs(got - ex)))
    if write:
        _write_reports(out / "steps.csv", step_rows)
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return RunResult(state, step_rows, summary)


def _write_reports(path: Path, rows: list[StepReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(StepReport.FIELDS)
        for r in rows:
            w.writerow(r.row())


def converge(cfg: RunConfig, steps: Sequence[int], out_dir=None, write: bool = True) -> list[dict]:
    """Error table over step counts against the exact, dense or finest solution, or successive runs."""
    steps = sorted(int(n) for n in steps)
    if len(steps) < 3:
        raise ConfigError("converge needs at least 3 step counts")
    prob = cfg.make_problem()
    M = cfg.error_grid
    X, Y = uniform_points(M)
    ref, kind = _reference_values(cfg, prob, M)
    sols = {}
    for n in steps:
        sub = cfg.replace(dt=cfg.t_final / n, snapshots=[], snapshot_every=0)
        res = run(sub, write=False)
        sols[n] = eval_field(res.state.u, X, Y)
        log.info("N=%d done (%d leaves)", n, len(res.state.u.tree))
    if kind == "successive":
        # row i: distance to the next finer run; the ratio of these has the
        # same limit as the true error ratio but no bias from a fixed reference
        rows_n = steps[:-1]
        errs = [l2_error(sols[a], sols[b]) for a, b in zip(steps[:-1], steps[1:])]
    else:
        if ref is None:
            ref = sols[steps[-1]]
            rows_n = steps[:-1]
        else:
            rows_n = steps
        errs = [l2_error(sols[n], ref) for n in rows_n]
    ks = estimated_orders(errs) + [float("nan")]
    table = [{"N_step": n, "l2_error": e, "k": k, "reference": kind} for n, e, k in zip(rows_n, errs, ks)]
    if write:
        out = Path(out_dir if out_dir is not None else cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "converge.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["N_step", "l2_error", "k", "reference"])
            w.writeheader()
            w.writerows(table)
    return table


PROFILE_COLUMNS = ("N_step", "N_leaf", "N_pts", "rate_total", "rate_fgt", "rate_proj", "rate_nl", "rate_adapt")


def profile(cfg: RunConfig, steps: Sequence[int] | None = None, out_dir=None, write: bool = True) -> list[dict]:
    """Points per second by phase, averaged over the regular (non-startup) steps."""
    steps = [cfg.n_steps] if not steps else [int(n) for n in steps]
    table = []
    for n in steps:
        sub = cfg.replace(dt=cfg.t_final / n, snapshots=[], snapshot_every=0, profile=True)
        res = run(sub, write=False)
        reps = [r for r in res.reports if r.t_total > 0] or res.reports
        pts = sum(r.n_pts for r in reps)

        def rate(attr):
            tt = sum(getattr(r, attr) for r in reps)
            return pts / tt if tt > 0 else float("nan")

        table.append(
            {
                "N_step": n,
                "N_leaf": float(np.mean([r.n_leaf for r in reps])),
                "N_pts": float(np.mean([r.n_pts for r in reps])),
                "rate_total": rate("t_total"),
                "rate_fgt": rate("t_fgt"),
                "rate_proj": rate("t_proj"),
                "rate_nl": rate("t_nl"),
                "rate_adapt": rate("t_adapt"),
            }
        )
    if write:
        out = Path(out_dir if out_dir is not None else cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "profile.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=PROFILE_COLUMNS)
            w.writeheader()
            w.writerows(table)
    return table


def inspect(path, out=None, M: int = 0) -> str:
    """Dump a snapshot as CSV: leaf table by default, uniform samples when M > 0."""
    fld, eps = treeio.read(path)
    buf = io.StringIO()
    if M > 0:
        X, Y = uniform_points(M)
        vals = eval_field(fld, X, Y)
        buf.write(",".join(["x", "y"] + [f"u{i}" for i in range(fld.p)]) + "\n")
        np.savetxt(buf, np.column_stack([X.ravel(), Y.ravel()] + [v.ravel() for v in vals]), delimiter=",", fmt="%.17g")
    else:
        tree = fld.tree
        cx, cy = tree.centers
        err = fld.resolution_errors()
        buf.write("level,i,j,cx,cy,side," + ",".join(f"max_u{c}" for c in range(fld.p)) + ",resolution\n")
        mx = np.max(np.abs(fld.vals), axis=(2, 3))
        for n, (l, i, j) in enumerate(tree.keys):
            vals = ",".join(f"{v:.6e}" for v in mx[n])
            buf.write(f"{l},{i},{j},{cx[n]:.10g},{cy[n]:.10g},{tree.side[n]:.10g},{vals},{err[n]:.3e}\n")
    text = buf.getvalue()
    if out:
        Path(out).write_text(text)
    return text


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", nargs="?", help="INI run configuration")
    for f in fields(RunConfig):
        if f.name == "params":
            continue
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar=f.name.upper())
    p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE", help="problem parameter")


def _config_from_args(a) -> RunConfig:
    cfg = load_config(a.config) if a.config else RunConfig()
    over = {f.name: getattr(a, f.name) for f in fields(RunConfig) if f.name != "params" and getattr(a, f.name, None) is not None}
    params = dict(cfg.params)
    for item in a.param:
        if "=" not in item:
            raise ConfigError(f"--param expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        params[k.strip()] = _guess(v.strip())
    base = {f.name: getattr(cfg, f.name) for f in fields(RunConfig) if f.name != "params"}
    base.update(over)
    return RunConfig.from_dict(base, params)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="parapot", description="Adaptive heat-kernel time stepping on the periodic unit square.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("run", help="march a configuration to t_final")
    _add_config_flags(p)
    p = sub.add_parser("converge", help="error table over step counts")
    _add_config_flags(p)
    p.add_argument("--steps", type=int, nargs="+", required=True)
    p = sub.add_parser("profile", help="per-phase throughput")
    _add_config_flags(p)
    p.add_argument("--steps", type=int, nargs="*", default=None)
    p = sub.add_parser("inspect", help="dump a snapshot file as CSV")
    p.add_argument("snapshot")
    p.add_argument("-o", "--output", default=None)
    p.add_argument("--grid", type=int, default=0, help="uniform resample size (0: one row per leaf)")
    return ap


def _print_table(rows: list[dict], cols: Sequence[str]) -> None:
    print("  ".join(f"{c:>12}" for c in cols))
    for r in rows:
        cells = []
        for c in cols:
            v = r[c]
            cells.append(f"{v:>12.3e}" if isinstance(v, float) and c != "k" else (f"{v:>12.2f}" if c == "k" else f"{v!s:>12}"))
        print("  ".join(cells))


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
    try:
        if a.cmd == "inspect":
            text = inspect(a.snapshot, a.output, a.grid)
            if not a.output:
                sys.stdout.write(text)
            return EXIT_OK
        cfg = _apply_env(_config_from_args(a))
        if a.cmd == "run":
            res = run(cfg)
            print(json.dumps(res.summary, indent=2))
        elif a.cmd == "converge":
            _print_table(converge(cfg, a.steps), ["N_step", "l2_error", "k"])
        elif a.cmd == "profile":
            _print_table(profile(cfg, a.steps), PROFILE_COLUMNS)
    except (ConfigError, treeio.FormatError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (StepFailure, PlanError, BootstrapRequired, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"solver failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
