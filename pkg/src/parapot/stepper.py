"""Linear multistep marching in integral form.

With H_i = G(i dt) * F_{n+1-i} (a Gauss transform of width 4 D i dt) the
update is

    u_{n+1} = G(dt) * u_n + dt * sum_{i>=1} b_i H_i + dt * b_0 F(u_{n+1}, x, t_{n+1}),

so the implicit part is a pointwise equation: the kernel at zero lag is a
delta function.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import fgt
from .adaptree import (
    AdaptiveTree,
    TreeField,
    build_adaptive,
    combine,
    common_tree,
    eval_field,
    field_gradient,
    spatial_adap,
)
from .helmholtz import helmholtz_decompose
from .problems import ProblemSpec, ns_nonlinear

log = logging.getLogger(__name__)

__all__ = [
    "MultistepScheme",
    "HistoryBuffer",
    "StepReport",
    "State",
    "StepFailure",
    "BootstrapRequired",
    "initial_potential",
    "history_term",
    "solve_pointwise_scalar",
    "solve_pointwise_system",
    "forcing_field",
    "initial_state",
    "advance",
    "bootstrap_richardson",
    "prime",
    "integrate",
]

_COEFFS = {
    ("implicit", 1): (1.0, 0.0),
    ("implicit", 2): (0.5, 0.5, 0.0),
    ("implicit", 4): (9 / 24, 19 / 24, -5 / 24, 1 / 24, 0.0),
    ("explicit", 1): (0.0, 1.0),
    ("explicit", 2): (0.0, 1.5, -0.5),
    ("explicit", 4): (0.0, 55 / 24, -59 / 24, 37 / 24, -9 / 24),
}


class StepFailure(RuntimeError):
    pass


class BootstrapRequired(RuntimeError):
    pass


@dataclass(frozen=True)
class MultistepScheme:
    """Adams-Moulton ("implicit"), Adams-Bashforth ("explicit") or AB/AM predictor-corrector ("pc")."""

    order: int
    kind: str = "implicit"
    predictor_order: int | None = None  # "pc" only; defaults to ``order``

    def __post_init__(self):
        if self.order not in (1, 2, 4):
            raise ValueError(f"order must be 1, 2 or 4, got {self.order}")
        if self.kind not in ("implicit", "explicit", "pc"):
            raise ValueError(f"unknown scheme kind {self.kind!r}")
        if self.predictor_order not in (None, 1, 2, 4):
            raise ValueError("predictor order must be 1, 2 or 4")

    @property
    def b(self) -> tuple[float, ...]:
        """b_0..b_s; for "pc" these are the corrector's."""
        return _COEFFS[("explicit" if self.kind == "explicit" else "implicit", self.order)]

    @property
    def b_predictor(self) -> tuple[float, ...]:
        return _COEFFS[("explicit", self.predictor_order or self.order)]

    @property
    def n_history(self) -> int:
        """How many past forcing fields a step reads."""
        if self.kind == "implicit":
            return self.order - 1
        if self.kind == "pc":
            return max(self.order - 1, self.predictor_order or self.order)
        return self.order

    @property
    def name(self) -> str:
        tag = {"implicit": "AM", "explicit": "AB", "pc": "PC"}[self.kind]
        return f"{tag}{self.order}"

    @classmethod
    def parse(cls, name: str) -> "MultistepScheme":
        kinds = {"AM": "implicit", "AB": "explicit", "PC": "pc"}
        try:
            return cls(int(name[2:]), kinds[name[:2].upper()])
        except (KeyError, ValueError):
            raise ValueError(f"cannot parse scheme {name!r} (expected AM1, AB2, PC4, ...)") from None


class HistoryBuffer:
    """The last ``capacity`` forcing fields, newest first: entry i-1 is F_{n+1-i}.

    ``entries`` are given oldest first.
    """

    def __init__(self, capacity: int, entries=()):
        self.capacity = capacity
        self._d: deque = deque(maxlen=max(capacity, 1))
        for e in entries:
            self._d.appendleft(e)

    def push(self, F: TreeField) -> None:
        if self._d and not F.t > self._d[0].t:
            raise ValueError("history must be pushed in increasing time")
        self._d.appendleft(F)

    def __len__(self) -> int:
        return len(self._d)

    def __getitem__(self, i: int) -> TreeField:
        return self._d[i]

    def check(self, needed: int, dt: float) -> None:
        if len(self._d) < needed:
            raise BootstrapRequired(f"scheme needs {needed} past forcing fields, have {len(self._d)}")
        for a, b in zip(list(self._d)[: needed - 1], list(self._d)[1:needed]):
            if abs((a.t - b.t) - dt) > 1e-9 * max(1.0, dt):
                raise ValueError("history is not contiguous in time")

    def copy(self, capacity: int | None = None) -> "HistoryBuffer":
        cap = self.capacity if capacity is None else capacity
        return HistoryBuffer(cap, list(self._d)[: max(cap, 1)][::-1])


@dataclass
class StepReport:
    step: int
    t: float
    n_leaf: int = 0
    n_pts: int = 0
    t_total: float = 0.0
    t_fgt: float = 0.0
    t_proj: float = 0.0
    t_nl: float = 0.0
    t_adapt: float = 0.0
    fgt_points: int = 0
    nl_iters_max: int = 0
    nl_iters_mean: float = 0.0
    n_unresolved: int = 0

    FIELDS = (
        "step", "t", "N_leaf", "N_pts", "t_total", "t_fgt", "t_proj", "t_nl", "t_adapt",
        "rate_total", "rate_fgt", "rate_proj", "rate_nl", "rate_adapt", "nl_iters_max", "nl_iters_mean",
    )

    def rate(self, dt: float) -> float:
        return self.n_pts / dt if dt > 0 else float("nan")

    def row(self) -> list:
        return [
            self.step, f"{self.t:.10g}", self.n_leaf, self.n_pts,
            f"{self.t_total:.4e}", f"{self.t_fgt:.4e}", f"{self.t_proj:.4e}", f"{self.t_nl:.4e}", f"{self.t_adapt:.4e}",
            f"{self.rate(self.t_total):.3e}", f"{self.rate(self.t_fgt):.3e}", f"{self.rate(self.t_proj):.3e}",
            f"{self.rate(self.t_nl):.3e}", f"{self.rate(self.t_adapt):.3e}",
            self.nl_iters_max, f"{self.nl_iters_mean:.2f}",
        ]

    def csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="").writerow(self.row())
        return buf.getvalue()


@dataclass
class State:
    u: TreeField
    t: float
    n: int
    history: HistoryBuffer
    dt: float


@dataclass
class Settings:
    """Numerical knobs shared by all steps."""

    eps: float = 1e-9
    K: int = 8
    L_max: int = 12
    max_iter: int = 50
    helmholtz_M: int | None = None
    helmholtz_backend: str = "uniform-spectral"
    metric: str = "extrap"  # leaf resolution estimate for gauss sums

    @property
    def eps_nl(self) -> float:
        return min(1e-12, self.eps / 10.0)


# ---------------------------------------------------------------------------
# Gauss transforms of the history


def _deltas(D, lag: float) -> list[float]:
    return [4.0 * d * lag for d in D]


def initial_potential(u_n: TreeField, D, dt: float, eps: float) -> TreeField:
    """G(dt) * u_n componentwise (width 4 D_i dt); D_i = 0 passes the component through."""
    return fgt.gauss_sum([(1.0, u_n, _deltas(D, dt))], eps)


def _pieces(u_n: TreeField, history: HistoryBuffer, count: int, D, dt: float, eps: float, stats: dict, metric: str = "extrap"):
    """[G(dt) u_n, G(dt) F_n, G(2dt) F_{n-1}, ...] up to ``count`` history terms."""
    t0 = time.perf_counter()
    out = [fgt.gauss_sum([(1.0, u_n, _deltas(D, dt))], eps, metric=metric, stats=stats)]
    for i in range(1, count + 1):
        out.append(fgt.gauss_sum([(1.0, history[i - 1], _deltas(D, i * dt))], eps, metric=metric, stats=stats))
    stats["t_fgt"] = stats.get("t_fgt", 0.0) + time.perf_counter() - t0
    return out


def _assemble(pieces: list[TreeField], b, dt: float, eps: float) -> TreeField:
    n = min(len(pieces), len(b))
    terms = [(1.0, pieces[0])] + [(dt * b[i], pieces[i]) for i in range(1, n) if b[i] != 0.0]
    g = combine(terms)
    return fgt.coarsen_field(g, eps * g.max_abs())


def history_term(u_n: TreeField, history: HistoryBuffer, scheme: MultistepScheme, dt: float, D, eps: float, stats=None) -> TreeField:
    """g = G(dt) * u_n + dt sum_{i>=1} b_i G(i dt) * F_{n+1-i} on a re-resolved union tree."""
    b = scheme.b
    s = len(b) - 1
    need = max(i for i in range(0, s + 1) if b[i] != 0.0 or i == 0)
    history.check(need, dt)
    terms = [(1.0, u_n, _deltas(D, dt))]
    for i in range(1, need + 1):
        if b[i] != 0.0:
            terms.append((dt * b[i], history[i - 1], _deltas(D, i * dt)))
    return fgt.gauss_sum(terms, eps, stats=stats)


# ---------------------------------------------------------------------------
# pointwise nonlinear solves


def solve_pointwise_scalar(g, F: Callable, dt: float, b0: float, u_prev, F_prev=None, tol: float = 1e-12, max_iter: int = 50):
    """Solve u - dt b0 F(u) = g pointwise by the secant method.

    Starting guesses are u_prev and g + dt b0 F_prev (F_prev defaults to
    F(u_prev)).  Returns (u, iterations per point).
    """
    g = np.asarray(g, float)
    if b0 == 0.0:
        return g.copy(), np.zeros(g.shape, int)
    c = dt * b0
    x0 = np.broadcast_to(np.asarray(u_prev, float), g.shape).copy()
    Fp = F(x0) if F_prev is None else np.asarray(F_prev, float)
    x1 = g + c * Fp
    r0 = x0 - c * F(x0) - g
    r1 = x1 - c * F(x1) - g
    iters = np.ones(g.shape, int)
    bound = 10.0 * max(1.0, float(np.max(np.abs(g))), float(np.max(np.abs(x0))))
    for _ in range(max_iter):
        done = np.abs(r1) <= np.maximum(tol, tol * np.abs(x1))
        if np.all(done):
            return x1, iters
        denom = r1 - r0
        safe = np.where(denom == 0.0, 1.0, denom)
        x2 = np.where(done | (denom == 0.0), x1, x1 - r1 * (x1 - x0) / safe)
        x2 = np.clip(x2, -bound, bound)
        x0, r0 = x1, r1
        x1 = x2
        r1 = np.where(done, r0, x1 - c * F(x1) - g)
        iters += ~done
    bad = np.abs(r1) > np.maximum(tol, tol * np.abs(x1))
    if np.any(bad):
        i = int(np.flatnonzero(bad.ravel())[0])
        raise StepFailure(f"secant iteration did not converge at {int(bad.sum())} points (first flat index {i}, residual {float(np.abs(r1).ravel()[i]):.2e})")
    return x1, iters


def solve_pointwise_system(g, F: Callable, J: Callable, dt: float, b0: float, u_prev, tol: float = 1e-12, max_iter: int = 50):
    """Newton for u - dt b0 F(u) = g with u of shape (p, ...). Returns (u, iterations)."""
    g = np.asarray(g, float)
    if b0 == 0.0:
        return g.copy(), 0
    c = dt * b0
    p = g.shape[0]
    u = np.broadcast_to(np.asarray(u_prev, float), g.shape).copy()
    eye = np.eye(p)
    for it in range(1, max_iter + 1):
        r = u - c * F(u) - g
        A = eye.reshape(p, p, *([1] * (g.ndim - 1))) - c * J(u)  # (p, p, ...)
        Am = np.moveaxis(A.reshape(p, p, -1), -1, 0)
        rm = np.moveaxis(r.reshape(p, -1), -1, 0)
        try:
            du = np.linalg.solve(Am, rm[..., None])[..., 0]
        except np.linalg.LinAlgError as e:
            raise StepFailure(f"singular Newton Jacobian: {e}") from None
        u = u - np.moveaxis(du, 0, -1).reshape(g.shape)
        res = np.max(np.abs(u - c * F(u) - g).reshape(p, -1), axis=0)
        scale = np.max(np.abs(u).reshape(p, -1), axis=0)
        if np.all(res <= np.maximum(tol, tol * scale)):
            return u, it
    i = int(np.argmax(res))
    raise StepFailure(f"Newton did not converge after {max_iter} iterations (worst residual {res[i]:.2e} at point {i})")


# ---------------------------------------------------------------------------
# forcing fields


def _project(F: TreeField, st: Settings, stats: dict) -> TreeField:
    t0 = time.perf_counter()
    out = helmholtz_decompose(F, st.eps, M=st.helmholtz_M, backend=st.helmholtz_backend).F_S
    stats["t_proj"] = stats.get("t_proj", 0.0) + time.perf_counter() - t0
    return out


def forcing_field(problem: ProblemSpec, u: TreeField, t: float, st: Settings, stats: dict | None = None) -> TreeField:
    """F(u, x, t) as a resolved tree field (solenoidal part for flow problems)."""
    stats = {} if stats is None else stats
    if problem.kind == "gradient":
        F = ns_nonlinear(u, problem.external, t)
    elif problem.kind == "linear":
        F = build_adaptive(lambda X, Y: problem.F(None, X, Y, t), st.eps, st.K, st.L_max, start=u.tree, t=t)
    else:
        def f(X, Y):
            return problem.F(eval_field(u, X, Y), X, Y, t)

        F = build_adaptive(f, st.eps, st.K, st.L_max, start=u.tree, t=t)
    F.t = t
    if problem.project:
        F = _project(F, st, stats)
    F.t = t
    return F


def initial_state(problem: ProblemSpec, dt: float, st: Settings, t0: float = 0.0, capacity: int = 4) -> State:
    u0 = build_adaptive(problem.u0, st.eps, st.K, st.L_max, t=t0)
    hist = HistoryBuffer(capacity)
    hist.push(forcing_field(problem, u0, t0, st))
    return State(u0, t0, 0, hist, dt)


# ---------------------------------------------------------------------------
# one step


def _sampler(field: TreeField):
    def ev(X, Y):
        return np.moveaxis(eval_field(field, X, Y), 0, 1)

    return ev


def _grad_sampler(field: TreeField):
    gx, gy = field_gradient(field)
    fx, fy, fu = _sampler(gx), _sampler(gy), _sampler(field)

    def ev(X, Y):
        return fu(X, Y), fx(X, Y), fy(X, Y)

    return ev


def _adapt(start: AdaptiveTree, provider, st: Settings, t: float, stats: dict):
    t0 = time.perf_counter()
    nl0 = stats.get("t_nl", 0.0)
    res = spatial_adap(start, provider, st.eps, st.K, test_u=True, L_max=st.L_max, t=t)
    stats["t_adapt"] = stats.get("t_adapt", 0.0) + (time.perf_counter() - t0) - (stats.get("t_nl", 0.0) - nl0)
    stats["unresolved"] = len(res.unresolved)
    return res


def advance(state: State, scheme: MultistepScheme, problem: ProblemSpec, st: Settings) -> tuple[State, StepReport]:
    """One step of ``scheme``; returns the new state and its timing report."""
    T0 = time.perf_counter()
    dt = state.dt
    t1 = state.t + dt
    D = problem.D
    hist = state.history
    stats: dict = {"nl_iters": []}
    if problem.kind == "gradient" and scheme.kind == "implicit" and scheme.b[0] != 0.0:
        raise ValueError("gradient-coupled forcing needs an explicit or predictor-corrector scheme")
    hist.check(scheme.n_history, dt)
    pieces = _pieces(state.u, hist, scheme.n_history, D, dt, st.eps, stats, st.metric)
    b = scheme.b
    if scheme.kind == "pc":
        g_pred = _assemble(pieces, scheme.b_predictor, dt, st.eps)
        g = _assemble(pieces, b, dt, st.eps)
    else:
        g = _assemble(pieces, b, dt, st.eps)
    b0 = b[0] if scheme.kind != "explicit" else 0.0
    start = common_tree(state.u, g)
    u_n = state.u

    if problem.kind == "gradient":
        if scheme.kind == "pc":
            Fp = _project(ns_nonlinear(g_pred, problem.external, t1), st, stats)
            target = combine([(1.0, g), (dt * b0, Fp)])
        else:
            target = g
        gs = _grad_sampler(target)

        def provider(X, Y):
            u, ux, uy = gs(X, Y)
            F = -(u[:, 0:1] * ux + u[:, 1:2] * uy)
            if problem.external is not None:
                F = F + np.moveaxis(np.asarray(problem.external(X, Y, t1)), 0, 1)
            return u, F

        res = _adapt(common_tree(u_n, target), provider, st, t1, stats)
        u_new = res.u
        F_new = TreeField(res.F.tree, res.F.vals, t1)
        F_new = _project(F_new, st, stats)
    elif problem.project:
        # linear flow forcing: solenoidal part of f(t1) as a field
        F_field = forcing_field(problem, g, t1, st, stats)
        target = combine([(1.0, g), (dt * b0, F_field)]) if b0 else g
        su, sF = _sampler(target), _sampler(F_field)
        res = _adapt(common_tree(u_n, target), lambda X, Y: (su(X, Y), sF(X, Y)), st, t1, stats)
        u_new = res.u
        F_new = TreeField(res.F.tree, res.F.vals, t1)
    else:
        sg = _sampler(g)
        su_n = _sampler(u_n)
        sp = _sampler(g_pred) if scheme.kind == "pc" else None

        def provider(X, Y):
            gv = sg(X, Y)  # (n, p, K, K)
            if problem.kind == "linear":
                F = np.moveaxis(problem.F(None, X, Y, t1), 0, 1)
                return gv + dt * b0 * F, F
            if scheme.kind == "explicit" or b0 == 0.0:
                uv = gv
            elif scheme.kind == "pc":
                up = sp(X, Y)
                uv = gv + dt * b0 * np.moveaxis(problem.F(np.moveaxis(up, 1, 0), X, Y, t1), 0, 1)
            else:
                tn = time.perf_counter()
                uv = _implicit_solve(problem, gv, su_n(X, Y), X, Y, state.t, t1, dt * b0, st, stats)
                stats["t_nl"] = stats.get("t_nl", 0.0) + time.perf_counter() - tn
            F = np.moveaxis(problem.F(np.moveaxis(uv, 1, 0), X, Y, t1), 0, 1)
            return uv, F

        res = _adapt(start, provider, st, t1, stats)
        u_new = res.u
        F_new = TreeField(res.F.tree, res.F.vals, t1)
    u_new.t = t1
    new_hist = hist.copy(max(hist.capacity, scheme.order))
    new_hist.push(F_new)
    total = time.perf_counter() - T0
    its = stats["nl_iters"]
    rep = StepReport(
        step=state.n + 1,
        t=t1,
        n_leaf=len(u_new.tree),
        n_pts=u_new.n_points(),
        t_total=total,
        t_fgt=stats.get("t_fgt", 0.0),
        t_proj=stats.get("t_proj", 0.0),
        t_nl=stats.get("t_nl", 0.0),
        t_adapt=stats.get("t_adapt", 0.0),
        fgt_points=stats.get("points", 0),
        nl_iters_max=int(max(its)) if its else 0,
        nl_iters_mean=float(np.mean(its)) if its else 0.0,
        n_unresolved=stats.get("unresolved", 0),
    )
    return State(u_new, t1, state.n + 1, new_hist, dt), rep


def _implicit_solve(problem, gv, unv, X, Y, t_n, t1, c, st, stats):
    """u - c F(u, x, t1) = g at the nodes; arrays are (n, p, K, K)."""
    g = np.moveaxis(gv, 1, 0)
    u0 = np.moveaxis(unv, 1, 0)

    def F(u):
        return problem.F(u, X, Y, t1)

    if problem.p == 1:
        Fprev = problem.F(u0, X, Y, t_n)[0]
        u, its = solve_pointwise_scalar(g[0], lambda v: F(v[None])[0], 1.0, c, u0[0], Fprev, st.eps_nl, st.max_iter)
        stats["nl_iters"].append(int(its.max()))
        return u[:, None]
    u, its = solve_pointwise_system(g, F, lambda v: problem.jacobian(v, X, Y, t1), 1.0, c, u0, st.eps_nl, st.max_iter)
    stats["nl_iters"].append(its)
    return np.moveaxis(u, 0, 1)


# ---------------------------------------------------------------------------
# starting values


def _starter(problem: ProblemSpec) -> MultistepScheme:
    if problem.kind == "gradient":
        return MultistepScheme(2, "pc", predictor_order=1)
    return MultistepScheme(2, "implicit")


RICHARDSON = {1: 1.0 / 21.0, 2: -4.0 / 7.0, 4: 32.0 / 21.0}


def bootstrap_richardson(state: State, scheme: MultistepScheme, problem: ProblemSpec, st: Settings, reports=None) -> State:
    """Advance to step s-1 with the self-starting order-2 scheme plus Richardson extrapolation.

    Each interval is covered with 1, 2 and 4 substeps; the weights
    (1/21, -4/7, 32/21) cancel the h^2 and h^3 error terms.  Forcing history is
    rebuilt from the extrapolated states.
    """
    starter = _starter(problem)
    dt = state.dt
    cur = state
    cap = max(scheme.order, 1)
    for _ in range(scheme.order - 1):
        results = {}
        for m in (1, 2, 4):
            sub = State(cur.u, cur.t, cur.n, HistoryBuffer(1, [cur.history[0]]), dt / m)
            for _k in range(m):
                sub, rep = advance(sub, starter, problem, st)
            results[m] = sub.u
        u = combine([(RICHARDSON[m], results[m]) for m in (1, 2, 4)])
        u = fgt.coarsen_field(u, st.eps * u.max_abs())
        t1 = cur.t + dt
        u.t = t1
        F = forcing_field(problem, u, t1, st)
        hist = cur.history.copy(cap)
        hist.push(F)
        cur = State(u, t1, cur.n + 1, hist, dt)
        if reports is not None:
            reports.append(StepReport(step=cur.n, t=t1, n_leaf=len(u.tree), n_pts=u.n_points()))
    return cur


def prime(state: State, scheme: MultistepScheme, problem: ProblemSpec, st: Settings, reports=None) -> State:
    """Produce enough history for ``scheme`` to take its first regular step."""
    if len(state.history) >= scheme.n_history:
        return state
    if scheme.order > 2:
        return bootstrap_richardson(state, scheme, problem, st, reports)
    cur = state
    starter = _starter(problem)
    while len(cur.history) < scheme.n_history:
        cur, rep = advance(cur, starter, problem, st)
        if reports is not None:
            reports.append(rep)
    return cur


def integrate(
    problem: ProblemSpec,
    scheme: MultistepScheme,
    dt: float,
    n_steps: int,
    st: Settings,
    t0: float = 0.0,
    callback: Callable | None = None,
) -> tuple[State, list[StepReport]]:
    """Run ``n_steps`` steps from the problem's initial data."""
    start = scheme.order - 1 if scheme.order > 2 else scheme.n_history - 1
    if n_steps < start:
        raise ValueError(f"{scheme.name} needs at least {start} steps to start, got {n_steps}")
    state = initial_state(problem, dt, st, t0, capacity=scheme.order)
    reports: list[StepReport] = []
    if callback is not None:
        callback(state, None)
    if len(state.history) < scheme.n_history:
        before = len(reports)
        state = prime(state, scheme, problem, st, reports)
        if callback is not None:
            for rep in reports[before:]:
                callback(state, rep)
    while state.n < n_steps:
        state, rep = advance(state, scheme, problem, st)
        reports.append(rep)
        if callback is not None:
            callback(state, rep)
    return state, reports
