"""Problem definitions: forced heat, Gray-Scott, unsteady Stokes, Navier-Stokes.

Pointwise evaluators take coordinate arrays of any (matching) shape and return
arrays with a leading component axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .adaptree import TreeField, field_gradient, sample_function

__all__ = [
    "ProblemSpec",
    "periodic_gaussian",
    "heat_forcing",
    "gray_scott_rhs",
    "gray_scott_jacobian",
    "gray_scott_ic",
    "stokes_manufactured",
    "stokes_manufactured_forcing",
    "stokes_vortex_field",
    "stokes_vortex_forcing",
    "taylor_green",
    "shear_layer_ic",
    "ns_nonlinear",
    "vorticity",
    "make_problem",
    "PROBLEMS",
]

TWO_PI = 2.0 * math.pi


@dataclass
class ProblemSpec:
    """A PDE u_t = D Lap u + F on the unit torus.

    ``kind`` is "linear" (F(x, y, t)), "semilinear" (F(u, x, y, t) with an
    analytic ``jacobian``) or "gradient" (F built from the whole velocity field,
    Navier-Stokes).  With ``project`` the forcing is replaced by its
    solenoidal part before use.
    """

    name: str
    p: int
    D: tuple[float, ...]
    kind: str
    u0: Callable
    forcing: Callable | None = None
    jacobian: Callable | None = None
    project: bool = False
    exact: Callable | None = None
    external: Callable | None = None  # body force for kind="gradient"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("linear", "semilinear", "gradient"):
            raise ValueError(f"unknown forcing kind {self.kind!r}")
        if len(self.D) != self.p:
            raise ValueError("need one diffusion constant per component")
        if self.kind == "semilinear" and self.jacobian is None:
            raise ValueError("semilinear problems need an analytic Jacobian")

    @property
    def is_flow(self) -> bool:
        return self.project or self.kind == "gradient"

    def F(self, u, x, y, t) -> np.ndarray:
        """Pointwise forcing (linear and semilinear kinds)."""
        if self.kind == "linear":
            return _as_comp(self.forcing(x, y, t), self.p)
        if self.kind == "semilinear":
            return _as_comp(self.forcing(u, x, y, t), self.p)
        raise TypeError("gradient-coupled forcing is not pointwise")


def _as_comp(v, p: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if p == 1 and (v.ndim == 0 or v.shape[0] != 1):
        v = v[None]
    return v


# ---------------------------------------------------------------------------
# periodized Gaussians


def _wrap(d):
    return np.mod(d + 0.5, 1.0) - 0.5


def periodic_gaussian(x, y, cx, cy, delta: float, images: int | None = None) -> np.ndarray:
    """sum_j exp(-|x - c - j|^2 / delta) over the 2D integer lattice."""
    dx = _wrap(np.asarray(x, float) - cx)
    dy = _wrap(np.asarray(y, float) - cy)
    J = images if images is not None else int(math.ceil(0.5 + math.sqrt(37.0 * delta)))
    gx = sum(np.exp(-((dx - j) ** 2) / delta) for j in range(-J, J + 1))
    gy = sum(np.exp(-((dy - j) ** 2) / delta) for j in range(-J, J + 1))
    return gx * gy


def heat_centers(t: float):
    c1 = (0.25 * math.cos(20 * math.pi * t), 0.25 * math.sin(20 * math.pi * t))
    c2 = (0.25 * math.cos(40 * math.pi * t + math.pi), 0.25 * math.sin(40 * math.pi * t + math.pi))
    return c1, c2


def heat_forcing(x, y, t: float, delta: float = 2.5e-3, images: int | None = None) -> np.ndarray:
    c1, c2 = heat_centers(t)
    return periodic_gaussian(x, y, *c1, delta, images) - 0.5 * periodic_gaussian(x, y, *c2, delta, images)


# ---------------------------------------------------------------------------
# Gray-Scott


def gray_scott_rhs(u, v, gamma: float = 0.04, kappa: float = 0.1):
    uv2 = u * v * v
    return -uv2 + gamma * (1.0 - u), uv2 - (gamma + kappa) * v


def gray_scott_jacobian(u, v, gamma: float = 0.04, kappa: float = 0.1) -> np.ndarray:
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    return np.array([[-v * v - gamma, -2.0 * u * v], [v * v, 2.0 * u * v - (gamma + kappa)]])


def gray_scott_ic(x, y) -> np.ndarray:
    u = 1.0 - np.exp(-80.0 * ((x + 0.05) ** 2 + (y + 0.02) ** 2))
    v = np.exp(-80.0 * ((x - 0.05) ** 2 + (y - 0.02) ** 2))
    return np.array([u, v])


# ---------------------------------------------------------------------------
# unsteady Stokes


def stokes_manufactured(x, y, t: float) -> np.ndarray:
    """Exact (u, v, p)."""
    sx, sy = np.sin(TWO_PI * x), np.sin(TWO_PI * y)
    cx, cy = np.cos(TWO_PI * x), np.cos(TWO_PI * y)
    E = np.exp(sx + sy)
    S = math.sin(t) ** 2
    return np.array([math.pi * E * cy * S, -math.pi * E * cx * S, np.exp(cx * sy) * S])


def stokes_manufactured_forcing(x, y, t: float, nu: float = 1.0) -> np.ndarray:
    """F = u_t - nu Lap u + grad p for the manufactured solution."""
    sx, sy = np.sin(TWO_PI * x), np.sin(TWO_PI * y)
    cx, cy = np.cos(TWO_PI * x), np.cos(TWO_PI * y)
    E = np.exp(sx + sy)
    S = math.sin(t) ** 2
    S_t = math.sin(2.0 * t)
    pi = math.pi
    lap_u = 4 * pi**3 * S * E * cy * (cx * cx - sx + cy * cy - 3 * sy - 1)
    lap_v = -4 * pi**3 * S * E * cx * (cy * cy - sy + cx * cx - 3 * sx - 1)
    ep = np.exp(cx * sy)
    px = -TWO_PI * sx * sy * ep * S
    py = TWO_PI * cx * cy * ep * S
    fu = pi * E * cy * S_t - nu * lap_u + px
    fv = -pi * E * cx * S_t - nu * lap_v + py
    return np.array([fu, fv])


def _vortex_center(t: float):
    return 0.25 * math.sin(20 * math.pi * t), 0.25 * math.cos(20 * math.pi * t)


def stokes_vortex_field(x, y, t: float, delta: float = 2.5e-3) -> np.ndarray:
    """Rotating Gaussian vortex: stream function -exp(-r^2/delta), periodized on the full lattice."""
    xc, yc = _vortex_center(t)
    dx = _wrap(np.asarray(x, float) - xc)
    dy = _wrap(np.asarray(y, float) - yc)
    J = int(math.ceil(0.5 + math.sqrt(37.0 * delta)))
    u = np.zeros(np.broadcast(dx, dy).shape)
    v = np.zeros_like(u)
    for i in range(-J, J + 1):
        for j in range(-J, J + 1):
            ex, ey = dx - i, dy - j
            e = np.exp(-(ex * ex + ey * ey) / delta)
            u += 2.0 * ey / delta * e
            v -= 2.0 * ex / delta * e
    return np.array([u, v])


def stokes_vortex_forcing(x, y, t: float, delta: float = 2.5e-3, nu: float = 1.0) -> np.ndarray:
    """u_t - nu Lap u for the vortex (pressure zero)."""
    xc, yc = _vortex_center(t)
    w = 20 * math.pi
    xc_t, yc_t = 0.25 * w * math.cos(w * t), -0.25 * w * math.sin(w * t)
    dx = _wrap(np.asarray(x, float) - xc)
    dy = _wrap(np.asarray(y, float) - yc)
    J = int(math.ceil(0.5 + math.sqrt(37.0 * delta)))
    fu = np.zeros(np.broadcast(dx, dy).shape)
    fv = np.zeros_like(fu)
    d = delta
    for i in range(-J, J + 1):
        for j in range(-J, J + 1):
            a, b = dx - i, dy - j
            e = np.exp(-(a * a + b * b) / d)
            # u = 2 b e / d, v = -2 a e / d
            # time derivative: d/dt a = -xc_t, d/dt b = -yc_t
            e_t = e * (2 * a * xc_t + 2 * b * yc_t) / d
            u_t = 2.0 / d * (-yc_t * e + b * e_t)
            v_t = -2.0 / d * (-xc_t * e + a * e_t)
            # Lap(b e) = b Lap e + 2 e_b, Lap e = e (4 r^2/d^2 - 4/d), e_b = -2 b e / d
            lap_e = e * (4 * (a * a + b * b) / d**2 - 4.0 / d)
            lap_u = 2.0 / d * (b * lap_e - 4 * b * e / d)
            lap_v = -2.0 / d * (a * lap_e - 4 * a * e / d)
            fu += u_t - nu * lap_u
            fv += v_t - nu * lap_v
    return np.array([fu, fv])


# ---------------------------------------------------------------------------
# Navier-Stokes


def taylor_green(x, y, t: float = 0.0, nu: float = 0.01) -> np.ndarray:
    decay = math.exp(-8.0 * math.pi**2 * nu * t)
    return decay * np.array([-np.cos(TWO_PI * x) * np.sin(TWO_PI * y), np.sin(TWO_PI * x) * np.cos(TWO_PI * y)])


def shear_layer_ic(x, y, rho: float = 30.0, delta: float = 0.05, orientation: str = "classical") -> np.ndarray:
    """Double shear layer.

    "classical" switches on y (as in the standard benchmark); "x-switched"
    switches on x; "smooth" replaces the switch by a lattice sum of tanh
    bumps, which is C-infinity across y = 0 and y = +-1/2 and differs from
    "classical" by about 4 exp(-rho/2).
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    yw = _wrap(y)
    if orientation == "classical":
        u1 = np.where(yw <= 0, np.tanh(rho * (yw + 0.25)), np.tanh(rho * (0.25 - yw)))
    elif orientation == "x-switched":
        xw = _wrap(x)
        u1 = np.where(xw <= 0, np.tanh(rho * (yw + 0.25)), np.tanh(rho * (0.25 - yw)))
    elif orientation == "smooth":
        J = int(math.ceil(20.0 / rho)) + 2
        u1 = -np.ones_like(yw)
        for j in range(-J, J + 1):
            u1 += np.tanh(rho * (yw + 0.25 + j)) - np.tanh(rho * (yw - 0.25 + j))
    else:
        raise ValueError(f"unknown orientation {orientation!r}")
    u2 = delta * np.sin(TWO_PI * x)
    return np.array([u1 + 0.0 * x, u2 + 0.0 * y])


def ns_nonlinear(u: TreeField, external: Callable | None = None, t: float | None = None) -> TreeField:
    """-(u . grad) u + f on u's tree, from per-leaf Chebyshev derivatives."""
    gx, gy = field_gradient(u)
    U = u.vals
    F = -(U[:, 0:1] * gx.vals + U[:, 1:2] * gy.vals)
    t = u.t if t is None else t
    if external is not None:
        F = F + sample_function(lambda X, Y: external(X, Y, t), u.tree, u.K)
    return TreeField(u.tree, F, t)


def vorticity(u: TreeField) -> TreeField:
    gx, gy = field_gradient(u)
    return TreeField(u.tree, gx.vals[:, 1:2] - gy.vals[:, 0:1], u.t)


# ---------------------------------------------------------------------------
# registry


def _heat(delta: float = 2.5e-3, D: float = 1.0) -> ProblemSpec:
    return ProblemSpec(
        "heat",
        1,
        (D,),
        "linear",
        u0=lambda x, y: np.zeros((1,) + np.broadcast(x, y).shape),
        forcing=lambda x, y, t: heat_forcing(x, y, t, delta)[None],
        params={"delta": delta, "D": D},
    )


def _heat_free(D: float = 1.0) -> ProblemSpec:
    """No forcing; a narrow periodized Gaussian diffuses."""
    w = 1e-3
    return ProblemSpec(
        "heat-free",
        1,
        (D,),
        "linear",
        u0=lambda x, y: periodic_gaussian(x, y, 0.1, -0.05, w)[None],
        forcing=lambda x, y, t: np.zeros((1,) + np.broadcast(x, y).shape),
        exact=lambda x, y, t: (w / (w + 4 * D * t)) * periodic_gaussian(x, y, 0.1, -0.05, w + 4 * D * t)[None],
        params={"D": D},
    )


def _gray_scott(gamma: float = 0.04, kappa: float = 0.1, Du: float = 2e-5, Dv: float = 1e-5) -> ProblemSpec:
    def F(u, x, y, t):
        return np.array(gray_scott_rhs(u[0], u[1], gamma, kappa))

    def J(u, x, y, t):
        return gray_scott_jacobian(u[0], u[1], gamma, kappa)

    return ProblemSpec(
        "gray-scott", 2, (Du, Dv), "semilinear", u0=gray_scott_ic, forcing=F, jacobian=J,
        params={"gamma": gamma, "kappa": kappa, "Du": Du, "Dv": Dv},
    )


def _stokes(nu: float = 1.0) -> ProblemSpec:
    return ProblemSpec(
        "stokes",
        2,
        (nu, nu),
        "linear",
        u0=lambda x, y: stokes_manufactured(x, y, 0.0)[:2],
        forcing=lambda x, y, t: stokes_manufactured_forcing(x, y, t, nu),
        project=True,
        exact=lambda x, y, t: stokes_manufactured(x, y, t)[:2],
        params={"nu": nu},
    )


def _stokes_vortex(nu: float = 1.0, delta: float = 2.5e-3) -> ProblemSpec:
    return ProblemSpec(
        "stokes-vortex",
        2,
        (nu, nu),
        "linear",
        u0=lambda x, y: stokes_vortex_field(x, y, 0.0, delta),
        forcing=lambda x, y, t: stokes_vortex_forcing(x, y, t, delta, nu),
        project=True,
        exact=lambda x, y, t: stokes_vortex_field(x, y, t, delta),
        params={"nu": nu, "delta": delta},
    )


def _taylor_green(nu: float = 0.01) -> ProblemSpec:
    return ProblemSpec(
        "taylor-green",
        2,
        (nu, nu),
        "gradient",
        u0=lambda x, y: taylor_green(x, y, 0.0, nu),
        project=True,
        exact=lambda x, y, t: taylor_green(x, y, t, nu),
        params={"nu": nu},
    )


def _shear_layer(nu: float = 0.01, rho: float = 30.0, delta: float = 0.05, orientation: str = "classical") -> ProblemSpec:
    return ProblemSpec(
        "shear-layer",
        2,
        (nu, nu),
        "gradient",
        u0=lambda x, y: shear_layer_ic(x, y, rho, delta, orientation),
        project=True,
        params={"nu": nu, "rho": rho, "delta": delta, "orientation": orientation},
    )


PROBLEMS: dict[str, Callable[..., ProblemSpec]] = {
    "heat": _heat,
    "heat-free": _heat_free,
    "gray-scott": _gray_scott,
    "stokes": _stokes,
    "stokes-vortex": _stokes_vortex,
    "taylor-green": _taylor_green,
    "shear-layer": _shear_layer,
}


def make_problem(name: str, **params) -> ProblemSpec:
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None
    return factory(**params)
