"""Brute-force references for testing.

Nothing here calls into the production transforms: leaf polynomials are
refitted with numpy's Chebyshev module, quadrature is plain tensor
Gauss-Legendre and Fourier work goes through ``numpy.fft``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.polynomial import chebyshev as C
from scipy.integrate import quad_vec
from scipy.spatial import cKDTree

__all__ = [
    "UniformGridField",
    "uniform_points",
    "direct_gauss_transform",
    "spectral_poisson",
    "spectral_project",
    "duhamel_dense",
]


@dataclass
class UniformGridField:
    """M x M periodic samples, ``vals[c, i, j]`` at x = -1/2 + i/M, y = -1/2 + j/M."""

    vals: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vals, dtype=float)
        if v.ndim == 2:
            v = v[None]
        if v.shape[1] != v.shape[2]:
            raise ValueError("grid must be square")
        self.vals = v

    @property
    def M(self) -> int:
        return self.vals.shape[1]

    @property
    def p(self) -> int:
        return self.vals.shape[0]

    @classmethod
    def from_function(cls, f: Callable, M: int) -> "UniformGridField":
        X, Y = uniform_points(M)
        return cls(np.asarray(f(X, Y), dtype=float))


def uniform_points(M: int):
    s = -0.5 + np.arange(M) / M
    return np.meshgrid(s, s, indexing="ij")


# ---------------------------------------------------------------------------
# direct Gauss transform


def _leaf_quadrature(field, delta: float, order: int, refine: int):
    """Quadrature points, weights and source values covering every leaf."""
    tree = field.tree
    K = field.K
    xg, wg = np.polynomial.legendre.leggauss(order)
    nodes_ref = -np.cos(np.pi * (2 * np.arange(K) + 1) / (2 * K))
    V = C.chebvander(nodes_ref, K - 1)
    Vinv = np.linalg.inv(V)
    X, Y = tree.nodes(K)
    pts, wts, vals = [], [], []
    for n, (l, i, j) in enumerate(tree.keys):
        h = 2.0**-l
        cx = X[n].mean()
        cy = Y[n].mean()
        npan = max(1, int(math.ceil(h / math.sqrt(delta)))) * refine
        edges = np.linspace(-1.0, 1.0, npan + 1)
        mid = 0.5 * (edges[1:] + edges[:-1])
        half = 0.5 * (edges[1:] - edges[:-1])
        t = (mid[:, None] + half[:, None] * xg[None, :]).ravel()
        w = (half[:, None] * wg[None, :]).ravel() * (0.5 * h)
        coef = Vinv @ field.vals[n] @ Vinv.T  # (p, K, K): [c, m(y), n(x)]
        T = C.chebvander(t, K - 1)
        v = np.einsum("am,cmn,bn->cab", T, coef, T)  # (p, ty, tx)
        ty, tx = np.meshgrid(t, t, indexing="ij")
        pts.append(np.stack([cx + 0.5 * h * tx.ravel(), cy + 0.5 * h * ty.ravel()], axis=1))
        wts.append(np.outer(w, w).ravel())
        vals.append(v.reshape(v.shape[0], -1))
    return np.concatenate(pts), np.concatenate(wts), np.concatenate(vals, axis=1)


def _gauss_images_1d(d: np.ndarray, delta: float) -> np.ndarray:
    d = np.mod(d + 0.5, 1.0) - 0.5
    m = int(math.ceil(math.sqrt(delta * 36.0 * math.log(10.0)))) + 1
    out = np.zeros_like(d)
    for k in range(-m, m + 1):
        out += np.exp(-((d - k) ** 2) / delta)
    return out


def direct_gauss_transform(field, delta: float, x, y, order: int | None = None, refine: int = 1) -> np.ndarray:
    """(1/(pi delta)) int sum_n exp(-|x - y' - n|^2/delta) u(y') dy' at the given targets.

    Each leaf is cut into panels no wider than sqrt(delta) and integrated with
    ``order``-point (default 2K) tensor Gauss-Legendre.  Returns (p, n_targets).
    """
    order = 2 * field.K if order is None else order
    x = np.atleast_1d(np.asarray(x, float)).ravel()
    y = np.atleast_1d(np.asarray(y, float)).ravel()
    Q, W, U = _leaf_quadrature(field, delta, order, refine)
    WU = U * W[None, :]
    out = np.zeros((U.shape[0], x.size))
    R = math.sqrt(delta * 38.0 * math.log(10.0))  # exp(-R^2/delta) = 1e-38
    if R < 0.45:
        kd = cKDTree(np.mod(Q + 0.5, 1.0), boxsize=1.0)
        for t, (xt, yt) in enumerate(zip(x, y)):
            idx = kd.query_ball_point([(xt + 0.5) % 1.0, (yt + 0.5) % 1.0], R)
            idx = np.asarray(idx, dtype=np.int64)
            dx = np.mod(xt - Q[idx, 0] + 0.5, 1.0) - 0.5
            dy = np.mod(yt - Q[idx, 1] + 0.5, 1.0) - 0.5
            k = np.exp(-(dx * dx + dy * dy) / delta)
            out[:, t] = WU[:, idx] @ k
    else:
        for t, (xt, yt) in enumerate(zip(x, y)):
            k = _gauss_images_1d(xt - Q[:, 0], delta) * _gauss_images_1d(yt - Q[:, 1], delta)
            out[:, t] = WU @ k
    return out / (math.pi * delta)


# ---------------------------------------------------------------------------
# uniform-grid Fourier utilities


def _wavenumbers(M: int):
    n = np.fft.fftfreq(M, 1.0 / M)
    return np.meshgrid(n, n, indexing="ij")


def spectral_poisson(rhs: UniformGridField, tol: float = 1e-10):
    """phi, dphi/dx, dphi/dy for Delta phi = rhs on the unit torus (mean(phi) = 0)."""
    r = rhs.vals[0]
    mean = float(r.mean())
    if abs(mean) > tol * max(1.0, float(np.max(np.abs(r)))):
        raise ValueError(f"rhs has nonzero mean {mean:.3e}")
    M = rhs.M
    n1, n2 = _wavenumbers(M)
    k2 = n1**2 + n2**2
    rh = np.fft.fft2(r)
    k2[0, 0] = 1.0
    ph = -rh / (4.0 * np.pi**2 * k2)
    ph[0, 0] = 0.0
    # drop the unpaired Nyquist modes so the derivative stays real
    ny = np.abs(n1) == M // 2
    nyy = np.abs(n2) == M // 2
    gx = 2j * np.pi * n1 * ph
    gy = 2j * np.pi * n2 * ph
    gx[ny] = 0.0
    gy[nyy] = 0.0
    f = lambda z: np.real(np.fft.ifft2(z))
    return UniformGridField(f(ph)), UniformGridField(f(gx)), UniformGridField(f(gy))


def spectral_project(F: UniformGridField):
    """(F_S, F_G) by mode-wise projection; the zero mode goes to F_S."""
    M = F.M
    n1, n2 = _wavenumbers(M)
    k2 = n1**2 + n2**2
    k2[0, 0] = 1.0
    Fh = np.fft.fft2(F.vals, axes=(1, 2))
    dot = (n1 * Fh[0] + n2 * Fh[1]) / k2
    dot[0, 0] = 0.0
    G = np.stack([n1 * dot, n2 * dot])
    G = np.real(np.fft.ifft2(G, axes=(1, 2)))
    return UniformGridField(F.vals - G), UniformGridField(G)


# ---------------------------------------------------------------------------
# dense Duhamel reference


def duhamel_dense(
    F: Callable,
    u0: Callable,
    D: float,
    t_final: float,
    M: int = 128,
    tol: float = 1e-12,
    t0: float = 0.0,
) -> UniformGridField:
    """Mode-wise exact solution of u_t = D Lap u + F(x, t) on an M x M grid.

    ``F(X, Y, t)`` and ``u0(X, Y)`` are sampled on the grid; every resolved
    Fourier mode is propagated with exp(-4 pi^2 |n|^2 D t) and the forcing
    integral is done by adaptive vector quadrature.
    """
    X, Y = uniform_points(M)
    n1, n2 = _wavenumbers(M)
    lam = 4.0 * np.pi**2 * D * (n1**2 + n2**2)
    uh0 = np.fft.fft2(np.asarray(u0(X, Y), dtype=float))
    T = t_final - t0

    def integrand(s):
        fh = np.fft.fft2(np.asarray(F(X, Y, t0 + s), dtype=float))
        z = np.exp(-lam * (T - s)) * fh
        return np.concatenate([z.real.ravel(), z.imag.ravel()])

    scale = max(1.0, float(np.max(np.abs(F(X, Y, t0)))) * M * M)
    val, _ = quad_vec(integrand, 0.0, T, epsabs=tol * scale, epsrel=tol, limit=2000)
    half = M * M
    Ih = (val[:half] + 1j * val[half:]).reshape(M, M)
    uh = np.exp(-lam * T) * uh0 + Ih
    return UniformGridField(np.real(np.fft.ifft2(uh)))
