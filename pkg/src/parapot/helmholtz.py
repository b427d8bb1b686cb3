"""Periodic Poisson solves and Helmholtz decomposition of tree fields.

Backend "uniform-spectral": the field is sampled on a uniform M x M grid at
the tree's finest resolution (capped), the exact Fourier multipliers are
applied there, and the result is evaluated back at the leaf nodes with a
type-2 non-uniform FFT.  Derivatives are taken as Fourier multipliers on the
Green's function, so no data is differentiated numerically.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import finufft
import numpy as np

from .adaptree import TreeField, eval_field

log = logging.getLogger(__name__)

__all__ = ["Decomposition", "poisson_solve_periodic", "helmholtz_decompose", "grid_size", "to_modes", "modes_to_tree"]

MAX_GRID = 512
NTHREADS: int | None = None  # finufft thread cap; None lets finufft decide


@dataclass
class Decomposition:
    F_S: TreeField
    F_G: TreeField
    phi: TreeField  # F_G = grad phi


def grid_size(field: TreeField, cap: int | None = None) -> int:
    cap = MAX_GRID if cap is None else cap
    need = field.K * (1 << field.tree.depth)
    M = 1 << max(4, math.ceil(math.log2(need)))
    return min(M, cap)


def to_modes(field: TreeField, M: int) -> np.ndarray:
    """Fourier coefficients c[comp, n1, n2] (fft ordering) with the Nyquist row/column removed."""
    s = -0.5 + np.arange(M) / M
    X, Y = np.meshgrid(s, s, indexing="ij")
    vals = eval_field(field, X, Y)  # (p, M, M), [x, y]
    c = np.fft.fft2(vals, axes=(1, 2)) / (M * M)
    n = np.fft.fftfreq(M, 1.0 / M).astype(int)
    sign = np.where((n[:, None] + n[None, :]) % 2 == 0, 1.0, -1.0)  # grid starts at -1/2
    c *= sign
    c[:, M // 2, :] = 0.0
    c[:, :, M // 2] = 0.0
    return c


def modes_to_tree(c: np.ndarray, field: TreeField, eps: float = 1e-13) -> np.ndarray:
    """Evaluate sum_n c[., n] exp(2 pi i n.x) at every leaf node: (n_leaf, p, K, K)."""
    X, Y = field.nodes()
    x = np.ascontiguousarray(2.0 * np.pi * X.ravel())
    y = np.ascontiguousarray(2.0 * np.pi * Y.ravel())
    f = np.ascontiguousarray(np.fft.fftshift(c, axes=(1, 2)).astype(np.complex128))
    opts = {} if NTHREADS is None else {"nthreads": int(NTHREADS)}
    out = finufft.nufft2d2(x, y, f, isign=1, eps=max(eps, 1e-14), **opts)
    out = np.real(np.atleast_2d(out)).reshape(c.shape[0], *X.shape)
    return np.moveaxis(out, 0, 1)


def _check_band(c: np.ndarray, scale: float, eps: float) -> None:
    M = c.shape[-1]
    n = np.abs(np.fft.fftfreq(M, 1.0 / M))
    edge = np.maximum(n[:, None], n[None, :]) >= M // 2 - 2
    tail = float(np.max(np.abs(c[:, edge]))) if c.size else 0.0
    if tail > 100.0 * eps * max(scale, 1e-300):  # below this is piecewise-fit noise
        log.warning("uniform grid M=%d under-resolves the field (edge modes %.1e)", M, tail)


def _wave(M: int):
    n = np.fft.fftfreq(M, 1.0 / M)
    n1, n2 = np.meshgrid(n, n, indexing="ij")
    k2 = n1**2 + n2**2
    k2[0, 0] = 1.0
    return n1, n2, k2


def poisson_solve_periodic(rhs: TreeField, eps: float = 1e-9, M: int | None = None) -> TreeField:
    """[phi, dphi/dx, dphi/dy] on rhs's tree for Laplace(phi) = rhs, mean(phi) = 0."""
    if rhs.p != 1:
        raise ValueError("rhs must be scalar")
    scale = rhs.max_abs()
    mean = float(rhs.mean()[0])
    if abs(mean) > 10.0 * eps * max(scale, 1e-300) and abs(mean) > 1e-14:
        raise ValueError(f"Poisson rhs must have zero mean, measured {mean:.3e}")
    M = grid_size(rhs) if M is None else M
    c = to_modes(rhs, M)[0]
    _check_band(c[None], scale, eps)
    n1, n2, k2 = _wave(M)
    ph = -c / (4.0 * np.pi**2 * k2)
    ph[0, 0] = 0.0
    modes = np.stack([ph, 2j * np.pi * n1 * ph, 2j * np.pi * n2 * ph])
    return TreeField(rhs.tree, modes_to_tree(modes, rhs, eps * 1e-2), rhs.t)


def helmholtz_decompose(F: TreeField, eps: float = 1e-9, M: int | None = None, backend: str = "uniform-spectral") -> Decomposition:
    """F = F_S + grad phi with div F_S = 0; the mean of F stays in F_S."""
    if backend != "uniform-spectral":
        raise ValueError(f"unknown Helmholtz backend {backend!r}")
    if F.p != 2:
        raise ValueError("Helmholtz decomposition needs a 2-component field")
    M = grid_size(F) if M is None else M
    c = to_modes(F, M)
    _check_band(c, F.max_abs(), eps)
    n1, n2, k2 = _wave(M)
    dot = (n1 * c[0] + n2 * c[1]) / k2  # n.F / |n|^2
    dot[0, 0] = 0.0
    ph = dot / (2j * np.pi)
    modes = np.stack([n1 * dot, n2 * dot, ph])
    ev = modes_to_tree(modes, F, eps * 1e-2)
    FG = TreeField(F.tree, ev[:, :2], F.t)
    FS = TreeField(F.tree, F.vals - ev[:, :2], F.t)
    return Decomposition(FS, FG, TreeField(F.tree, ev[:, 2:], F.t))


def project(F: TreeField, eps: float = 1e-9, **kw) -> TreeField:
    """Solenoidal part of F."""
    return helmholtz_decompose(F, eps, **kw).F_S
