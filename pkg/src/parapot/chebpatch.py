"""Tensor-product Chebyshev patches on square boxes.

A patch holds the K x K coefficients ``coeffs[m, n]`` of

    u(x, y) = sum_{n,m} coeffs[m, n] T_n(xi_x) T_m(xi_y),

where ``xi = 2 (x - center) / side`` maps the box onto [-1, 1]^2.  Grid values
are stored the same way round: ``vals[iy, ix]`` with x varying fastest, at the
K Chebyshev points of the first kind (no node sits on a box edge).

The module-level functions work on stacked arrays ``(..., K, K)`` so trees can
transform all leaves at once; :class:`ChebPatch` wraps a single box.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "ChebPatch",
    "cheb_nodes",
    "cheb_vandermonde",
    "vals2coeffs",
    "coeffs2vals",
    "diff_coeffs",
    "tail_error",
    "tail_error_vals",
    "shell_error",
    "resolution_error",
    "l2_resolution_error",
    "child_interp_matrices",
    "parent_fit_matrices",
    "interp_to_children",
    "parent_fit_error",
    "eval_coeffs",
]


@lru_cache(maxsize=None)
def cheb_nodes(K: int) -> np.ndarray:
    """First-kind Chebyshev points on [-1, 1], ascending."""
    k = np.arange(K)
    x = -np.cos(np.pi * (2 * k + 1) / (2 * K))
    x.setflags(write=False)
    return x


def cheb_vandermonde(x: np.ndarray, K: int) -> np.ndarray:
    """Matrix ``V[a, n] = T_n(x[a])`` built by the three-term recurrence."""
    x = np.asarray(x, dtype=float)
    V = np.empty(x.shape + (K,))
    V[..., 0] = 1.0
    if K > 1:
        V[..., 1] = x
    for n in range(2, K):
        V[..., n] = 2.0 * x * V[..., n - 1] - V[..., n - 2]
    return V


@lru_cache(maxsize=None)
def _transform_matrices(K: int) -> tuple[np.ndarray, np.ndarray]:
    V = cheb_vandermonde(cheb_nodes(K), K)
    # discrete orthogonality of T_n on first-kind points
    Vinv = V.T * (2.0 / K)
    Vinv[0] *= 0.5
    V.setflags(write=False)
    Vinv.setflags(write=False)
    return V, Vinv


def vals2coeffs(vals: np.ndarray) -> np.ndarray:
    """Grid values ``(..., K, K)`` to Chebyshev coefficients ``(..., K, K)``."""
    K = vals.shape[-1]
    _, Vinv = _transform_matrices(K)
    return Vinv @ vals @ Vinv.T


def coeffs2vals(coeffs: np.ndarray) -> np.ndarray:
    K = coeffs.shape[-1]
    V, _ = _transform_matrices(K)
    return V @ coeffs @ V.T


@lru_cache(maxsize=None)
def _diff_matrix(K: int) -> np.ndarray:
    # d/dxi acting on coefficient vectors: c'_{n} = sum_k D[n, k] c_k
    D = np.zeros((K, K))
    for k in range(1, K):
        for n in range(k - 1, -1, -2):
            D[n, k] = 2.0 * k
        if (k - 1) % 2 == 0:
            D[0, k] = k
    D.setflags(write=False)
    return D


def diff_coeffs(coeffs: np.ndarray, axis: str, side) -> np.ndarray:
    """Coefficients of d/dx (``axis='x'``) or d/dy of a patch of the given side.

    ``side`` may be an array broadcasting against the leading dims of ``coeffs``.
    """
    K = coeffs.shape[-1]
    D = _diff_matrix(K)
    scale = 2.0 / np.asarray(side, dtype=float)[..., None, None]
    if axis == "x":
        return scale * (coeffs @ D.T)
    if axis == "y":
        return scale * (D @ coeffs)
    raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")


@lru_cache(maxsize=None)
def _tail_mask(K: int) -> np.ndarray:
    m, n = np.meshgrid(np.arange(K), np.arange(K), indexing="ij")
    mask = (n * n + m * m) >= K * K
    mask.setflags(write=False)
    return mask


def tail_error(coeffs: np.ndarray) -> np.ndarray:
    """sqrt(sum over n^2+m^2 >= K^2 of |u_nm|^2) / K, over the stored block."""
    K = coeffs.shape[-1]
    tail = coeffs[..., _tail_mask(K)]
    return np.sqrt(np.sum(tail * tail, axis=-1)) / K


def tail_error_vals(vals: np.ndarray) -> np.ndarray:
    return tail_error(vals2coeffs(vals))


@lru_cache(maxsize=None)
def _shell_mask(K: int) -> np.ndarray:
    m, n = np.meshgrid(np.arange(K), np.arange(K), indexing="ij")
    mask = np.maximum(n, m) >= K - 2
    mask.setflags(write=False)
    return mask


def shell_error(coeffs: np.ndarray) -> np.ndarray:
    """L2 norm of the two outermost coefficient shells, max(n, m) >= K - 2.

    Unlike :func:`tail_error` this sees slowly decaying coefficients along a
    single axis (n large, m = 0), which the corner of the block misses.  Two
    shells rather than one guard against parity zeros of symmetric data.
    """
    K = coeffs.shape[-1]
    s = coeffs[..., _shell_mask(K)]
    return np.sqrt(np.sum(s * s, axis=-1))


def _shell_norms(coeffs: np.ndarray) -> np.ndarray:
    """L2 norm of each shell max(n, m) = k, k = 0..K-1, along a new last axis."""
    K = coeffs.shape[-1]
    m, n = np.meshgrid(np.arange(K), np.arange(K), indexing="ij")
    shell = np.maximum(m, n)
    sq = coeffs * coeffs
    return np.sqrt(np.stack([np.sum(sq[..., shell == k], axis=-1) for k in range(K)], axis=-1))


def extrap_error(coeffs: np.ndarray) -> np.ndarray:
    """Size of the first dropped shell, extrapolated from the last ones.

    Geometric decay is assumed along each parity: s_K ~ s_{K-1}^2 / s_{K-2} and
    s_K ~ s_{K-2}^2 / s_{K-4}.  Ratios are capped at 1, so data that do not
    decay are charged their last shell in full.
    """
    s = _shell_norms(coeffs)
    K = s.shape[-1]
    tiny = 1e-300

    def step(a, b):
        return a * np.minimum(1.0, a / np.maximum(b, tiny))

    e1 = step(s[..., K - 1], s[..., K - 2])
    e2 = step(s[..., K - 2], s[..., K - 4]) if K >= 4 else s[..., K - 2]
    return np.maximum(e1, e2)


def resolution_error(coeffs: np.ndarray, metric: str = "shell") -> np.ndarray:
    if metric == "extrap":
        return extrap_error(coeffs)
    if metric == "shell":
        return shell_error(coeffs)
    if metric == "tail":
        return tail_error(coeffs)
    if metric == "l2":
        return l2_resolution_error(coeffs)
    raise ValueError(f"unknown resolution metric {metric!r}")


@lru_cache(maxsize=None)
def _fine_eval_matrix(K: int) -> np.ndarray:
    t = (np.arange(2 * K) + 0.5) / K - 1.0
    return cheb_vandermonde(t, K)


def l2_resolution_error(coeffs: np.ndarray) -> np.ndarray:
    """Discrete L2 misfit on a 2K x 2K grid between the patch and its
    truncation to total degree < K (the coefficients inside the quarter disk).

    Alternative to :func:`tail_error`; both measure the energy outside the
    quarter disk, this one in physical space.
    """
    K = coeffs.shape[-1]
    tail = np.where(_tail_mask(K), coeffs, 0.0)
    E = _fine_eval_matrix(K)
    diff = E @ tail @ E.T
    return np.sqrt(np.mean(diff * diff, axis=(-2, -1)))


@lru_cache(maxsize=None)
def child_interp_matrices(K: int) -> tuple[np.ndarray, np.ndarray]:
    """Parent-value to child-value matrices for the low and high half.

    ``child_vals = A_y @ parent_vals @ A_x.T`` with A the low/high matrix per
    axis.  SW uses (lo, lo), SE (x: hi, y: lo), NW (x: lo, y: hi), NE (hi, hi).
    """
    x = cheb_nodes(K)
    _, Vinv = _transform_matrices(K)
    lo = cheb_vandermonde(0.5 * (x - 1.0), K) @ Vinv
    hi = cheb_vandermonde(0.5 * (x + 1.0), K) @ Vinv
    lo.setflags(write=False)
    hi.setflags(write=False)
    return lo, hi


@lru_cache(maxsize=None)
def parent_fit_matrices(K: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Sampling of child polynomials at parent nodes.

    Parent nodes with xi < 0 fall in the low child, xi > 0 in the high child
    (K first-kind nodes never hit 0 when K is even; for odd K the middle node
    is taken from the low child).  Returns (S_lo, S_hi, sel_lo, sel_hi): the
    child-value -> parent-node matrices restricted to the rows each child owns.
    """
    x = cheb_nodes(K)
    _, Vinv = _transform_matrices(K)
    sel_lo = x <= 0.0
    sel_hi = ~sel_lo
    S_lo = cheb_vandermonde(2.0 * x[sel_lo] + 1.0, K) @ Vinv
    S_hi = cheb_vandermonde(2.0 * x[sel_hi] - 1.0, K) @ Vinv
    return S_lo, S_hi, sel_lo, sel_hi


CHILD_OFFSETS = ((0, 0), (1, 0), (0, 1), (1, 1))  # SW, SE, NW, NE as (dx, dy)


def interp_to_children(vals: np.ndarray) -> np.ndarray:
    """Evaluate parent interpolants on the four child grids.

    ``vals`` has shape (..., K, K); returns (..., 4, K, K) in SW, SE, NW, NE order.
    """
    K = vals.shape[-1]
    lo, hi = child_interp_matrices(K)
    mats = (lo, hi)
    out = np.empty(vals.shape[:-2] + (4, K, K))
    for c, (dx, dy) in enumerate(CHILD_OFFSETS):
        out[..., c, :, :] = mats[dy] @ vals @ mats[dx].T
    return out


def fit_parent(children: np.ndarray) -> np.ndarray:
    """Parent grid values sampled from the four child interpolants.

    ``children`` has shape (..., 4, K, K) in SW, SE, NW, NE order.
    """
    K = children.shape[-1]
    S_lo, S_hi, sel_lo, sel_hi = parent_fit_matrices(K)
    S = (S_lo, S_hi)
    sels = (sel_lo, sel_hi)
    out = np.empty(children.shape[:-3] + (K, K))
    for c, (dx, dy) in enumerate(CHILD_OFFSETS):
        ry = np.flatnonzero(sels[dy])
        rx = np.flatnonzero(sels[dx])
        out[..., ry[:, None], rx[None, :]] = S[dy] @ children[..., c, :, :] @ S[dx].T
    return out


def parent_fit_error(children: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Build the parent from child data and measure the misfit.

    Returns (parent_vals, err) where err is the max over all 4 K^2 child nodes
    of |parent interpolant - child value|.
    """
    parent = fit_parent(children)
    back = interp_to_children(parent)
    err = np.max(np.abs(back - children), axis=(-3, -2, -1))
    return parent, err


def eval_coeffs(coeffs: np.ndarray, xi: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Evaluate stacked patches at reference coordinates.

    ``coeffs`` (N, K, K) and ``xi``, ``eta`` (N,) -> (N,): one point per patch.
    """
    K = coeffs.shape[-1]
    Tx = cheb_vandermonde(xi, K)
    Ty = cheb_vandermonde(eta, K)
    return np.einsum("pm,pmn,pn->p", Ty, coeffs, Tx)


def _clenshaw(c: np.ndarray, x: float) -> np.ndarray:
    # c[..., n] along the last axis
    b1 = np.zeros(c.shape[:-1])
    b2 = np.zeros(c.shape[:-1])
    for n in range(c.shape[-1] - 1, 0, -1):
        b1, b2 = 2.0 * x * b1 - b2 + c[..., n], b1
    return x * b1 - b2 + c[..., 0]


@dataclass(frozen=True)
class ChebPatch:
    """One field component on one box, as Chebyshev coefficients."""

    coeffs: np.ndarray
    center: tuple[float, float] = (0.0, 0.0)
    side: float = 1.0

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] < 2:
            raise ValueError(f"coeffs must be K x K with K >= 2, got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    @property
    def K(self) -> int:
        return self.coeffs.shape[0]

    @classmethod
    def from_values(cls, vals, center=(0.0, 0.0), side=1.0) -> "ChebPatch":
        return cls(vals2coeffs(np.asarray(vals, dtype=float)), center, side)

    @classmethod
    def from_function(cls, f, center=(0.0, 0.0), side=1.0, K=8) -> "ChebPatch":
        X, Y = leaf_nodes(center, side, K)
        return cls.from_values(f(X, Y), center, side)

    def nodes(self) -> tuple[np.ndarray, np.ndarray]:
        return leaf_nodes(self.center, self.side, self.K)

    def values(self) -> np.ndarray:
        return coeffs2vals(self.coeffs)

    def contains(self, x, y, tol=1e-12) -> bool:
        h = 0.5 * self.side * (1.0 + tol)
        return abs(x - self.center[0]) <= h and abs(y - self.center[1]) <= h

    def __call__(self, x: float, y: float) -> float:
        if not self.contains(x, y):
            raise ValueError(f"point ({x}, {y}) lies outside the patch box")
        xi = 2.0 * (x - self.center[0]) / self.side
        eta = 2.0 * (y - self.center[1]) / self.side
        # Clenshaw in x for every row, then in y
        rows = _clenshaw(self.coeffs, xi)
        return float(_clenshaw(rows, eta))

    def diff(self, axis: str) -> "ChebPatch":
        return ChebPatch(diff_coeffs(self.coeffs, axis, self.side), self.center, self.side)

    def tail_error(self) -> float:
        return float(tail_error(self.coeffs))

    def children(self) -> list["ChebPatch"]:
        """The four child patches (SW, SE, NW, NE) carrying this polynomial."""
        grids = interp_to_children(self.values())
        h = 0.5 * self.side
        out = []
        for c, (dx, dy) in enumerate(CHILD_OFFSETS):
            cen = (self.center[0] + (dx - 0.5) * h, self.center[1] + (dy - 0.5) * h)
            out.append(ChebPatch.from_values(grids[c], cen, h))
        return out

    def __mul__(self, a: float) -> "ChebPatch":
        return ChebPatch(a * self.coeffs, self.center, self.side)

    __rmul__ = __mul__


def leaf_nodes(center, side, K) -> tuple[np.ndarray, np.ndarray]:
    """Node coordinates (X, Y), each K x K, x varying fastest."""
    t = cheb_nodes(K)
    xs = center[0] + 0.5 * side * t
    ys = center[1] + 0.5 * side * t
    X, Y = np.meshgrid(xs, ys)
    return X, Y


def patch_parent_fit(children: list[ChebPatch]) -> tuple[ChebPatch, float]:
    """Parent patch from four sibling patches (SW, SE, NW, NE) plus misfit."""
    if len(children) != 4:
        raise ValueError("need exactly four children")
    stack = np.stack([c.values() for c in children])
    parent_vals, err = parent_fit_error(stack)
    h = children[0].side
    cx = children[0].center[0] + 0.5 * h
    cy = children[0].center[1] + 0.5 * h
    return ChebPatch.from_values(parent_vals, (cx, cy), 2 * h), float(err)
