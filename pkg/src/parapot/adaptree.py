"""Level-restricted periodic quadtrees over D = [-1/2, 1/2]^2 and fields on them.

Boxes are addressed by integer keys ``(level, i, j)`` with ``0 <= i, j < 2**level``;
``i`` counts along x.  Box (l, i, j) covers
``[-1/2 + i h, -1/2 + (i+1) h] x [-1/2 + j h, -1/2 + (j+1) h]`` with ``h = 2**-l``.
Children are ordered SW, SE, NW, NE, which is also Morton (z-order) order, so
leaves sorted by Morton code give a preorder traversal and point location is a
binary search.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field
from typing import Callable, Iterable

import numpy as np

from . import chebpatch as cp

log = logging.getLogger(__name__)

# address depth of the Morton codes; every tree level must be below this
ADDR_DEPTH = 30

DIRS8 = ((-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1))

Key = tuple[int, int, int]


def _spread_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0xFFFFFFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x0000FFFF0000FFFF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x00FF00FF00FF00FF)
    v = (v | (v << np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    v = (v | (v << np.uint64(2))) & np.uint64(0x3333333333333333)
    v = (v | (v << np.uint64(1))) & np.uint64(0x5555555555555555)
    return v


def morton_code(level, i, j) -> np.ndarray:
    """Morton code of the first finest-depth cell inside box (level, i, j)."""
    level = np.asarray(level, dtype=np.int64)
    shift = (ADDR_DEPTH - level).astype(np.uint64)
    ii = np.asarray(i, dtype=np.uint64) << shift
    jj = np.asarray(j, dtype=np.uint64) << shift
    return _spread_bits(ii) | (_spread_bits(jj) << np.uint64(1))


def box_center(level, i, j):
    h = 2.0 ** (-np.asarray(level, dtype=float))
    return -0.5 + (np.asarray(i) + 0.5) * h, -0.5 + (np.asarray(j) + 0.5) * h


def children_of(key: Key) -> list[Key]:
    l, i, j = key
    return [(l + 1, 2 * i + dx, 2 * j + dy) for dx, dy in cp.CHILD_OFFSETS]


def parent_of(key: Key) -> Key:
    l, i, j = key
    return (l - 1, i >> 1, j >> 1)


def boxes_touch(a: Key, b: Key) -> bool:
    """True if the closed boxes a and b intersect on the torus (edge, corner or overlap)."""
    L = max(a[0], b[0])
    n = 1 << L
    sa = 1 << (L - a[0])
    sb = 1 << (L - b[0])
    for ka, kb in ((a[1], b[1]), (a[2], b[2])):
        lo_a, lo_b = ka * sa, kb * sb
        hit = False
        for m in (-n, 0, n):
            if lo_b + m <= lo_a + sa and lo_a <= lo_b + sb + m:
                hit = True
                break
        if not hit:
            return False
    return True


class AdaptiveTree:
    """Leaves of a periodic quadtree, kept in Morton order.

    The tree is immutable; :meth:`refine`, :meth:`coarsen` and :meth:`balanced`
    return new trees.
    """

    def __init__(self, keys: Iterable[Key], L_max: int = 12, check: bool = True):
        keys = {tuple(int(v) for v in k) for k in keys}
        if not keys:
            raise ValueError("a tree needs at least one leaf")
        arr = np.array(sorted(keys), dtype=np.int64).reshape(-1, 3)
        codes = morton_code(arr[:, 0], arr[:, 1], arr[:, 2])
        order = np.argsort(codes, kind="stable")
        self.L_max = int(L_max)
        self.level = arr[order, 0]
        self.ix = arr[order, 1]
        self.iy = arr[order, 2]
        self._codes = codes[order]
        self.keys: list[Key] = [tuple(int(v) for v in r) for r in arr[order]]
        self.index: dict[Key, int] = {k: n for n, k in enumerate(self.keys)}
        if self.level.max() >= ADDR_DEPTH:
            raise ValueError("tree deeper than the Morton address depth")
        if check:
            area = np.sum(4.0 ** (-self.level.astype(float)))
            if abs(area - 1.0) > 1e-12 or self._overlaps():
                raise ValueError("leaves do not partition the unit box")

    def _overlaps(self) -> bool:
        span = np.left_shift(np.uint64(1), (2 * (ADDR_DEPTH - self.level)).astype(np.uint64))
        ends = self._codes + span
        return bool(np.any(ends[:-1] > self._codes[1:]))

    # -- construction -----------------------------------------------------
    @classmethod
    def root(cls, L_max: int = 12) -> "AdaptiveTree":
        return cls([(0, 0, 0)], L_max)

    @classmethod
    def uniform(cls, level: int, L_max: int = 12) -> "AdaptiveTree":
        n = 1 << level
        return cls([(level, i, j) for j in range(n) for i in range(n)], L_max)

    def __len__(self) -> int:
        return len(self.keys)

    def __eq__(self, other) -> bool:
        return isinstance(other, AdaptiveTree) and self.keys == other.keys

    def __repr__(self) -> str:
        return f"AdaptiveTree(n_leaves={len(self)}, depth={self.depth})"

    @property
    def n_leaves(self) -> int:
        return len(self.keys)

    @property
    def depth(self) -> int:
        return int(self.level.max())

    @property
    def side(self) -> np.ndarray:
        return 2.0 ** (-self.level.astype(float))

    @property
    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        return box_center(self.level, self.ix, self.iy)

    def n_points(self, K: int) -> int:
        return len(self) * K * K

    def nodes(self, K: int) -> tuple[np.ndarray, np.ndarray]:
        """Leaf node coordinates, each of shape (n_leaves, K, K)."""
        t = cp.cheb_nodes(K)
        cx, cy = self.centers
        h = 0.5 * self.side
        X = cx[:, None, None] + h[:, None, None] * t[None, None, :]
        Y = cy[:, None, None] + h[:, None, None] * t[None, :, None]
        return np.broadcast_to(X, (len(self), K, K)), np.broadcast_to(Y, (len(self), K, K))

    # -- queries ----------------------------------------------------------
    def is_leaf(self, key: Key) -> bool:
        return key in self.index

    def covering_leaf(self, key: Key) -> Key | None:
        """The leaf equal to or containing box ``key``; None if ``key`` is subdivided."""
        l, i, j = key
        for m in range(l, -1, -1):
            k = (m, i >> (l - m), j >> (l - m))
            if k in self.index:
                return k
        return None

    def locate(self, x, y) -> np.ndarray:
        """Indices of the leaves containing points (periodically wrapped into D)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        n = 1 << ADDR_DEPTH
        u = np.floor((np.mod(x + 0.5, 1.0)) * n).astype(np.int64)
        v = np.floor((np.mod(y + 0.5, 1.0)) * n).astype(np.int64)
        np.clip(u, 0, n - 1, out=u)
        np.clip(v, 0, n - 1, out=v)
        code = _spread_bits(u) | (_spread_bits(v) << np.uint64(1))
        return np.searchsorted(self._codes, code, side="right") - 1

    def neighbors(self, key: Key) -> list[Key]:
        """Leaves sharing an edge or corner with leaf ``key`` under periodic wrap."""
        if key not in self.index:
            raise KeyError(f"{key} is not a leaf")
        l, i, j = key
        n = 1 << l
        out: set[Key] = set()
        for di, dj in DIRS8:
            nk = (l, (i + di) % n, (j + dj) % n)
            c = self.covering_leaf(nk)
            if c is not None:
                out.add(c)
            else:
                self._collect_facing(nk, di, dj, out)
        out.discard(key)
        return sorted(out, key=lambda k: self.index[k])

    def _collect_facing(self, key: Key, di: int, dj: int, out: set) -> None:
        # descendants of the subdivided box `key` touching the side facing (-di, -dj)
        for child, (dx, dy) in zip(children_of(key), cp.CHILD_OFFSETS):
            if (di == 1 and dx == 1) or (di == -1 and dx == 0):
                continue
            if (dj == 1 and dy == 1) or (dj == -1 and dy == 0):
                continue
            if child in self.index:
                out.add(child)
            else:
                self._collect_facing(child, di, dj, out)

    def is_balanced(self) -> bool:
        for k in self.keys:
            for nb in self.neighbors(k):
                if abs(nb[0] - k[0]) > 1:
                    return False
        return True

    # -- modification -----------------------------------------------------
    def refine(self, keys: Iterable[Key]) -> "AdaptiveTree":
        leaves = set(self.keys)
        for k in keys:
            if k not in leaves:
                raise KeyError(f"{k} is not a leaf")
            leaves.remove(k)
            leaves.update(children_of(k))
        return AdaptiveTree(leaves, self.L_max, check=False)

    def coarsen(self, parents: Iterable[Key]) -> "AdaptiveTree":
        leaves = set(self.keys)
        for p in parents:
            kids = children_of(p)
            if not all(c in leaves for c in kids):
                raise KeyError(f"children of {p} are not all leaves")
            leaves.difference_update(kids)
            leaves.add(p)
        return AdaptiveTree(leaves, self.L_max, check=False)

    def coarsenable_parents(self) -> list[Key]:
        """Parents whose four children are all leaves."""
        seen = set()
        out = []
        for k in self.keys:
            if k[0] == 0:
                continue
            p = parent_of(k)
            if p in seen:
                continue
            seen.add(p)
            if all(c in self.index for c in children_of(p)):
                out.append(p)
        return out

    def can_coarsen(self, parent: Key, leaves: set | None = None) -> bool:
        """Whether merging the children of ``parent`` keeps the 2:1 balance."""
        leaves = set(self.keys) if leaves is None else leaves
        return _merge_keeps_balance(parent, leaves)

    def balanced(self) -> "AdaptiveTree":
        """2:1 balanced refinement of this tree (edge and corner neighbors, periodic)."""
        leaves = set(self.keys)
        buckets: dict[int, list[Key]] = {}
        for k in leaves:
            buckets.setdefault(k[0], []).append(k)
        changed = False
        top = max(buckets)
        for l in range(top, 1, -1):
            n = 1 << l
            for key in list(buckets.get(l, ())):
                if key not in leaves:
                    continue
                _, i, j = key
                for di, dj in DIRS8:
                    nk = (l, (i + di) % n, (j + dj) % n)
                    c = _covering(leaves, nk)
                    while c is not None and c[0] < l - 1:
                        leaves.remove(c)
                        kids = children_of(c)
                        leaves.update(kids)
                        for kid in kids:
                            buckets.setdefault(kid[0], []).append(kid)
                        changed = True
                        c = _covering(leaves, nk)
        if not changed:
            return self
        return AdaptiveTree(leaves, self.L_max, check=False)

    def union(self, *others: "AdaptiveTree") -> "AdaptiveTree":
        """Coarsest common refinement (finest leaf wins in every region)."""
        leaves = set(self.keys)
        for other in others:
            for k in other.keys:
                if k in leaves:
                    continue
                c = _covering(leaves, k)
                if c is None:
                    continue  # already finer here
                # split c down to k
                while c != k:
                    leaves.remove(c)
                    kids = children_of(c)
                    leaves.update(kids)
                    shift = k[0] - c[0] - 1
                    c = (c[0] + 1, k[1] >> shift, k[2] >> shift)
        L = max([self.L_max] + [o.L_max for o in others])
        return AdaptiveTree(leaves, L, check=False)


def _covering(leaves: set, key: Key) -> Key | None:
    l, i, j = key
    for m in range(l, -1, -1):
        k = (m, i >> (l - m), j >> (l - m))
        if k in leaves:
            return k
    return None


def _merge_keeps_balance(parent: Key, leaves: set) -> bool:
    # after the merge, every leaf touching `parent` must have level <= l + 1
    l, i, j = parent
    n = 1 << l
    for di, dj in DIRS8:
        nk = (l, (i + di) % n, (j + dj) % n)
        if _covering(leaves, nk) is not None:
            continue
        # nk is subdivided: its children facing `parent` must be leaves
        for child, (dx, dy) in zip(children_of(nk), cp.CHILD_OFFSETS):
            if (di == 1 and dx == 1) or (di == -1 and dx == 0):
                continue
            if (dj == 1 and dy == 1) or (dj == -1 and dy == 0):
                continue
            if child not in leaves:
                return False
    return True


def brute_force_neighbors(tree: AdaptiveTree, key: Key) -> list[Key]:
    """O(N_b) scan of all leaves; reference for :meth:`AdaptiveTree.neighbors`."""
    return [k for k in tree.keys if k != key and boxes_touch(k, key)]


def brute_force_balanced(tree: AdaptiveTree) -> bool:
    """O(N_b^2) pair scan of the 2:1 periodic balance condition."""
    keys = tree.keys
    for a in range(len(keys)):
        for b in range(a + 1, len(keys)):
            if abs(keys[a][0] - keys[b][0]) > 1 and boxes_touch(keys[a], keys[b]):
                return False
    return True


# ---------------------------------------------------------------------------
# fields


@dataclass
class TreeField:
    """A p-component field stored as K x K node values on every leaf.

    ``vals`` has shape (n_leaves, p, K, K) in the tree's Morton leaf order.
    """

    tree: AdaptiveTree
    vals: np.ndarray
    t: float = 0.0
    unresolved: list = dc_field(default_factory=list)

    def __post_init__(self):
        self.vals = np.asarray(self.vals, dtype=float)
        if self.vals.ndim != 4 or self.vals.shape[0] != len(self.tree):
            raise ValueError(f"vals shape {self.vals.shape} does not match tree")
        self._coeffs = None

    @property
    def p(self) -> int:
        return self.vals.shape[1]

    @property
    def K(self) -> int:
        return self.vals.shape[-1]

    @property
    def coeffs(self) -> np.ndarray:
        if self._coeffs is None:
            self._coeffs = cp.vals2coeffs(self.vals)
        return self._coeffs

    def n_points(self) -> int:
        return self.vals.shape[0] * self.K * self.K

    def nodes(self):
        return self.tree.nodes(self.K)

    def patch(self, key: Key, comp: int = 0) -> cp.ChebPatch:
        n = self.tree.index[key]
        cx, cy = box_center(*key)
        return cp.ChebPatch(self.coeffs[n, comp], (float(cx), float(cy)), 2.0 ** -key[0])

    def component(self, c: int) -> "TreeField":
        return TreeField(self.tree, self.vals[:, c : c + 1], self.t)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.vals))) if self.vals.size else 0.0

    def resolution_errors(self, metric: str = "shell") -> np.ndarray:
        """Per-leaf maximum over components of a coefficient-based error estimate."""
        return np.max(cp.resolution_error(self.coeffs, metric), axis=1)

    def __call__(self, x, y) -> np.ndarray:
        return eval_field(self, x, y)

    def with_vals(self, vals, t=None) -> "TreeField":
        return TreeField(self.tree, vals, self.t if t is None else t)

    def copy(self) -> "TreeField":
        return TreeField(self.tree, self.vals.copy(), self.t, list(self.unresolved))

    def mean(self) -> np.ndarray:
        """Domain average of each component (exact Chebyshev quadrature)."""
        K = self.K
        w = _cheb_integral_weights(K)
        per = np.einsum("m,bcmn,n->bc", w, self.coeffs, w)
        area = 0.25 * self.tree.side**2
        return per.T @ area


def _cheb_integral_weights(K: int) -> np.ndarray:
    # integral over [-1, 1] of T_n
    n = np.arange(K)
    w = np.where(n % 2 == 0, 2.0 / (1.0 - n.astype(float) ** 2 + (n == 1)), 0.0)
    return w


def eval_field(field: TreeField, x, y, chunk: int = 65536) -> np.ndarray:
    """Values (p, *shape) of a field at points wrapped periodically into D."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    shape = np.broadcast(x, y).shape
    xf = np.broadcast_to(x, shape).ravel()
    yf = np.broadcast_to(y, shape).ravel()
    xf = np.mod(xf + 0.5, 1.0) - 0.5
    yf = np.mod(yf + 0.5, 1.0) - 0.5
    tree = field.tree
    K = field.K
    out = np.empty((field.p, xf.size))
    coeffs = field.coeffs
    cx_all, cy_all = tree.centers
    side = tree.side
    for s in range(0, xf.size, chunk):
        xs, ys = xf[s : s + chunk], yf[s : s + chunk]
        idx = tree.locate(xs, ys)
        xi = np.clip(2.0 * (xs - cx_all[idx]) / side[idx], -1.0, 1.0)
        eta = np.clip(2.0 * (ys - cy_all[idx]) / side[idx], -1.0, 1.0)
        Tx = cp.cheb_vandermonde(xi, K)
        Ty = cp.cheb_vandermonde(eta, K)
        out[:, s : s + chunk] = np.einsum("pm,pcmn,pn->cp", Ty, coeffs[idx], Tx, optimize=True)
    return out.reshape((field.p,) + shape)


def resample_to_tree(field: TreeField, target: AdaptiveTree) -> TreeField:
    """Field values at the nodes of ``target``; exact where ``target`` refines the source."""
    if target is field.tree or target == field.tree:
        return TreeField(target, field.vals.copy(), field.t)
    K = field.K
    vals = np.empty((len(target), field.p, K, K))
    src = field.tree
    same = [n for n, k in enumerate(target.keys) if k in src.index]
    other = [n for n, k in enumerate(target.keys) if k not in src.index]
    if same:
        vals[same] = field.vals[[src.index[target.keys[n]] for n in same]]
    finer, anc, coarser = [], [], []
    for n in other:
        l, i, j = target.keys[n]
        for dl in range(1, l + 1):
            a = src.index.get((l - dl, i >> dl, j >> dl))
            if a is not None:
                finer.append(n)
                anc.append(a)
                break
        else:
            coarser.append(n)
    if finer:
        vals[finer] = _interp_down(field, target, np.array(finer), np.array(anc))
    if coarser:
        X, Y = target.nodes(K)
        ev = eval_field(field, X[coarser], Y[coarser])  # (p, m, K, K)
        vals[coarser] = np.moveaxis(ev, 0, 1)
    return TreeField(target, vals, field.t)


def _interp_down(field: TreeField, target: AdaptiveTree, idx: np.ndarray, anc: np.ndarray) -> np.ndarray:
    """Source polynomials evaluated at the nodes of descendant target leaves."""
    K = field.K
    src = field.tree
    t = cp.cheb_nodes(K)
    ratio = target.side[idx] / src.side[anc]
    tcx, tcy = target.centers
    scx, scy = src.centers
    ox = 2.0 * (tcx[idx] - scx[anc]) / src.side[anc]
    oy = 2.0 * (tcy[idx] - scy[anc]) / src.side[anc]
    Tx = cp.cheb_vandermonde(ox[:, None] + ratio[:, None] * t[None, :], K)  # (n, K, K)
    Ty = cp.cheb_vandermonde(oy[:, None] + ratio[:, None] * t[None, :], K)
    C = field.coeffs[anc]
    return np.einsum("nam,ncmk,nbk->ncab", Ty, C, Tx, optimize=True)


def common_tree(*fields: TreeField, balance: bool = True) -> AdaptiveTree:
    trees = [f.tree for f in fields]
    t = trees[0]
    if all(tr == t for tr in trees[1:]):
        return t
    u = t.union(*trees[1:])
    return u.balanced() if balance else u


def combine(terms: list[tuple[float, TreeField]], tree: AdaptiveTree | None = None) -> TreeField:
    """sum_k a_k f_k on the common refinement of the operand trees."""
    fields = [f for _, f in terms]
    tree = common_tree(*fields) if tree is None else tree
    out = None
    for a, f in terms:
        v = resample_to_tree(f, tree).vals
        out = a * v if out is None else out + a * v
    return TreeField(tree, out, fields[0].t)


def sample_function(f: Callable, tree: AdaptiveTree, K: int, p: int | None = None) -> np.ndarray:
    """Evaluate f(x, y) -> (p, ...) or (...) at the nodes of every leaf: (n, p, K, K)."""
    X, Y = tree.nodes(K)
    v = np.asarray(f(np.ascontiguousarray(X), np.ascontiguousarray(Y)), dtype=float)
    if v.ndim == 3:
        v = v[None]
    return np.moveaxis(v, 0, 1).copy()


def _eval_keys(f: Callable, keys: list[Key], K: int) -> np.ndarray:
    X, Y = _nodes_for_keys(keys, K)
    v = np.asarray(f(X, Y), dtype=float)
    if v.ndim == 3:
        v = v[None]
    return np.moveaxis(v, 0, 1)


def build_adaptive(
    f: Callable,
    eps: float,
    K: int = 8,
    L_max: int = 12,
    start: AdaptiveTree | None = None,
    scale: float | None = None,
    t: float = 0.0,
    metric: str = "interp",
    balance: bool = True,
) -> TreeField:
    """Adaptively resolve ``f`` on a balanced tree.

    A leaf is accepted when its error estimate is <= eps * scale, where
    ``scale`` defaults to the largest |f| seen at any node.  With
    ``metric="interp"`` the estimate is the max misfit between the leaf
    interpolant and ``f`` on the four child grids (the children are kept if the
    leaf is split); "shell" and "tail" use the leaf's own coefficients.

    Leaves at ``L_max`` that are still unresolved end up in
    ``field.unresolved`` and are logged; they are not an error.
    """
    base = start if start is not None else AdaptiveTree.root(L_max)
    done: dict[Key, np.ndarray] = {}
    pending = list(base.keys)
    pend_vals = _eval_keys(f, pending, K)
    run_scale = float(np.max(np.abs(pend_vals)))
    unresolved = []
    while pending:
        V = pend_vals
        if metric == "interp":
            kids = [c for k in pending for c in children_of(k)]
            kid_vals = _eval_keys(f, kids, K).reshape(len(pending), 4, -1, K, K)
            run_scale = max(run_scale, float(np.max(np.abs(kid_vals))))
            interp = cp.interp_to_children(V)  # (n, p, 4, K, K)
            err = np.max(np.abs(np.moveaxis(interp, 2, 1) - kid_vals), axis=(1, 2, 3, 4))
        else:
            err = np.max(cp.resolution_error(cp.vals2coeffs(V), metric), axis=1)
        tol = eps * (run_scale if scale is None else scale)
        split = []
        for n, (k, e) in enumerate(zip(pending, err)):
            if e > tol and k[0] < L_max:
                split.append(n)
            else:
                if e > tol:
                    unresolved.append(k)
                done[k] = V[n]
        if not split:
            break
        if metric == "interp":
            pend_vals = kid_vals[split].reshape(-1, *kid_vals.shape[2:])
            pending = [c for n in split for c in children_of(pending[n])]
        else:
            pending = [c for n in split for c in children_of(pending[n])]
            pend_vals = _eval_keys(f, pending, K)
            run_scale = max(run_scale, float(np.max(np.abs(pend_vals))))
    tree = AdaptiveTree(done.keys(), L_max)
    if balance:
        bt = tree.balanced()
        if bt is not tree:
            new = [k for k in bt.keys if k not in done]
            done.update(zip(new, _eval_keys(f, new, K)))
            tree = bt
    vals = np.stack([done[k] for k in tree.keys])
    if unresolved:
        log.warning("build_adaptive: %d leaves at L_max=%d unresolved", len(unresolved), L_max)
    return TreeField(tree, vals, t, unresolved)


def _nodes_for_keys(keys: list[Key], K: int) -> tuple[np.ndarray, np.ndarray]:
    arr = np.array(keys, dtype=np.int64).reshape(-1, 3)
    cx, cy = box_center(arr[:, 0], arr[:, 1], arr[:, 2])
    h = 0.5 * 2.0 ** (-arr[:, 0].astype(float))
    t = cp.cheb_nodes(K)
    X = cx[:, None, None] + h[:, None, None] * t[None, None, :]
    Y = cy[:, None, None] + h[:, None, None] * t[None, :, None]
    return np.broadcast_to(X, (len(keys), K, K)).copy(), np.broadcast_to(Y, (len(keys), K, K)).copy()


def refine_field(field: TreeField, keys: Iterable[Key]) -> TreeField:
    """Split leaves, carrying the parent polynomial exactly onto the children."""
    tree = field.tree.refine(keys)
    return resample_to_tree(field, tree)


def balance_field(field: TreeField) -> TreeField:
    tree = field.tree.balanced()
    if tree is field.tree:
        return field
    return resample_to_tree(field, tree)


def field_gradient(field: TreeField) -> tuple[TreeField, TreeField]:
    """Per-leaf Chebyshev derivatives (d/dx, d/dy) of every component."""
    side = field.tree.side[:, None]
    C = field.coeffs
    dx = cp.coeffs2vals(cp.diff_coeffs(C, "x", side))
    dy = cp.coeffs2vals(cp.diff_coeffs(C, "y", side))
    return TreeField(field.tree, dx, field.t), TreeField(field.tree, dy, field.t)


# ---------------------------------------------------------------------------
# per-step refinement and coarsening


@dataclass
class AdaptResult:
    u: TreeField
    F: TreeField
    unresolved: list
    n_refined: int = 0
    n_coarsened: int = 0
    n_evals: int = 0


def _misfit(parent_vals: np.ndarray, kid_vals: np.ndarray) -> np.ndarray:
    """Max |parent interpolant - child values| per parent; kid_vals is (n, 4, p, K, K)."""
    interp = np.moveaxis(cp.interp_to_children(parent_vals), 2, 1)
    return np.max(np.abs(interp - kid_vals), axis=(1, 2, 3, 4))


def spatial_adap(
    tree: AdaptiveTree,
    provider: Callable,
    eps: float,
    K: int,
    test_u: bool = True,
    coarsen: bool = True,
    L_max: int | None = None,
    t: float = 0.0,
) -> AdaptResult:
    """Refine and coarsen ``tree`` for the fields produced by ``provider``.

    ``provider(X, Y)`` maps node arrays of shape (n, K, K) to the pair
    (u, F) of value arrays (n, p, K, K) and (n, q, K, K).  A leaf is split
    when the interpolant of F (and of u if ``test_u``) misses the provider's
    values on the child grids by more than eps times the field's max; sibling
    quadruples are merged, finest level first, when the parent interpolant
    reproduces both u and F on the children to the same tolerance and the
    merge keeps the 2:1 balance.  The same misfit drives both phases, so a
    second call on the result changes nothing.
    """
    L_max = tree.L_max if L_max is None else L_max
    n_evals = 0

    def call(keys):
        nonlocal n_evals
        n_evals += len(keys)
        X, Y = _nodes_for_keys(keys, K)
        U, F = provider(X, Y)
        return np.asarray(U, float), np.asarray(F, float)

    pending = list(tree.keys)
    PU, PF = call(pending)
    su = float(np.max(np.abs(PU)))
    sF = float(np.max(np.abs(PF)))
    vu: dict[Key, np.ndarray] = {}
    vF: dict[Key, np.ndarray] = {}
    unresolved = []
    n_ref = 0
    while pending:
        kids = [c for k in pending for c in children_of(k)]
        KU, KF = call(kids)
        KU = KU.reshape(len(pending), 4, *KU.shape[1:])
        KF = KF.reshape(len(pending), 4, *KF.shape[1:])
        su = max(su, float(np.max(np.abs(KU))))
        sF = max(sF, float(np.max(np.abs(KF))))
        bad = _misfit(PF, KF) > eps * sF
        if test_u:
            bad |= _misfit(PU, KU) > eps * su
        split = []
        for n, k in enumerate(pending):
            if bad[n] and k[0] < L_max:
                split.append(n)
            else:
                if bad[n]:
                    unresolved.append(k)
                vu[k] = PU[n]
                vF[k] = PF[n]
        n_ref += len(split)
        new_pending = [c for n in split for c in children_of(pending[n])]
        PU = KU[split].reshape(-1, *KU.shape[2:])
        PF = KF[split].reshape(-1, *KF.shape[2:])
        if not new_pending:
            # balance, then put any leaves it created through the same test
            bt = AdaptiveTree(vu.keys(), L_max, check=False).balanced()
            extra = [k for k in bt.keys if k not in vu]
            if not extra:
                break
            for k in list(vu):
                if k not in bt.index:
                    del vu[k]
                    del vF[k]
            new_pending = extra
            PU, PF = call(extra)
        pending = new_pending
    leaves = set(vu)
    n_co = 0
    if coarsen:
        depth = max(k[0] for k in leaves)
        for l in range(depth, 0, -1):
            parents = sorted({(l - 1, i >> 1, j >> 1) for (ll, i, j) in leaves if ll == l})
            cand = [pk for pk in parents if all(c in leaves for c in children_of(pk))]
            if not cand:
                continue
            PU, PF = call(cand)
            KU = np.stack([np.stack([vu[c] for c in children_of(pk)]) for pk in cand])
            KF = np.stack([np.stack([vF[c] for c in children_of(pk)]) for pk in cand])
            ok = (_misfit(PU, KU) <= eps * su) & (_misfit(PF, KF) <= eps * sF)
            for n, pk in enumerate(cand):
                if ok[n] and _merge_keeps_balance(pk, leaves):
                    for c in children_of(pk):
                        leaves.remove(c)
                        del vu[c], vF[c]
                    leaves.add(pk)
                    vu[pk] = PU[n]
                    vF[pk] = PF[n]
                    n_co += 1
    out_tree = AdaptiveTree(leaves, L_max, check=False)
    unresolved = [k for k in unresolved if k in out_tree.index]
    if unresolved:
        log.warning("spatial_adap: %d leaves at L_max=%d unresolved", len(unresolved), L_max)
    U = TreeField(out_tree, np.stack([vu[k] for k in out_tree.keys]), t, unresolved)
    F = TreeField(out_tree, np.stack([vF[k] for k in out_tree.keys]), t)
    return AdaptResult(U, F, unresolved, n_ref, n_co, n_evals)
