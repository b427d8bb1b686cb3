"""Binary snapshot format for tree fields.

Layout (all little-endian)::

    magic   8 bytes  b"PPTREE\\x00\\x01"
    version u32
    K       u32
    p       u32
    n_leaf  u32
    eps     f64
    t       f64
    then n_leaf records in Morton order:
        level u8, i u32, j u32, p*K*K f64 Chebyshev coefficients
        (component-major, then coeffs[m, n] row-major)

Coefficients rather than node values are stored so that reading and writing
again reproduces the file byte for byte.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .adaptree import AdaptiveTree, TreeField
from . import chebpatch as cp

MAGIC = b"PPTREE\x00\x01"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIdd")
_REC = np.dtype([("level", "<u1"), ("i", "<u4"), ("j", "<u4")])


class FormatError(ValueError):
    pass


def to_bytes(field: TreeField, eps: float = 0.0) -> bytes:
    tree = field.tree
    n, p, K = len(tree), field.p, field.K
    rec = np.dtype(_REC.descr + [("c", "<f8", (p * K * K,))])
    arr = np.empty(n, dtype=rec)
    arr["level"] = tree.level
    arr["i"] = tree.ix
    arr["j"] = tree.iy
    arr["c"] = field.coeffs.reshape(n, -1)
    head = _HEADER.pack(MAGIC, VERSION, K, p, n, float(eps), float(field.t))
    return head + arr.tobytes()


def from_bytes(data: bytes, L_max: int = 12) -> tuple[TreeField, float]:
    if len(data) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, K, p, n, eps, t = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError("bad magic")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    rec = np.dtype(_REC.descr + [("c", "<f8", (p * K * K,))])
    body = data[_HEADER.size :]
    if len(body) != n * rec.itemsize:
        raise FormatError("record block size mismatch")
    arr = np.frombuffer(body, dtype=rec, count=n)
    keys = [(int(a), int(b), int(c)) for a, b, c in zip(arr["level"], arr["i"], arr["j"])]
    depth = max(k[0] for k in keys)
    tree = AdaptiveTree(keys, max(L_max, depth))
    if tree.keys != keys:
        raise FormatError("leaves not in Morton order")
    coeffs = np.array(arr["c"], dtype=float).reshape(n, p, K, K)
    field = TreeField(tree, cp.coeffs2vals(coeffs), t)
    field._coeffs = coeffs
    return field, eps


def write(path, field: TreeField, eps: float = 0.0) -> None:
    Path(path).write_bytes(to_bytes(field, eps))


def read(path, L_max: int = 12) -> tuple[TreeField, float]:
    return from_bytes(Path(path).read_bytes(), L_max)
