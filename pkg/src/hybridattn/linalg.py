"""Dense float32 kernels with a fixed accumulation order.

Every reduction here sums its terms left to right, one rounding per add, so a
result never depends on BLAS threading, SIMD width or array length.  That is
what lets the hybrid attention path be compared against the monolithic one
with exact equality on logits.

Matrices and vectors are plain ``numpy.ndarray`` objects of dtype float32.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError

DTYPE = np.float32


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=DTYPE)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=DTYPE)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def sequential_sum(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Sum along ``axis`` strictly in index order.

    ``np.add.accumulate`` is a running sum, so its last slice is the
    left-to-right total.  ``np.sum`` uses pairwise summation and would give a
    length-dependent rounding pattern.
    """
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[axis] == 0:
        shape = list(x.shape)
        del shape[axis]
        return np.zeros(shape, dtype=DTYPE)
    return np.take(np.add.accumulate(x, axis=axis, dtype=DTYPE), -1, axis=axis)


def matmul(a, b) -> np.ndarray:
    """Matrix product with sequential accumulation over the inner dimension.

    A 1-D ``a`` is treated as a row vector and a 1-D result is returned.
    """
    a_arr = np.asarray(a, dtype=DTYPE)
    vec = a_arr.ndim == 1
    if vec:
        a_arr = a_arr[None, :]
    a_arr = as_matrix(a_arr, "a")
    b_arr = as_matrix(b, "b")
    if a_arr.shape[1] != b_arr.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a_arr.shape} x {b_arr.shape}"
        )
    m, k = a_arr.shape
    n = b_arr.shape[1]
    out = np.empty((m, n), dtype=DTYPE)
    # chunk rows so the m*k*n product tensor stays small
    rows = max(1, (1 << 22) // max(1, k * n))
    for start in range(0, m, rows):
        stop = min(m, start + rows)
        prod = a_arr[start:stop, :, None] * b_arr[None, :, :]
        out[start:stop] = sequential_sum(prod, axis=1)
    return out[0] if vec else out


def softmax(v) -> np.ndarray:
    """Max-subtracted softmax over a 1-D vector."""
    x = as_vector(v)
    if x.size == 0:
        raise ShapeError("softmax of an empty vector")
    e = np.exp(x - x.max())
    return (e / sequential_sum(e)).astype(DTYPE)


def scaled_dot(q, k, d: int) -> float:
    """``(q . k) / sqrt(d)`` accumulated in float32."""
    qv = as_vector(q, "q")
    kv = as_vector(k, "k")
    if qv.shape != kv.shape:
        raise ShapeError(f"scaled_dot length mismatch: {qv.size} vs {kv.size}")
    dot = sequential_sum(qv * kv)
    return float(DTYPE(dot) / DTYPE(math.sqrt(d)))


def head_logits(q: np.ndarray, keys: np.ndarray, n_heads: int, head_dim: int) -> np.ndarray:
    """Per-head scaled dot products of one query against many keys.

    ``q`` has length ``n_heads*head_dim``; ``keys`` is ``(n, n_heads*head_dim)``.
    Returns an ``(n_heads, n)`` array whose entry ``[h, j]`` equals
    ``scaled_dot(q_h, k_j_h, head_dim)`` bit for bit.  Each token's logit
    depends only on that token's key, so any subset of rows yields the same
    numbers as the full set.
    """
    q = as_vector(q, "q")
    keys = as_matrix(keys, "keys")
    width = n_heads * head_dim
    if q.size != width or keys.shape[1] != width:
        raise ShapeError(
            f"expected width {width}, got q={q.size} keys={keys.shape[1]}"
        )
    qh = q.reshape(n_heads, head_dim)
    kh = keys.reshape(keys.shape[0], n_heads, head_dim)
    prod = kh * qh[None, :, :]
    dots = sequential_sum(prod, axis=2)  # (n, heads)
    return (dots / DTYPE(math.sqrt(head_dim))).T.astype(DTYPE)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))
