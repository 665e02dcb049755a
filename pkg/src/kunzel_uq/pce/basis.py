"""Multivariate probabilists' Hermite polynomials and their algebra."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from math import comb, factorial

import numpy as np

MAX_TERMS = 200_000


@dataclass(frozen=True)
class MultiIndexSet:
    """Total-degree index set in graded-lexicographic order; ``indices`` is (R, M)."""

    dim: int
    degree: int
    indices: np.ndarray

    @property
    def size(self) -> int:
        return len(self.indices)

    def norms(self) -> np.ndarray:
        return hermite_norm(self.indices)

    def total_degree(self) -> np.ndarray:
        return self.indices.sum(axis=1)


def n_terms(dim: int, degree: int) -> int:
    return comb(dim + degree, degree)


def _compositions(dim, total):
    """All length-``dim`` nonnegative tuples summing to ``total``, largest first entry first."""
    out = []
    for picks in combinations_with_replacement(range(dim), total):
        alpha = [0] * dim
        for k in picks:
            alpha[k] += 1
        out.append(tuple(alpha))
    return sorted(out, reverse=True)


def build_index_set(dim: int, degree: int) -> MultiIndexSet:
    if dim < 1 or degree < 0:
        raise ValueError("need dim >= 1 and degree >= 0")
    size = n_terms(dim, degree)
    if size > MAX_TERMS:
        raise OverflowError(f"index set with {size} terms exceeds the limit of {MAX_TERMS}")
    rows = [a for d in range(degree + 1) for a in _compositions(dim, d)]
    return MultiIndexSet(dim, degree, np.array(rows, dtype=np.int64).reshape(size, dim))


def hermite_table(x, max_degree: int) -> np.ndarray:
    """He_0..He_max_degree at ``x``; the degree becomes the last axis."""
    x = np.asarray(x, float)
    out = np.empty(x.shape + (max_degree + 1,))
    out[..., 0] = 1.0
    if max_degree >= 1:
        out[..., 1] = x
    for k in range(1, max_degree):
        out[..., k + 1] = x * out[..., k] - k * out[..., k - 1]
    return out


def hermite_eval(indices, xi) -> np.ndarray:
    """Products of univariate Hermite polynomials.

    ``indices`` is (R, M) (or a single (M,) index), ``xi`` is (..., M); the
    result has shape (..., R) (or (...) for a single index).
    """
    indices = np.asarray(indices, dtype=np.int64)
    single = indices.ndim == 1
    indices = np.atleast_2d(indices)
    xi = np.asarray(xi, float)
    if xi.shape[-1] != indices.shape[1]:
        raise ValueError("xi and multi-indices differ in dimension")
    table = hermite_table(xi, int(indices.max(initial=0)))  # (..., M, D+1)
    vals = np.ones(xi.shape[:-1] + (len(indices),))
    for k in range(indices.shape[1]):
        vals = vals * table[..., k, :][..., indices[:, k]]
    return vals[..., 0] if single else vals


def hermite_norm(indices) -> np.ndarray:
    """E[H_alpha^2] = prod_k alpha_k!."""
    indices = np.asarray(indices, dtype=np.int64)
    fact = np.array([factorial(k) for k in range(int(indices.max(initial=0)) + 1)], dtype=float)
    return np.prod(fact[indices], axis=-1)


def univariate_triple(i, j, k) -> float:
    """E[He_i He_j He_k] for a standard normal variable."""
    total = i + j + k
    if total % 2:
        return 0.0
    s = total // 2
    if s < max(i, j, k):
        return 0.0
    return factorial(i) * factorial(j) * factorial(k) / (
        factorial(s - i) * factorial(s - j) * factorial(s - k))


@dataclass(frozen=True)
class TripleProducts:
    """Nonzero entries of E[H_a H_b H_c] stored in coordinate form."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    values: np.ndarray
    size: int

    def dense(self) -> np.ndarray:
        out = np.zeros((self.size,) * 3)
        out[self.a, self.b, self.c] = self.values
        return out

    def multiply(self, x, y) -> np.ndarray:
        """Galerkin product: coefficients of the projection of (sum x_a H_a)(sum y_b H_b).

        ``x`` and ``y`` have the basis on their first axis.
        """
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        out = np.zeros(np.broadcast_shapes(x.shape, y.shape))
        np.add.at(out, self.c, self.values.reshape((-1,) + (1,) * (out.ndim - 1)) * x[self.a] * y[self.b])
        norms = np.zeros(self.size)
        diag = (self.a == self.c) & (self.b == 0)
        norms[self.c[diag]] = self.values[diag]
        return out / norms.reshape((-1,) + (1,) * (out.ndim - 1))


def triple_products(index_set: MultiIndexSet) -> TripleProducts:
    """Closed-form triple products, composed dimension by dimension."""
    idx = index_set.indices
    R = len(idx)
    top = int(idx.max(initial=0))
    uni = np.zeros((top + 1,) * 3)
    for i in range(top + 1):
        for j in range(top + 1):
            for k in range(top + 1):
                uni[i, j, k] = univariate_triple(i, j, k)
    vals = np.ones((R, R, R))
    for d in range(idx.shape[1]):
        col = idx[:, d]
        vals *= uni[np.ix_(col, col, col)]
    a, b, c = np.nonzero(vals)
    return TripleProducts(a, b, c, vals[a, b, c], R)
