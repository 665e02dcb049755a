"""Gauss-Hermite and sparse-grid quadrature for the standard normal measure."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from math import comb

import numpy as np
from numpy.polynomial.hermite_e import hermegauss


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes (Q, M) and weights (Q,) for the M-dimensional standard normal."""

    nodes: np.ndarray
    weights: np.ndarray
    level: int = 0

    @property
    def size(self) -> int:
        return len(self.weights)

    def integrate(self, values) -> np.ndarray:
        """Weighted sum over the leading (node) axis."""
        return np.tensordot(self.weights, np.asarray(values, float), axes=(0, 0))


def gauss_hermite(n: int):
    """``n``-point rule for N(0, 1), exact up to degree 2n - 1."""
    x, w = hermegauss(n)
    return x, w / np.sqrt(2.0 * np.pi)


def tensor_rule(dim: int, n: int) -> QuadratureRule:
    x, w = gauss_hermite(n)
    nodes = np.array(list(product(x, repeat=dim)))
    weights = np.prod(np.array(list(product(w, repeat=dim))), axis=1)
    return QuadratureRule(nodes, weights, n)


def _levels(dim, total):
    """Level vectors with entries >= 1 summing to ``total``."""
    if dim == 1:
        yield (total,)
        return
    for first in range(1, total - dim + 2):
        for rest in _levels(dim - 1, total - first):
            yield (first,) + rest


def smolyak_rule(dim: int, level: int, decimals: int = 12) -> QuadratureRule:
    """Sparse grid from the combination technique over i-point Gauss-Hermite rules.

    Exact for polynomials of total degree up to ``2 * level - 1``.  Coinciding
    nodes of the component tensor rules are merged and tiny cancelled weights
    are kept so the rule stays exact.
    """
    if dim < 1 or level < 1:
        raise ValueError("need dim >= 1 and level >= 1")
    q = level + dim - 1
    acc = {}
    for total in range(max(dim, q - dim + 1), q + 1):
        coef = (-1) ** (q - total) * comb(dim - 1, q - total)
        for lv in _levels(dim, total):
            rules = [gauss_hermite(i) for i in lv]
            for combo in product(*[range(i) for i in lv]):
                pt = tuple(rules[d][0][c] for d, c in enumerate(combo))
                w = coef * np.prod([rules[d][1][c] for d, c in enumerate(combo)])
                key = tuple(np.round(pt, decimals) + 0.0)
                if key in acc:
                    acc[key][1] += w
                else:
                    acc[key] = [np.array(pt), w]
    keys = sorted(acc)
    nodes = np.array([acc[k][0] for k in keys])
    weights = np.array([acc[k][1] for k in keys])
    keep = np.abs(weights) > 1e-15
    return QuadratureRule(nodes[keep], weights[keep], level)
