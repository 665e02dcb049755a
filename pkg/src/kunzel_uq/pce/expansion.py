"""Polynomial chaos expansions of transient responses: evaluation, projection, storage."""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .basis import MultiIndexSet, hermite_eval, hermite_norm
from .quadrature import QuadratureRule

FORMAT_VERSION = 1


@dataclass
class PCExpansion:
    """Coefficients ``coeffs[t, alpha, dof]`` of a response over time steps."""

    index_set: MultiIndexSet
    coeffs: np.ndarray  # (T, R, D)
    times: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, float)
        if self.coeffs.ndim != 3 or self.coeffs.shape[1] != self.index_set.size:
            raise ValueError("coefficients must have shape (T, R, D) matching the index set")

    @property
    def dim(self) -> int:
        return self.index_set.dim

    @property
    def mean(self) -> np.ndarray:
        return self.coeffs[:, 0]

    @property
    def variance(self) -> np.ndarray:
        norms = self.index_set.norms()
        return np.einsum("a,tad->td", norms[1:], self.coeffs[:, 1:] ** 2)

    def basis_values(self, xi) -> np.ndarray:
        return hermite_eval(self.index_set.indices, xi)

    def evaluate(self, xi, columns=None) -> np.ndarray:
        """Response at ``xi`` (M,) or (B, M): shape (T, D) or (B, T, D)."""
        h = self.basis_values(xi)
        c = self.coeffs if columns is None else self.coeffs[:, :, columns]
        return np.einsum("...a,tad->...td", h, c)

    def restrict(self, steps, dofs) -> "PCExpansion":
        """Sub-expansion on selected time steps and degrees of freedom."""
        steps = np.asarray(steps)
        return PCExpansion(self.index_set, self.coeffs[steps][:, :, dofs], self.times[steps], dict(self.meta))


def surrogate_eval(pce: PCExpansion, xi):
    """Transient solution(s) predicted by the expansion at ``xi``."""
    from ..fem.timestepping import TransientSolution

    return TransientSolution(states=pce.evaluate(xi), times=pce.times.copy())


def project(rule: QuadratureRule, index_set: MultiIndexSet, values) -> np.ndarray:
    """Spectral coefficients E[v H_alpha] / E[H_alpha^2] of node values ``values[q, ...]``."""
    values = np.asarray(values, float)
    h = hermite_eval(index_set.indices, rule.nodes) * rule.weights[:, None]
    coeffs = np.tensordot(h, values, axes=(0, 0))
    return coeffs / hermite_norm(index_set.indices).reshape((-1,) + (1,) * (values.ndim - 1))


def error_expectation(reference, approx, tiny: float = 1e-12) -> float:
    """Sample mean of the summed relative deviation ``sum |a - b| / |a|``.

    Both arguments have shape (S, ...) with samples first; all other axes
    (nodes, time steps) are summed.
    """
    a = np.asarray(reference, float)
    b = np.asarray(approx, float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if np.any(np.abs(a) < tiny):
        raise ValueError("reference values too close to zero for a relative error")
    rel = np.abs(a - b) / np.abs(a)
    return float(rel.reshape(len(a), -1).sum(axis=1).mean())


def _npy_bytes(arr) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_expansion(pce: PCExpansion, path) -> Path:
    """Write a zip container with fixed timestamps so equal inputs give equal bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": FORMAT_VERSION,
        "dim": pce.index_set.dim,
        "degree": pce.index_set.degree,
        "n_terms": pce.index_set.size,
        "meta": pce.meta,
    }
    members = {
        "header.json": (json.dumps(header, sort_keys=True, indent=2) + "\n").encode(),
        "indices.npy": _npy_bytes(pce.index_set.indices),
        "coeffs.npy": _npy_bytes(pce.coeffs),
        "times.npy": _npy_bytes(pce.times),
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, data in members.items():
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)
    return path


def load_expansion(path) -> PCExpansion:
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported surrogate version {header.get('version')!r}")
        arrays = {k: np.load(io.BytesIO(zf.read(f"{k}.npy")), allow_pickle=False)
                  for k in ("indices", "coeffs", "times")}
    index_set = MultiIndexSet(header["dim"], header["degree"], arrays["indices"])
    return PCExpansion(index_set, arrays["coeffs"], arrays["times"], header["meta"])
