"""Lognormal material fields from one truncated Karhunen-Loeve expansion.

All eight material parameters share a single standard Gaussian field with
an exponential covariance, so their log-fields are perfectly correlated and
differ only in their lognormal moments.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .coefficients import PARAM_NAMES, PRIOR_TABLE, MaterialParams


def gaussian_moments(mu_q, sigma_q):
    """Mean and standard deviation of ``log q`` for a lognormal ``q``.

    ``sigma_q = 0`` is accepted and gives the deterministic limit.
    """
    mu_q = np.asarray(mu_q, dtype=float)
    sigma_q = np.asarray(sigma_q, dtype=float)
    if np.any(mu_q <= 0):
        raise ValueError("lognormal mean must be positive")
    if np.any(sigma_q < 0):
        raise ValueError("lognormal standard deviation must be nonnegative")
    var_g = np.log1p((sigma_q / mu_q) ** 2)
    return np.log(mu_q) - 0.5 * var_g, np.sqrt(var_g)


@dataclass(frozen=True)
class LogNormalSpec:
    mu_q: float
    sigma_q: float

    @property
    def mu_g(self) -> float:
        return float(gaussian_moments(self.mu_q, self.sigma_q)[0])

    @property
    def sigma_g(self) -> float:
        return float(gaussian_moments(self.mu_q, self.sigma_q)[1])


def prior_specs(scale: float = 1.0) -> dict:
    """Lognormal specs from the prior table; ``scale`` multiplies every std."""
    return {k: LogNormalSpec(m, scale * s) for k, (m, s) in PRIOR_TABLE.items()}


@dataclass(frozen=True)
class ExponentialKernel:
    """``exp(-|dx|/lx - |dy|/ly)``, a separable exponential correlation."""

    lx: float = 0.1
    ly: float = 0.04

    def __post_init__(self):
        if self.lx <= 0 or self.ly <= 0:
            raise ValueError("correlation lengths must be positive")

    def __call__(self, a, b):
        a = np.asarray(a, float)
        b = np.asarray(b, float)
        dx = np.abs(a[:, None, 0] - b[None, :, 0])
        dy = np.abs(a[:, None, 1] - b[None, :, 1])
        return np.exp(-dx / self.lx - dy / self.ly)


def covariance_matrix(points, kernel: ExponentialKernel) -> np.ndarray:
    pts = np.asarray(points, float)
    return kernel(pts, pts)


@dataclass(frozen=True)
class KLEBasis:
    """Leading eigenpairs of a unit-variance covariance matrix.

    ``eigenvalues`` holds the full descending spectrum, ``modes`` the first
    ``M`` eigenvectors as columns.
    """

    eigenvalues: np.ndarray
    modes: np.ndarray
    points: np.ndarray
    kernel: ExponentialKernel

    @property
    def n_modes(self) -> int:
        return self.modes.shape[1]

    @property
    def n_points(self) -> int:
        return self.modes.shape[0]

    def captured_variance(self, m: int | None = None) -> float:
        """Fraction of the total variance carried by the first ``m`` modes."""
        m = self.n_modes if m is None else m
        lam = np.clip(self.eigenvalues, 0.0, None)
        return float(lam[:m].sum() / lam.sum())

    def truncate(self, m: int) -> "KLEBasis":
        if not 1 <= m <= self.n_modes:
            raise ValueError(f"cannot truncate {self.n_modes} modes to {m}")
        return KLEBasis(self.eigenvalues, self.modes[:, :m].copy(), self.points, self.kernel)

    def scaled_modes(self) -> np.ndarray:
        """Columns ``sqrt(eigenvalue_i) * mode_i``, shape (n, M)."""
        return self.modes * np.sqrt(np.clip(self.eigenvalues[: self.n_modes], 0.0, None))

    def gaussian_field(self, xi) -> np.ndarray:
        """Standard Gaussian field at the points; ``xi`` is (M,) or (B, M)."""
        xi = np.asarray(xi, float)
        if xi.shape[-1] != self.n_modes:
            raise ValueError(f"xi has {xi.shape[-1]} entries, basis has {self.n_modes} modes")
        return xi @ self.scaled_modes().T

    def to_dict(self) -> dict:
        return {
            "eigenvalues": self.eigenvalues.tolist(),
            "modes": self.modes.ravel().tolist(),
            "shape": list(self.modes.shape),
            "points": self.points.ravel().tolist(),
            "kernel": {"lx": self.kernel.lx, "ly": self.kernel.ly},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KLEBasis":
        shape = tuple(d["shape"])
        return cls(
            eigenvalues=np.asarray(d["eigenvalues"], float),
            modes=np.asarray(d["modes"], float).reshape(shape),
            points=np.asarray(d["points"], float).reshape(shape[0], 2),
            kernel=ExponentialKernel(**d["kernel"]),
        )

    def to_json(self) -> str:
        # repr of floats round-trips exactly, so export/import is bit-exact
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "KLEBasis":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def kle_decompose(cov: np.ndarray, m: int, points=None, kernel: ExponentialKernel | None = None) -> KLEBasis:
    """Dense symmetric eigendecomposition keeping ``m`` modes.

    Each eigenvector's largest-magnitude entry is made positive so that the
    basis is reproducible across platforms.
    """
    cov = np.asarray(cov, float)
    n = cov.shape[0]
    if cov.shape != (n, n) or not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
        raise ValueError("covariance must be a symmetric square matrix")
    if not 1 <= m <= n:
        raise ValueError(f"number of modes must lie in [1, {n}]")
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    vecs = vecs[:, order[:m]]
    pivot = np.argmax(np.abs(vecs), axis=0)
    vecs = vecs * np.sign(vecs[pivot, np.arange(m)])
    pts = np.zeros((n, 2)) if points is None else np.asarray(points, float)
    return KLEBasis(vals, vecs, pts, kernel or ExponentialKernel())


def build_basis(points, kernel: ExponentialKernel, m: int) -> KLEBasis:
    """Covariance at ``points`` followed by :func:`kle_decompose`."""
    return kle_decompose(covariance_matrix(points, kernel), m, points, kernel)


def realize_fields(basis: KLEBasis, specs: dict, xi) -> MaterialParams:
    """Per-point lognormal parameter fields for one or many ``xi``.

    ``xi`` of shape (M,) yields fields of shape (n,), shape (B, M) yields (B, n).
    """
    g = basis.gaussian_field(xi)
    out = {}
    for name in PARAM_NAMES:
        spec = specs[name]
        out[name] = np.exp(spec.mu_g + spec.sigma_g * g)
    return MaterialParams(**out)
