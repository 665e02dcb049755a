"""Surrogate accuracy against finite element runs over fresh prior samples.

Two errors are reported per (modes, degree) pair, both for temperature:

* ``pce_only``: surrogate against FE driven by the same truncated field, so
  only the polynomial approximation is measured;
* ``pce_kle``: surrogate against FE driven by the untruncated field, so the
  truncation of the random field is included.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from ..fem.timestepping import NewtonSettings, run_simulation
from ..random_field import KLEBasis, realize_fields
from .expansion import error_expectation
from .galerkin import GalerkinSettings, build_surrogate

STUDY_HEADER = ("modes", "degree", "n_terms", "quadrature_nodes", "pce_only", "pce_kle")
TIMING_HEADER = ("modes", "degree", "build_seconds", "fe_seconds_per_sample", "pce_seconds_per_sample")


@dataclass
class StudyRow:
    modes: int
    degree: int
    n_terms: int
    quadrature_nodes: int
    pce_only: float
    pce_kle: float
    build_seconds: float
    fe_seconds_per_sample: float
    pce_seconds_per_sample: float

    def as_dict(self) -> dict:
        return asdict(self)


def _temperature(states, n_nodes):
    return np.asarray(states)[..., :n_nodes]


def error_study(disc, full_basis: KLEBasis, specs: dict, ti, modes, degrees, n_samples: int, seed: int,
                newton: NewtonSettings = NewtonSettings(), galerkin: GalerkinSettings = GalerkinSettings(),
                prebuilt: dict | None = None) -> list[StudyRow]:
    """Error table over ``modes`` x ``degrees``.

    ``full_basis`` must hold every mode used for the reference runs; the
    fresh samples are drawn once from ``seed`` and shared by all rows.
    ``prebuilt`` maps ``(modes, degree)`` to an ``(expansion, build_seconds)`` pair
    that is reused instead of rebuilt.
    """
    prebuilt = prebuilt or {}
    n_nodes = disc.n_nodes
    rng = np.random.default_rng(seed)
    xi_full = rng.standard_normal((n_samples, full_basis.n_modes))

    t0 = time.perf_counter()
    reference = run_simulation(disc, realize_fields(full_basis, specs, xi_full), ti, newton).states
    full_seconds = (time.perf_counter() - t0) / n_samples
    reference = _temperature(reference, n_nodes)

    rows = []
    for m in modes:
        basis = full_basis.truncate(m)
        xi = xi_full[:, :m]
        t0 = time.perf_counter()
        same = run_simulation(disc, realize_fields(basis, specs, xi), ti, newton).states
        fe_seconds = (time.perf_counter() - t0) / n_samples
        same = _temperature(same, n_nodes)
        for p in degrees:
            if (m, p) in prebuilt:
                pce, build_seconds = prebuilt[(m, p)]
            else:
                t0 = time.perf_counter()
                pce = build_surrogate(disc, basis, specs, ti, p, settings=galerkin)
                build_seconds = time.perf_counter() - t0
            t0 = time.perf_counter()
            approx = _temperature(pce.evaluate(xi), n_nodes)
            pce_seconds = (time.perf_counter() - t0) / n_samples
            rows.append(StudyRow(
                modes=m, degree=p, n_terms=pce.index_set.size,
                quadrature_nodes=int(pce.meta.get("quadrature_nodes", 0)),
                pce_only=error_expectation(same, approx),
                pce_kle=error_expectation(reference, approx),
                build_seconds=build_seconds,
                fe_seconds_per_sample=fe_seconds if m < full_basis.n_modes else full_seconds,
                pce_seconds_per_sample=pce_seconds,
            ))
    return rows
