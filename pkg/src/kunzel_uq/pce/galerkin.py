"""Intrusive stochastic Galerkin time stepping of the transport model.

The response is expanded as ``u(xi) = sum_alpha U[alpha] H_alpha(xi)`` and
every time step solves the projected residual equations
``E[r(u(xi), xi) H_beta] = 0`` for all ``beta``.  The non-polynomial
material coefficients make exact Hermite algebra impossible, so the
expectations are taken with a sparse-grid rule: the expansion is evaluated
at the quadrature nodes, the deterministic residual and tangent are formed
there in one batch, and the results are projected back.  The block Newton
system is solved with GMRES preconditioned by the mean tangent.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.sparse.linalg import LinearOperator, gmres

from ..fem.assembly import Discretization
from ..fem.timestepping import TimeIntegration, consistent_rate, run_simulation
from ..random_field import KLEBasis, realize_fields
from .basis import build_index_set, hermite_eval, hermite_norm
from .expansion import PCExpansion, project
from .quadrature import QuadratureRule, smolyak_rule

log = logging.getLogger(__name__)


class GalerkinFailure(RuntimeError):
    def __init__(self, step: int, residuals):
        self.step = step
        self.residuals = list(residuals)
        last = self.residuals[-1] if self.residuals else float("nan")
        super().__init__(f"stochastic Galerkin Newton failed at step {step} (last residual {last:.3e})")


@dataclass(frozen=True)
class GalerkinSettings:
    """Newton controls; ``tol`` matches the deterministic solver so the two agree closely."""

    tol: float = 1e-8
    max_iter: int = 30
    max_halvings: int = 8
    newton_switch: float = 3e-2
    linear_rtol: float = 1e-10
    linear_maxiter: int = 400


class GalerkinSystem:
    """Projected residual and tangent of one time step at fixed quadrature."""

    def __init__(self, disc: Discretization, params, rule: QuadratureRule, index_set):
        self.disc = disc
        self.params = params
        self.rule = rule
        self.index_set = index_set
        self.H = hermite_eval(index_set.indices, rule.nodes)  # (Q, R)
        self.WH = self.H * rule.weights[:, None]
        self.norms = hermite_norm(index_set.indices)
        self.free = disc.free_dofs

    def nodes(self, U):
        return self.H @ U

    def project(self, node_values):
        return self.WH.T @ node_values

    def evaluate(self, U, Ut, gdt, tangent=None):
        """Projected residual G (R, n_free), right hand side scale and node tangents."""
        r, f, J, clamped = self.disc.residual(self.params, self.nodes(U), self.nodes(Ut), gdt,
                                              jacobian=tangent)
        return self.project(r), self.project(f), J, clamped

    def error(self, G, F):
        gt, gp = self.disc.field_norms(G)
        ft, fp = self.disc.field_norms(F)
        tiny = 1e-300
        return float(max(np.linalg.norm(gt) / max(np.linalg.norm(ft), tiny),
                         np.linalg.norm(gp) / max(np.linalg.norm(fp), tiny)))

    def solve_linear(self, J, G, settings: GalerkinSettings):
        """Solve the block system ``sum_alpha E[H_beta J H_alpha] dU_alpha = -G_beta``."""
        R, nf = G.shape
        w = self.rule.weights
        mean_lu = lu_factor(np.tensordot(w, J, axes=(0, 0)))

        def matvec(v):
            V = v.reshape(R, nf)
            JV = np.einsum("qij,qj->qi", J, self.H @ V)
            return (self.WH.T @ JV).ravel()

        def precond(v):
            V = v.reshape(R, nf)
            return (lu_solve(mean_lu, V.T).T / self.norms[:, None]).ravel()

        n = R * nf
        A = LinearOperator((n, n), matvec=matvec, dtype=float)
        M = LinearOperator((n, n), matvec=precond, dtype=float)
        x, info = gmres(A, -G.ravel(), M=M, rtol=settings.linear_rtol, atol=0.0,
                        restart=min(n, 100), maxiter=settings.linear_maxiter)
        if info != 0:
            log.warning("GMRES stopped with info=%d; using a dense solve", info)
            dense = np.einsum("qb,qa,qij->biaj", self.WH, self.H, J).reshape(n, n)
            x = np.linalg.solve(dense, -G.ravel())
        return x.reshape(R, nf)


def galerkin_step(system: GalerkinSystem, U, rate, dt, gamma, settings: GalerkinSettings = GalerkinSettings(),
                  history: list | None = None):
    """Advance PC coefficients ``U`` (R, 2N) with rate ``rate`` by one step.

    Returns ``(U_next, rate_next, converged, iterations)``.
    """
    disc = system.disc
    free = system.free
    Ut = U + dt * (1.0 - gamma) * rate
    gdt = gamma * dt
    Un = U.copy()
    Un[0, disc.dirichlet_dofs] = disc.dirichlet_values
    Un[1:, disc.dirichlet_dofs] = 0.0
    G, F, _, _ = system.evaluate(Un, Ut, gdt)
    err = system.error(G, F)
    if history is not None:
        history.append(err)
    it = 0
    force_picard = False
    while err > settings.tol and it < settings.max_iter:
        it += 1
        use_full = err <= settings.newton_switch and not force_picard
        _, _, J, _ = system.evaluate(Un, Ut, gdt, tangent="full" if use_full else "picard")
        dU = system.solve_linear(J, G, settings)
        step = 1.0
        for _ in range(settings.max_halvings + 1):
            trial = Un.copy()
            trial[:, free] += step * dU
            Gt, Ft, _, _ = system.evaluate(trial, Ut, gdt)
            et = system.error(Gt, Ft)
            if et < err or step <= 2.0 ** -settings.max_halvings:
                break
            step *= 0.5
        force_picard = use_full and not et < err
        Un, G, F, err = trial, Gt, Ft, et
        if history is not None:
            history.append(err)
    rate_next = (Un - Ut) / gdt
    return Un, rate_next, err <= settings.tol, it


def quadrature_for(dim: int, degree: int, level: int | None = None) -> QuadratureRule:
    """Sparse grid of level ``degree + 1`` unless given: exact for degree ``2 degree + 1``."""
    return smolyak_rule(dim, degree + 1 if level is None else level)


def build_surrogate(disc: Discretization, kle: KLEBasis, specs: dict, ti: TimeIntegration, degree: int,
                    level: int | None = None, settings: GalerkinSettings = GalerkinSettings()) -> PCExpansion:
    """March the stochastic Galerkin system over all time steps."""
    index_set = build_index_set(kle.n_modes, degree)
    rule = quadrature_for(kle.n_modes, degree, level)
    params = realize_fields(kle, specs, rule.nodes)
    system = GalerkinSystem(disc, params, rule, index_set)
    R = index_set.size
    U = np.zeros((R, disc.n_dofs))
    U[0] = disc.initial_state
    if ti.steps > 1 and ti.gamma_at(0) < 1.0:
        rate = project(rule, index_set, consistent_rate(disc, params, system.nodes(U)))
    else:
        rate = np.zeros_like(U)
    coeffs = np.empty((ti.steps, R, disc.n_dofs))
    coeffs[0] = U
    iterations = []
    for i in range(ti.steps - 1):
        history = []
        U, rate, ok, its = galerkin_step(system, U, rate, ti.dt, ti.gamma_at(i), settings, history)
        if not ok:
            raise GalerkinFailure(i + 1, history)
        iterations.append(its)
        coeffs[i + 1] = U
    meta = {
        "method": "galerkin",
        "quadrature_level": rule.level,
        "quadrature_nodes": rule.size,
        "kle_digest": kle.digest(),
        "newton_iterations": iterations,
    }
    return PCExpansion(index_set, coeffs, ti.times, meta)


def nisp_surrogate(disc: Discretization, kle: KLEBasis, specs: dict, ti: TimeIntegration, degree: int,
                   level: int | None = None, **run_kwargs) -> PCExpansion:
    """Non-intrusive projection from full FE runs at the quadrature nodes."""
    index_set = build_index_set(kle.n_modes, degree)
    rule = quadrature_for(kle.n_modes, degree, level)
    params = realize_fields(kle, specs, rule.nodes)
    states = run_simulation(disc, params, ti, **run_kwargs).states  # (Q, T, 2N)
    coeffs = np.moveaxis(project(rule, index_set, states), 0, 1)
    meta = {
        "method": "nisp",
        "quadrature_level": rule.level,
        "quadrature_nodes": rule.size,
        "kle_digest": kle.digest(),
    }
    return PCExpansion(index_set, coeffs, ti.times, meta)
