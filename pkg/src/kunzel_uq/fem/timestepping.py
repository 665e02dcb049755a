"""Generalised midpoint time stepping with Newton-Raphson per step."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .assembly import Discretization

log = logging.getLogger(__name__)

HOUR = 3600.0


@dataclass(frozen=True)
class TimeIntegration:
    """``steps`` stored states (step 0 is the initial condition) spaced ``dt`` apart.

    The first ``startup_steps`` transitions use implicit Euler to damp the
    non-smooth start before switching to the midpoint parameter ``gamma``.
    """

    gamma: float = 0.5
    dt: float = 400.0 * HOUR / 150
    steps: int = 151
    startup_steps: int = 2

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.steps < 1:
            raise ValueError("need at least one stored step")
        if self.startup_steps < 0:
            raise ValueError("startup_steps must be nonnegative")

    def gamma_at(self, transition: int) -> float:
        return 1.0 if transition < self.startup_steps else self.gamma

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps) * self.dt


@dataclass(frozen=True)
class NewtonSettings:
    """Relative residual tolerance (per field) and iteration limits.

    Iterations use the frozen-coefficient (Picard) tangent while the relative
    residual exceeds ``newton_switch`` and the exact tangent below it.
    """

    tol: float = 1e-8
    max_iter: int = 25
    max_halvings: int = 8
    newton_switch: float = 3e-2


class StepFailure(RuntimeError):
    """Newton did not converge; carries the step index and residual history."""

    def __init__(self, step: int, residuals, members=None):
        self.step = step
        self.residuals = list(residuals)
        self.members = members
        last = self.residuals[-1] if self.residuals else float("nan")
        super().__init__(f"Newton failed at step {step} (last relative residual {last:.3e})")


@dataclass
class TransientSolution:
    states: np.ndarray  # (T, 2N), or (B, T, 2N) for a batch
    times: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return self.states.shape[-1] // 2

    @property
    def theta(self) -> np.ndarray:
        return self.states[..., : self.n_nodes]

    @property
    def phi(self) -> np.ndarray:
        return self.states[..., self.n_nodes:]


def _relative_residual(disc, r, f):
    rt, rp = disc.field_norms(r)
    ft, fp = disc.field_norms(f)
    tiny = 1e-300
    return np.maximum(rt / np.maximum(ft, tiny), rp / np.maximum(fp, tiny))


def consistent_rate(disc: Discretization, params, u):
    """Solve ``C du/dt = F - K u`` on the free dofs; Dirichlet rates are zero."""
    u = np.atleast_2d(u)
    r, _, _, _ = disc.residual(params, u, u, 1.0, jacobian=None)
    _, C, _ = disc.assemble(params, u)
    free = disc.free_dofs
    Cff = C[:, free][:, :, free]
    rate = np.zeros_like(u)
    rate[:, free] = np.linalg.solve(Cff, -r[..., None])[..., 0]
    return rate


def newton_solve(disc: Discretization, params, u0, u_tilde, gdt, settings: NewtonSettings,
                 history: list | None = None):
    """Solve the implicit step system for a batch.

    Returns ``(u, converged, iterations, clamped)``.  A full Newton step that
    fails the halving line search is retried with the Picard tangent.
    """
    u = u0.copy()
    free = disc.free_dofs
    batch = u.shape[0]
    force_picard = np.zeros(batch, dtype=bool)
    r, f, _, n_clamped = disc.residual(params, u, u_tilde, gdt, jacobian=None)
    err = _relative_residual(disc, r, f)
    done = err <= settings.tol
    it = 0
    if history is not None:
        history.append(err.copy())
    while not done.all() and it < settings.max_iter:
        it += 1
        act = np.flatnonzero(~done)
        sub = _subset(params, act, batch)
        full = (err[act] <= settings.newton_switch) & ~force_picard[act]
        _, _, J, _ = disc.residual(sub, u[act], u_tilde[act], gdt, jacobian=full)
        try:
            du = np.linalg.solve(J, -r[act][..., None])[..., 0]
        except np.linalg.LinAlgError:
            break
        step = np.ones(len(act))
        for _ in range(settings.max_halvings + 1):
            trial = u[act].copy()
            trial[:, free] += step[:, None] * du
            rt, ft, _, clamped = disc.residual(sub, trial, u_tilde[act], gdt, jacobian=None)
            et = _relative_residual(disc, rt, ft)
            worse = ~(et < err[act])
            if not worse.any() or step.min() <= 2.0 ** -settings.max_halvings:
                break
            step[worse] *= 0.5
        n_clamped += clamped
        # a stalled exact-tangent step falls back to Picard next time
        force_picard[act] = full & worse
        u[act] = trial
        r[act], f[act] = rt, ft
        err[act] = et
        done = err <= settings.tol
        if history is not None:
            history.append(err.copy())
    return u, done, it, n_clamped


def _subset(params, idx, batch):
    """Restrict batched (B, E) parameter arrays to rows ``idx``; pass others through."""
    def pick(v):
        v = np.asarray(v)
        if v.ndim >= 2 and v.shape[0] == batch:
            return v[idx]
        return v
    return params.map(pick)


def step(disc: Discretization, params, prev, prev_rate, ti: TimeIntegration, transition: int = 0,
         settings: NewtonSettings = NewtonSettings(), history: list | None = None):
    """Advance a batch of states by one time step.

    Returns ``(next, next_rate, converged, iterations, clamped)``.  The new
    rate follows from the midpoint relation
    ``u1 = u0 + dt[(1 - gamma) rate0 + gamma rate1]``.
    """
    prev = np.atleast_2d(prev)
    prev_rate = np.atleast_2d(prev_rate)
    gamma = ti.gamma_at(transition)
    dt = ti.dt
    u_tilde = prev + dt * (1.0 - gamma) * prev_rate
    u0 = prev.copy()
    u0[:, disc.dirichlet_dofs] = disc.dirichlet_values
    u, ok, its, clamped = newton_solve(disc, params, u0, u_tilde, gamma * dt, settings, history)
    rate = (u - u_tilde) / (gamma * dt)
    return u, rate, ok, its, clamped


def run_simulation(disc: Discretization, params, ti: TimeIntegration,
                   settings: NewtonSettings = NewtonSettings(), initial=None,
                   on_failure: str = "raise") -> TransientSolution:
    """Integrate one parameter set or a batch.

    ``params`` fields of shape (E,) give one run; shape (B, E) gives a batch
    of B independent runs solved together.  With ``on_failure="nan"`` failed
    batch members are filled with NaN from the failing step onwards instead
    of raising.
    """
    params.validate()
    batched = any(np.ndim(v) >= 2 for v in params.as_dict().values())
    batch = 1
    if batched:
        batch = max(np.shape(v)[0] for v in params.as_dict().values() if np.ndim(v) >= 2)
    u = np.broadcast_to(disc.initial_state if initial is None else initial,
                        (batch, disc.n_dofs)).astype(float).copy()
    states = np.empty((batch, ti.steps, disc.n_dofs))
    states[:, 0] = u
    alive = np.ones(batch, dtype=bool)
    if ti.steps > 1 and ti.gamma_at(0) < 1.0:
        rate = consistent_rate(disc, params, u)
    else:
        rate = np.zeros_like(u)
    iterations = []
    clamped = 0
    for i in range(ti.steps - 1):
        act = np.flatnonzero(alive)
        if len(act) == 0:
            states[:, i + 1:] = np.nan
            break
        sub = _subset(params, act, batch) if batched else params
        history = []
        u_new, rate_new, ok, its, nc = step(disc, sub, u[act], rate[act], ti, i, settings, history)
        iterations.append(its)
        clamped += nc
        if not ok.all():
            bad = act[~ok]
            if on_failure == "raise":
                raise StepFailure(i + 1, [float(np.max(h)) for h in history], members=bad.tolist())
            log.warning("step %d: %d run(s) failed to converge", i + 1, len(bad))
            alive[bad] = False
            states[bad, i + 1:] = np.nan
        u[act] = u_new
        rate[act] = rate_new
        states[alive, i + 1] = u[alive]
    diag = {
        "newton_iterations": iterations,
        "phi_clamped": int(clamped),
        "failed": np.flatnonzero(~alive).tolist(),
    }
    out = states if batched else states[0]
    return TransientSolution(states=out, times=ti.times, diagnostics=diag)
